//! Builds a run from a [`RunConfig`], drives it and writes `metrics.csv`,
//! `trace.csv` and `report.txt`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{
    estimate_input_norms, gamma_schedule, lyapunov_value, sensitivity_bound, smoothness_recursion, weight_norms,
    GammaVariant, SmoothnessInputs,
};
use crate::config::{HeadInit, RunConfig};
use crate::data::{gen_synthetic, load_csv, even_split, CsvOptions, SyntheticSpec, Task, VerticalDataset};
use crate::error::{config_err, Error, Result};
use crate::model::{EmbeddingParams, LossKind, PerturbationSpec, RegularizerSpec, ServerHead};
use crate::numerics::{norm, streams, Rng};
use crate::objective::{full_gradient, loss_for, smoothed_loss, test_metric};
use crate::optimizer::{Schedule, ScheduleKind};
use crate::protocol::{init_pass, ClientState, ServerState, TraceRow};
use crate::scheduler::{run, ActivationSpec, EvalCadence, MetricsRow, Observation, Observer, RunLog, StopCondition};

pub const METRICS_HEADER: &str = "k,virtual_time,train_loss,grad_norm_sq,test_metric,max_tau_read,lyapunov";

/// A fully built run, ready for [`Experiment::run`].
pub struct Experiment {
    pub config: RunConfig,
    pub train: VerticalDataset,
    pub test: Option<VerticalDataset>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub activation: ActivationSpec,
    pub reg: RegularizerSpec,
    pub task: Task,
    pub stop: StopCondition,
    pub cadence: EvalCadence,
    gamma: Option<Vec<f64>>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<VerticalDataset> {
    let task = cfg.task()?;
    match cfg.data.source.as_str() {
        "synthetic" => gen_synthetic(&SyntheticSpec {
            n: cfg.data.n,
            p: cfg.data.p,
            clients: cfg.model.clients,
            task,
            noise_std: cfg.data.noise_std,
            seed: cfg.data.seed.unwrap_or(cfg.seed),
        }),
        "csv" => {
            let path = cfg.data.path.as_ref().ok_or_else(|| config_err!("csv source needs data.path"))?;
            let split = match &cfg.data.split {
                Some(s) => s.clone(),
                None => {
                    // Count columns from the first record.
                    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
                    let mut rdr = csv::ReaderBuilder::new().has_headers(cfg.data.header).from_reader(file);
                    let cols = match rdr.records().next() {
                        Some(Ok(r)) => r.len(),
                        Some(Err(e)) => return Err(crate::error::data_err!("{}: {e}", path.display())),
                        None => return Err(crate::error::data_err!("{}: no data rows", path.display())),
                    };
                    even_split(cols.saturating_sub(1), cfg.model.clients)?
                }
            };
            if split.len() != cfg.model.clients {
                return Err(config_err!(
                    "data.split has {} blocks, model has {} clients",
                    split.len(),
                    cfg.model.clients
                ));
            }
            load_csv(
                path,
                &CsvOptions {
                    label_column: cfg.data.label_column,
                    split,
                    header: cfg.data.header,
                    standardize: cfg.data.standardize,
                },
            )
        }
        other => Err(config_err!("unknown data.source '{other}'")),
    }
}

fn build_params(cfg: &RunConfig, input: usize, rng: &mut Rng) -> Result<EmbeddingParams> {
    let arch = cfg.arch()?;
    let mut p = if arch.hidden.is_empty() {
        EmbeddingParams::linear(input, arch.embedding_dim, arch.bias)
    } else {
        EmbeddingParams::mlp(
            input,
            &arch.hidden,
            arch.embedding_dim,
            arch.hidden_activation,
            arch.output_activation,
            arch.bias,
        )
    };
    p.init_random(rng);
    Ok(p)
}

fn perturbation(cfg: &RunConfig, depth: usize) -> Result<PerturbationSpec> {
    let hidden = if cfg.perturbation.hidden.is_empty() {
        vec![0.0; depth - 1]
    } else if cfg.perturbation.hidden.len() == 1 && depth > 2 {
        vec![cfg.perturbation.hidden[0]; depth - 1]
    } else {
        cfg.perturbation.hidden.clone()
    };
    let spec = PerturbationSpec {
        hidden_stds: hidden,
        output_std: cfg.perturbation.output,
    };
    spec.validate(depth).map_err(|e| config_err!("perturbation: {e}"))?;
    Ok(spec)
}

impl Experiment {
    pub fn build(cfg: &RunConfig) -> Result<Experiment> {
        cfg.validate()?;
        let task = cfg.task()?;
        let data = load_dataset(cfg)?;
        let (train, test) = if cfg.data.test_fraction > 0.0 {
            let (a, b) = data.split_holdout(cfg.data.test_fraction)?;
            (a, Some(b))
        } else {
            (data, None)
        };
        let n = train.n_samples();
        let batch = cfg.batch()?;
        batch.validate(n)?;
        let reg = RegularizerSpec::l2(cfg.model.l2);
        let order = cfg.step_order()?;
        let push = cfg.push()?;
        let init_root = Rng::from_seed(cfg.seed).fork(streams::INIT);
        let mut clients = Vec::with_capacity(cfg.model.clients);
        for m in 0..cfg.model.clients {
            let mut rng = init_root.fork(m as u64);
            let params = build_params(cfg, train.block(m).cols(), &mut rng)?;
            let pert = perturbation(cfg, params.depth())?;
            let mut c = ClientState::new(m, train.block(m).clone(), params, pert, reg, batch, order, cfg.seed)?;
            c.push = push;
            clients.push(c);
        }
        let widths: Vec<usize> = clients.iter().map(|c| c.params.output_dim()).collect();
        let loss = loss_for(task);
        let trainable = cfg.head_trainable()?;
        let total: usize = widths.iter().sum();
        let weights = match cfg.head_init()? {
            HeadInit::Zeros => vec![0.0; total + 1],
            HeadInit::Ones => {
                let mut w = vec![1.0; total + 1];
                w[total] = 0.0;
                w
            }
            HeadInit::Random => {
                let mut rng = Rng::from_seed(cfg.seed).fork(streams::SERVER);
                let scale = 1.0 / (total as f64).sqrt();
                let mut w: Vec<f64> = (0..=total).map(|_| scale * rng.standard_normal()).collect();
                w[total] = 0.0;
                w
            }
        };
        let head = ServerHead::with_weights(&widths, weights, loss, trainable)?;
        let spec = cfg.schedule_spec()?;
        let schedule = Schedule::resolve(&spec)?;
        let mut server = ServerState::new(head, train.labels().to_vec(), cfg.mode()?, schedule.clone())?;
        if cfg.run.trace {
            server.trace = Some(Vec::new());
        }
        init_pass(&mut server, &mut clients)?;

        let gamma = if cfg.run.lyapunov {
            let d = spec
                .delay_bound
                .ok_or_else(|| config_err!("lyapunov diagnostics need a delay bound D"))?;
            let l = spec
                .lipschitz
                .ok_or_else(|| config_err!("lyapunov diagnostics need schedule.lipschitz"))?;
            let (e0, e) = schedule.at(0);
            let eta_bar = e0.max(e);
            let variant = match (spec.mu, spec.q.iter().cloned().reduce(f64::min)) {
                (Some(mu), Some(q)) if !matches!(spec.kind, ScheduleKind::NcBounded | ScheduleKind::NcUnbounded) => {
                    GammaVariant::StronglyConvex { mu, min_q: q }
                }
                _ => GammaVariant::Nonconvex,
            };
            Some(gamma_schedule(d as usize, l, eta_bar, variant)?)
        } else {
            None
        };

        Ok(Experiment {
            activation: cfg.activation()?,
            stop: cfg.stop()?,
            cadence: cfg.cadence(n)?,
            config: cfg.clone(),
            train,
            test,
            server,
            clients,
            reg,
            task,
            gamma,
        })
    }

    pub fn run(&mut self) -> Result<RunLog> {
        let mut observer = MetricsObserver::new(&self.train, self.test.as_ref(), self.reg, self.task, self.gamma.clone(), &self.server, &self.clients);
        let mut log = run(
            &mut self.server,
            &mut self.clients,
            &self.activation,
            self.stop,
            self.cadence,
            self.config.seed,
            &mut observer,
        )?;
        log.header = self.header();
        Ok(log)
    }

    fn header(&self) -> Vec<(String, String)> {
        vec![
            ("seed".into(), self.config.seed.to_string()),
            ("mode".into(), self.server.mode.name()),
            ("schedule".into(), self.server.schedule.to_string()),
            ("clients".into(), self.clients.len().to_string()),
            ("train_samples".into(), self.train.n_samples().to_string()),
            (
                "test_samples".into(),
                self.test.as_ref().map_or(0, |t| t.n_samples()).to_string(),
            ),
        ]
    }

    pub fn params(&self) -> Vec<&EmbeddingParams> {
        self.clients.iter().map(|c| &c.params).collect()
    }

    /// Monte Carlo estimate of the smoothed objective at the current parameters.
    pub fn smoothed_objective(&self, draws: usize) -> Result<f64> {
        let perts: Vec<PerturbationSpec> = self.clients.iter().map(|c| c.pert.clone()).collect();
        let mut rng = Rng::from_seed(self.config.seed).fork(streams::EVAL);
        smoothed_loss(&self.server.head, &self.params(), &perts, &self.train, &self.reg, draws, &mut rng)
    }

    /// `key = value` lines with smoothness and sensitivity constants per client.
    pub fn constants_report(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut rng = Rng::from_seed(self.config.seed).fork(streams::EVAL).fork(1);
        for c in &self.clients {
            let norms = weight_norms(&c.params);
            let block = self.server.head.block(c.m);
            let head_norm = norm(block);
            let lsigma: Vec<f64> = c.params.layers.iter().map(|l| l.activation.lipschitz()).collect();
            let lsigma0 = lsigma.iter().cloned().fold(0.0, f64::max);
            let x_max = (0..c.features().rows()).map(|r| norm(c.features().row(r))).fold(0.0, f64::max);
            let hidden_dims = c.params.widths();
            let sens = sensitivity_bound(&norms, &lsigma, 2.0 * x_max, &hidden_dims, &c.pert.hidden_stds)?;
            out.push((format!("client{}.sensitivity", c.m), sens.to_string()));
            if c.pert.hidden_stds.iter().chain(std::iter::once(&c.pert.output_std)).all(|&v| v > 0.0) {
                let inputs = SmoothnessInputs {
                    lsigma0,
                    weight_norms: norms.clone(),
                    dims: hidden_dims,
                    hidden_noise: c.pert.hidden_stds.clone(),
                    output_noise: c.pert.output_std,
                    input_norms: estimate_input_norms(&c.params, &c.pert, c.features(), &mut rng)?,
                    loss_smooth_h: match self.server.head.loss {
                        LossKind::BinaryLogistic => 0.25 * head_norm * head_norm,
                        LossKind::Squared => head_norm * head_norm,
                    },
                    loss_lipschitz: head_norm,
                    embedding_lipschitz: norms.iter().zip(&lsigma).map(|(w, s)| w * s).product::<f64>() * x_max,
                    reg_smooth: self.reg.lipschitz_grad(),
                };
                let report = smoothness_recursion(&inputs)?;
                for (k, v) in report.to_key_values() {
                    out.push((format!("client{}.{k}", c.m), v.to_string()));
                }
            } else {
                out.push((format!("client{}.L_Fc", c.m), "unbounded (a layer has zero noise)".into()));
            }
        }
        Ok(out)
    }
}

struct MetricsObserver<'a> {
    train: &'a VerticalDataset,
    test: Option<&'a VerticalDataset>,
    reg: RegularizerSpec,
    task: Task,
    gamma: Option<Vec<f64>>,
    history: VecDeque<Vec<f64>>,
}

fn snapshot(server: &ServerState, clients: &[ClientState]) -> Vec<f64> {
    let mut v = server.head.weights.clone();
    for c in clients {
        v.extend(c.params.flatten());
    }
    v
}

impl<'a> MetricsObserver<'a> {
    fn new(
        train: &'a VerticalDataset,
        test: Option<&'a VerticalDataset>,
        reg: RegularizerSpec,
        task: Task,
        gamma: Option<Vec<f64>>,
        server: &ServerState,
        clients: &[ClientState],
    ) -> Self {
        let depth = gamma.as_ref().map_or(0, |g| g.len() + 1);
        let history = std::iter::repeat_n(snapshot(server, clients), depth).collect();
        MetricsObserver {
            train,
            test,
            reg,
            task,
            gamma,
            history,
        }
    }
}

impl Observer for MetricsObserver<'_> {
    fn observe(&mut self, at: Observation<'_>) -> Result<MetricsRow> {
        let params: Vec<&EmbeddingParams> = at.clients.iter().map(|c| &c.params).collect();
        let head = &at.server.head;
        let g = full_gradient(head, &params, self.train, &self.reg)?;
        let test = match self.test {
            Some(t) => test_metric(head, &params, t, self.task)?,
            None => f64::NAN,
        };
        let lyapunov = match &self.gamma {
            Some(gamma) => {
                let h: Vec<Vec<f64>> = self.history.iter().cloned().collect();
                Some(lyapunov_value(g.loss, &h, gamma)?)
            }
            None => None,
        };
        Ok(MetricsRow {
            k: at.k,
            virtual_time: at.time,
            train_loss: g.loss,
            grad_norm_sq: g.norm_sq(head.trainable),
            test_metric: test,
            max_tau_read: at.max_tau_read,
            lyapunov,
        })
    }

    fn after_update(&mut self, server: &ServerState, clients: &[ClientState]) -> Result<()> {
        if self.gamma.is_some() {
            self.history.pop_front();
            self.history.push_back(snapshot(server, clients));
        }
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn metrics_csv(log: &RunLog) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in &log.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.k,
            r.virtual_time,
            r.train_loss,
            r.grad_norm_sq,
            fmt_f64(r.test_metric),
            r.max_tau_read,
            r.lyapunov.map_or(String::new(), |v| v.to_string())
        );
    }
    s
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("virtual_time,k,kind,client,batch_size,max_tau_read\n");
    for r in rows {
        let client = if r.client == usize::MAX { String::new() } else { r.client.to_string() };
        let _ = writeln!(s, "{},{},{},{},{},{}", r.virtual_time, r.k, r.kind, client, r.batch_size, r.max_tau_read);
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds and runs `cfg`; with `out`, writes the run's files there.
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<RunLog> {
    let mut exp = Experiment::build(cfg)?;
    let log = exp.run()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("metrics.csv"), &metrics_csv(&log))?;
        if let Some(trace) = &exp.server.trace {
            write(&dir.join("trace.csv"), &trace_csv(trace))?;
        }
        write(&dir.join("report.txt"), &report(&exp, &log)?)?;
    }
    Ok(log)
}

fn report(exp: &Experiment, log: &RunLog) -> Result<String> {
    let mut s = String::new();
    for (k, v) in &log.header {
        let _ = writeln!(s, "{k} = {v}");
    }
    let _ = writeln!(s, "final_k = {}", exp.server.k);
    let _ = writeln!(s, "final_time = {}", log.final_time);
    let _ = writeln!(s, "events = {}", log.events);
    if let Some(last) = log.rows.last() {
        let _ = writeln!(s, "final_train_loss = {}", last.train_loss);
        let _ = writeln!(s, "final_grad_norm_sq = {}", last.grad_norm_sq);
        let _ = writeln!(s, "final_test_metric = {}", fmt_f64(last.test_metric));
    }
    let total: u64 = log.uploads.iter().sum();
    for (m, u) in log.uploads.iter().enumerate() {
        let share = if total > 0 { *u as f64 / total as f64 } else { 0.0 };
        let _ = writeln!(s, "client{m}.uploads = {u}");
        let _ = writeln!(s, "client{m}.update_share = {share}");
    }
    let _ = writeln!(s, "max_tau_read = {}", exp.server.audit.max_overall);
    let _ = writeln!(s, "forced_refreshes = {}", exp.server.audit.refreshes);
    let noisy = exp.clients.iter().any(|c| !c.pert.is_zero());
    if noisy && exp.config.run.mc_draws > 0 {
        let _ = writeln!(s, "smoothed_objective_mc = {}", exp.smoothed_objective(exp.config.run.mc_draws)?);
        let _ = writeln!(s, "smoothed_objective_draws = {}", exp.config.run.mc_draws);
    }
    if exp.config.run.constants {
        for (k, v) in exp.constants_report()? {
            let _ = writeln!(s, "{k} = {v}");
        }
    }
    s.push_str("\n[config]\n");
    s.push_str(&exp.config.to_toml());
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_gives_one_row() {
        let cfg = RunConfig::from_toml("seed = 1\n[run]\nmax_k = 0\n").unwrap();
        let log = run_experiment(&cfg, None).unwrap();
        assert_eq!(log.rows.len(), 1);
        assert_eq!(log.rows[0].k, 0);
        assert!(metrics_csv(&log).starts_with(METRICS_HEADER));
    }

    #[test]
    fn runs_are_reproducible() {
        let text = "seed = 4\n[protocol]\nbatch = 5\n[run]\nmax_k = 200\nlyapunov = false\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        let a = metrics_csv(&run_experiment(&cfg, None).unwrap());
        let b = metrics_csv(&run_experiment(&cfg, None).unwrap());
        assert_eq!(a, b);
        assert!(a.lines().count() > 2);
    }

    #[test]
    fn lyapunov_column_is_filled() {
        let text = "seed = 2\n[protocol]\nmode = \"bounded\"\ndelay_bound = 2\nbatch = 5\n[schedule]\nkind = \"nc_bounded\"\nlipschitz = 2.0\n[run]\nmax_k = 50\neval_every = 10\nlyapunov = true\n";
        let log = run_experiment(&RunConfig::from_toml(text).unwrap(), None).unwrap();
        assert!(log.rows.iter().all(|r| r.lyapunov.is_some_and(|v| v >= r.train_loss)));
    }
}
