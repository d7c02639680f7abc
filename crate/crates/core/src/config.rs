//! Run configuration read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! source = "synthetic"      # or "csv" with path, label_column, split, header, standardize
//! n = 500
//! p = 6
//! task = "logistic"         # or "regression"
//! test_fraction = 0.2
//!
//! [model]
//! clients = 3
//! kind = "linear"           # or "mlp" with hidden = [8], hidden_activation = "relu"
//! embedding_dim = 1
//! head = "trainable"        # or "frozen"
//! l2 = 0.001
//!
//! [perturbation]
//! hidden = []               # c_l per hidden layer
//! output = 0.0              # c
//!
//! [protocol]
//! mode = "async"            # "tsync" (with t) or "bounded" (with delay_bound)
//! batch = 10                # or "full"
//!
//! [schedule]
//! kind = "constant"
//! eta = 0.05
//!
//! [activation]
//! law = "poisson"           # "exp_delay" or "periodic"
//! rates = [1.0, 2.0, 3.0]   # omitted: base * (m + 1)
//!
//! [run]
//! max_k = 1000
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::qm_from_rates;
use crate::data::{BatchSpec, Task};
use crate::error::{config_err, Error, Result};
use crate::model::Activation;
use crate::optimizer::{ClientReduce, ScheduleKind, ScheduleSpec, TailSpec};
use crate::protocol::{Mode, PushPolicy, StepOrder};
use crate::scheduler::{ActivationLaw, ActivationSpec, EvalCadence, StopCondition};
use crate::numerics::DistSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub activation: ActivationConfig,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: String,
    pub n: usize,
    pub p: usize,
    pub task: String,
    pub noise_std: f64,
    /// Seed of the synthetic generator; defaults to the run seed.
    pub seed: Option<u64>,
    pub path: Option<PathBuf>,
    pub label_column: usize,
    pub split: Option<Vec<usize>>,
    pub header: bool,
    pub standardize: bool,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            n: 200,
            p: 6,
            task: "logistic".into(),
            noise_std: 0.1,
            seed: None,
            path: None,
            label_column: 0,
            split: None,
            header: true,
            standardize: false,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub clients: usize,
    pub kind: String,
    pub hidden: Vec<usize>,
    pub hidden_activation: String,
    pub output_activation: String,
    pub embedding_dim: usize,
    pub bias: bool,
    pub head: String,
    /// "zeros", "ones" or "random"; defaults to ones for a frozen head.
    pub head_init: Option<String>,
    pub l2: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            clients: 3,
            kind: "linear".into(),
            hidden: Vec::new(),
            hidden_activation: "relu".into(),
            output_activation: "identity".into(),
            embedding_dim: 1,
            bias: true,
            head: "trainable".into(),
            head_init: None,
            l2: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    pub hidden: Vec<f64>,
    pub output: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchValue {
    Size(usize),
    Word(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub mode: String,
    pub t: Option<usize>,
    pub delay_bound: Option<u64>,
    pub step_order: String,
    pub push: String,
    pub batch: BatchValue,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            mode: "async".into(),
            t: None,
            delay_bound: None,
            step_order: "paper".into(),
            push: "none".into(),
            batch: BatchValue::Size(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: String,
    pub eta0: Option<f64>,
    pub eta: Option<f64>,
    pub lipschitz: Option<f64>,
    pub mu: Option<f64>,
    pub delay_bound: Option<u64>,
    pub c_eta: Option<f64>,
    pub horizon: Option<u64>,
    pub k0: Option<f64>,
    pub q: Option<Vec<f64>>,
    pub pbar: Option<Vec<f64>>,
    pub rho: Option<f64>,
    pub nu: Option<f64>,
    pub eta_bar: Option<f64>,
    pub sqrt_q: bool,
    pub c_reduce: String,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: "constant".into(),
            eta0: None,
            eta: Some(0.05),
            lipschitz: None,
            mu: None,
            delay_bound: None,
            c_eta: None,
            horizon: None,
            k0: None,
            q: None,
            pbar: None,
            rho: None,
            nu: None,
            eta_bar: None,
            sqrt_q: true,
            c_reduce: "min".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivationConfig {
    pub law: String,
    /// Per-client law parameter (rate, mean delay or period).
    pub rates: Option<Vec<f64>>,
    /// Parameter of client `m` is `base * (m + 1)` when `rates` is absent.
    pub base: f64,
    /// Mean of exponential one-way message latency; 0 delivers instantly.
    pub latency_mean: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        ActivationConfig {
            law: "poisson".into(),
            rates: None,
            base: 1.0,
            latency_mean: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub max_k: Option<u64>,
    pub max_time: Option<f64>,
    /// Defaults to `N / batch` updates.
    pub eval_every: Option<u64>,
    /// Log-spaced evaluation with this many points per decade instead.
    pub eval_per_decade: Option<u32>,
    pub trace: bool,
    /// Noise draws for the smoothed-objective estimate in the report.
    pub mc_draws: usize,
    pub lyapunov: bool,
    /// Add smoothness and privacy constants to the report.
    pub constants: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            max_k: Some(100),
            max_time: None,
            eval_every: None,
            eval_per_decade: None,
            trace: false,
            mc_draws: 0,
            lyapunov: false,
            constants: false,
        }
    }
}

/// Architecture of every client embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub embedding_dim: usize,
    pub bias: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    Zeros,
    Ones,
    Random,
}

fn word<T>(value: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
    parse(value).ok_or_else(|| config_err!("unknown {what} '{value}'"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.clients == 0 {
            return Err(config_err!("model.clients must be >= 1"));
        }
        self.task()?;
        self.arch()?;
        self.head_init()?;
        self.mode()?;
        self.step_order()?;
        self.push()?;
        self.batch()?;
        self.activation()?;
        self.schedule_spec()?;
        self.stop()?;
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(config_err!("data.test_fraction must lie in [0, 1)"));
        }
        match self.data.source.as_str() {
            "synthetic" => {}
            "csv" if self.data.path.is_some() => {}
            "csv" => return Err(config_err!("data.source = \"csv\" needs data.path")),
            other => return Err(config_err!("unknown data.source '{other}'")),
        }
        if self.model.kind == "linear" && !self.perturbation.hidden.is_empty() {
            return Err(config_err!("a linear embedding has no hidden layers to perturb"));
        }
        if self.model.l2 < 0.0 {
            return Err(config_err!("model.l2 must be >= 0"));
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        word(&self.data.task, "task", Task::parse)
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        let hidden = match self.model.kind.as_str() {
            "linear" => Vec::new(),
            "mlp" if !self.model.hidden.is_empty() => self.model.hidden.clone(),
            "mlp" => return Err(config_err!("model.kind = \"mlp\" needs model.hidden widths")),
            other => return Err(config_err!("unknown model.kind '{other}'")),
        };
        if hidden.contains(&0) || self.model.embedding_dim == 0 {
            return Err(config_err!("layer widths must be >= 1"));
        }
        let output_activation = if self.model.kind == "linear" {
            Activation::Identity
        } else {
            word(&self.model.output_activation, "activation", Activation::parse)?
        };
        Ok(ArchSpec {
            hidden,
            hidden_activation: word(&self.model.hidden_activation, "activation", Activation::parse)?,
            output_activation,
            embedding_dim: self.model.embedding_dim,
            bias: self.model.bias,
        })
    }

    pub fn head_trainable(&self) -> Result<bool> {
        match self.model.head.as_str() {
            "trainable" => Ok(true),
            "frozen" => Ok(false),
            other => Err(config_err!("model.head must be \"trainable\" or \"frozen\", got '{other}'")),
        }
    }

    pub fn head_init(&self) -> Result<HeadInit> {
        let default = if self.head_trainable()? { "zeros" } else { "ones" };
        match self.model.head_init.as_deref().unwrap_or(default) {
            "zeros" => Ok(HeadInit::Zeros),
            "ones" => Ok(HeadInit::Ones),
            "random" => Ok(HeadInit::Random),
            other => Err(config_err!("unknown model.head_init '{other}'")),
        }
    }

    pub fn mode(&self) -> Result<Mode> {
        let m = self.model.clients;
        match self.protocol.mode.as_str() {
            "async" => Ok(Mode::Async),
            "tsync" => {
                let t = self.protocol.t.ok_or_else(|| config_err!("protocol.mode = \"tsync\" needs protocol.t"))?;
                if t == 0 || t > m {
                    return Err(config_err!("protocol.t must satisfy 1 <= t <= M = {m}"));
                }
                Ok(Mode::TSync(t))
            }
            "bounded" => {
                let d = self
                    .protocol
                    .delay_bound
                    .ok_or_else(|| config_err!("protocol.mode = \"bounded\" needs protocol.delay_bound"))?;
                if d == 0 {
                    return Err(config_err!("protocol.delay_bound must be >= 1"));
                }
                Ok(Mode::Bounded(d))
            }
            other => Err(config_err!("unknown protocol.mode '{other}'")),
        }
    }

    pub fn step_order(&self) -> Result<StepOrder> {
        match self.protocol.step_order.as_str() {
            "paper" => Ok(StepOrder::Paper),
            "footnote" => Ok(StepOrder::Footnote),
            other => Err(config_err!("unknown protocol.step_order '{other}'")),
        }
    }

    pub fn push(&self) -> Result<PushPolicy> {
        match self.protocol.push.as_str() {
            "none" => Ok(PushPolicy::None),
            "all" => Ok(PushPolicy::All),
            other => Err(config_err!("protocol.push must be \"none\" or \"all\", got '{other}'")),
        }
    }

    pub fn batch(&self) -> Result<BatchSpec> {
        match &self.protocol.batch {
            BatchValue::Size(0) => Err(config_err!("protocol.batch must be >= 1")),
            BatchValue::Size(s) => Ok(BatchSpec::Minibatch(*s)),
            BatchValue::Word(w) if w == "full" => Ok(BatchSpec::Full),
            BatchValue::Word(w) => Err(config_err!("protocol.batch must be a size or \"full\", got '{w}'")),
        }
    }

    /// Per-client law parameters.
    pub fn activation_params(&self) -> Result<Vec<f64>> {
        let m = self.model.clients;
        let params = match &self.activation.rates {
            Some(r) if r.len() == m => r.clone(),
            Some(r) => return Err(config_err!("activation.rates lists {} clients, model has {m}", r.len())),
            None => (0..m).map(|j| self.activation.base * (j + 1) as f64).collect(),
        };
        if params.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(config_err!("activation parameters must be positive"));
        }
        Ok(params)
    }

    pub fn activation(&self) -> Result<ActivationSpec> {
        let params = self.activation_params()?;
        let laws = params
            .iter()
            .map(|&v| match self.activation.law.as_str() {
                "poisson" => Ok(ActivationLaw::Poisson { rate: v }),
                "exp_delay" => Ok(ActivationLaw::ExpDelay { mean: v }),
                "periodic" => Ok(ActivationLaw::Periodic { period: v }),
                other => Err(config_err!("unknown activation.law '{other}'")),
            })
            .collect::<Result<Vec<_>>>()?;
        let latency = match self.activation.latency_mean {
            l if l == 0.0 => None,
            l if l > 0.0 && l.is_finite() => Some(DistSpec::exponential(1.0 / l, 1)),
            l => return Err(config_err!("activation.latency_mean must be >= 0, got {l}")),
        };
        Ok(ActivationSpec { laws, latency })
    }

    pub fn schedule_spec(&self) -> Result<ScheduleSpec> {
        let s = &self.schedule;
        let kind = match s.kind.as_str() {
            "constant" => {
                let eta = s.eta.ok_or_else(|| config_err!("constant schedule needs schedule.eta"))?;
                ScheduleKind::Constant {
                    eta0: s.eta0.unwrap_or(eta),
                    eta,
                }
            }
            "nc_bounded" => ScheduleKind::NcBounded,
            "sc_bounded" => ScheduleKind::ScBounded,
            "nc_unbounded" => ScheduleKind::NcUnbounded,
            "sc_unbounded" => ScheduleKind::ScUnbounded,
            other => return Err(config_err!("unknown schedule.kind '{other}'")),
        };
        let mut spec = ScheduleSpec::new(kind);
        spec.lipschitz = s.lipschitz;
        spec.mu = s.mu;
        spec.delay_bound = s.delay_bound.or(match self.mode()? {
            Mode::Bounded(d) => Some(d),
            _ => None,
        });
        spec.c_eta = s.c_eta;
        spec.horizon = s.horizon.or(self.run.max_k);
        spec.k0 = s.k0;
        spec.q = match &s.q {
            Some(q) => q.clone(),
            None => qm_from_rates(&self.activation_params()?)?,
        };
        if let (Some(pbar), Some(rho)) = (&s.pbar, s.rho) {
            spec.tail = Some(TailSpec { pbar: pbar.clone(), rho });
        }
        spec.nu = s.nu;
        spec.eta_bar = s.eta_bar;
        spec.tsync = match self.mode()? {
            Mode::TSync(t) => Some(t),
            _ => None,
        };
        spec.sqrt_q = s.sqrt_q;
        spec.c_reduce = match s.c_reduce.as_str() {
            "min" => ClientReduce::Min,
            "max" => ClientReduce::Max,
            other => return Err(config_err!("schedule.c_reduce must be \"min\" or \"max\", got '{other}'")),
        };
        crate::optimizer::Schedule::resolve(&spec)?;
        Ok(spec)
    }

    pub fn stop(&self) -> Result<StopCondition> {
        if self.run.max_k.is_none() && self.run.max_time.is_none() {
            return Err(config_err!("run needs max_k or max_time"));
        }
        Ok(StopCondition {
            max_k: self.run.max_k,
            max_time: self.run.max_time,
        })
    }

    /// Evaluation cadence for a training set of `n` samples.
    pub fn cadence(&self, n: usize) -> Result<EvalCadence> {
        if let Some(pd) = self.run.eval_per_decade {
            return Ok(EvalCadence::LogSpaced { per_decade: pd.max(1) });
        }
        let every = match self.run.eval_every {
            Some(0) => return Err(config_err!("run.eval_every must be >= 1")),
            Some(e) => e,
            None => (n / self.batch()?.size(n).max(1)).max(1) as u64,
        };
        Ok(EvalCadence::Every(every))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let cfg = RunConfig::from_toml("seed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.mode().unwrap(), Mode::Async);
        assert_eq!(cfg.activation_params().unwrap(), vec![1.0, 2.0, 3.0]);
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "[protocol]\nmode = \"tsync\"\nt = 9\n",
            "[protocol]\nmode = \"bounded\"\n",
            "[protocol]\nmode = \"bounded\"\ndelay_bound = 0\n",
            "[schedule]\nkind = \"nc_bounded\"\n",
            "[model]\nclients = 0\n",
            "[data]\nsource = \"csv\"\n",
            "[run]\nmax_k = 10\nbogus = 1\n",
            "[protocol]\nbatch = \"half\"\n",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn schedule_defaults_follow_protocol() {
        let cfg = RunConfig::from_toml(
            "[protocol]\nmode = \"bounded\"\ndelay_bound = 4\n[schedule]\nkind = \"nc_bounded\"\nlipschitz = 2.0\n",
        )
        .unwrap();
        let spec = cfg.schedule_spec().unwrap();
        assert_eq!(spec.delay_bound, Some(4));
        assert_eq!(spec.q.len(), 3);
        let batch = RunConfig::from_toml("[protocol]\nbatch = \"full\"\n").unwrap();
        assert_eq!(batch.batch().unwrap(), BatchSpec::Full);
    }
}
