use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vafl::analysis::{
    dp_calibrate, fit_loglog_slope, gdp_variance_order, perturbation_gap, smoothness_recursion, SmoothnessInputs,
};
use vafl::config::RunConfig;
use vafl::data::{gen_synthetic, SyntheticSpec, Task};
use vafl::error::{Error, Result};
use vafl::experiment::{run_experiment, Experiment};

#[derive(Parser)]
#[command(name = "vafl", version, about = "Vertical asynchronous federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv, report.txt and optionally trace.csv.
    Run(RunArgs),
    /// Noise level for (eps, delta)-DP, or the order-level GDP noise.
    Calibrate(CalibrateArgs),
    /// Smoothness constants of a perturbed embedding.
    Smoothness(SmoothnessArgs),
    /// Bound on the gap between the smoothed and the clean objective.
    Gap(GapArgs),
    /// Log-log slope of a metrics.csv column against k.
    FitRate(FitRateArgs),
    /// Write a synthetic dataset as CSV (label in column 0).
    GenData(GenDataArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Sampling ratio N_m / N.
    #[arg(long)]
    q: Option<f64>,
    /// Number of perturbed releases.
    #[arg(long = "T")]
    releases: Option<f64>,
    /// Sensitivity bound.
    #[arg(long)]
    sens: Option<f64>,
    /// Target GDP level; switches to the order-level calibrator.
    #[arg(long)]
    gdp_mu: Option<f64>,
    #[arg(long)]
    n_m: Option<f64>,
    #[arg(long)]
    n: Option<f64>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
}

#[derive(Args)]
struct SmoothnessArgs {
    /// Compute from the initial state of a configured run instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    lsigma0: f64,
    /// Operator norms of w_1..w_L.
    #[arg(long, value_delimiter = ',')]
    norms: Vec<f64>,
    /// Widths d_1..d_L.
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    /// Hidden noise levels c_1..c_{L-1}.
    #[arg(long, value_delimiter = ',')]
    hidden_noise: Vec<f64>,
    #[arg(long)]
    output_noise: Option<f64>,
    /// E|u_0|..E|u_{L-1}|; defaults to ones.
    #[arg(long, value_delimiter = ',')]
    input_norms: Vec<f64>,
    #[arg(long, default_value_t = 0.25)]
    loss_smooth: f64,
    #[arg(long, default_value_t = 1.0)]
    loss_lipschitz: f64,
    #[arg(long, default_value_t = 1.0)]
    embedding_lipschitz: f64,
    #[arg(long, default_value_t = 0.0)]
    reg: f64,
}

#[derive(Args)]
struct GapArgs {
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long, default_value_t = 1.0)]
    loss_lipschitz: f64,
    /// Activation Lipschitz constants per layer; defaults to ones.
    #[arg(long, value_delimiter = ',')]
    lsigma: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    norms: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    hidden_noise: Vec<f64>,
    #[arg(long)]
    output_noise: f64,
}

#[derive(Args)]
struct FitRateArgs {
    metrics: PathBuf,
    #[arg(long, default_value = "grad_norm_sq")]
    column: String,
    #[arg(long)]
    from: Option<f64>,
    #[arg(long)]
    to: Option<f64>,
    /// Fit the running minimum of the column.
    #[arg(long)]
    running_min: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long = "N")]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long = "M")]
    m: usize,
    #[arg(long, default_value = "logistic")]
    task: String,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Smoothness(a) => cmd_smoothness(a),
        Command::Gap(a) => cmd_gap(a),
        Command::FitRate(a) => cmd_fit_rate(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let log = run_experiment(&cfg, Some(&a.out))?;
    if let Some(last) = log.rows.last() {
        println!(
            "k = {} train_loss = {} grad_norm_sq = {} test_metric = {}",
            last.k, last.train_loss, last.grad_norm_sq, last.test_metric
        );
    }
    println!("wrote {}", a.out.join("metrics.csv").display());
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    if let Some(mu) = a.gdp_mu {
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| config_error(format!("--gdp-mu needs --{name}")));
        let c = gdp_variance_order(need(a.n_m, "n-m")?, need(a.n, "n")?, need(a.k, "k")?, mu, a.kappa)?;
        println!("kappa = {}", a.kappa);
        println!("c = {c}");
        return Ok(());
    }
    let need = |v: Option<f64>, name: &str| v.ok_or_else(|| config_error(format!("calibrate needs --{name}")));
    let nu = dp_calibrate(
        need(a.sens, "sens")?,
        need(a.q, "q")?,
        need(a.releases, "T")?,
        need(a.eps, "eps")?,
        need(a.delta, "delta")?,
    )?;
    println!("nu = {nu}");
    Ok(())
}

fn cmd_smoothness(a: SmoothnessArgs) -> Result<()> {
    if let Some(path) = a.config {
        let cfg = RunConfig::load(&path)?;
        let exp = Experiment::build(&cfg)?;
        for (k, v) in exp.constants_report()? {
            println!("{k} = {v}");
        }
        return Ok(());
    }
    let depth = a.norms.len();
    let inputs = SmoothnessInputs {
        lsigma0: a.lsigma0,
        weight_norms: a.norms,
        dims: a.dims,
        hidden_noise: a.hidden_noise,
        output_noise: a
            .output_noise
            .ok_or_else(|| config_error("smoothness needs --output-noise or --config"))?,
        input_norms: if a.input_norms.is_empty() { vec![1.0; depth] } else { a.input_norms },
        loss_smooth_h: a.loss_smooth,
        loss_lipschitz: a.loss_lipschitz,
        embedding_lipschitz: a.embedding_lipschitz,
        reg_smooth: a.reg,
    };
    let report = smoothness_recursion(&inputs)?;
    for (k, v) in report.to_key_values() {
        println!("{k} = {v}");
    }
    Ok(())
}

fn cmd_gap(a: GapArgs) -> Result<()> {
    let lsigma = if a.lsigma.is_empty() { vec![1.0; a.norms.len()] } else { a.lsigma };
    let g = perturbation_gap(a.clients, a.loss_lipschitz, &lsigma, &a.norms, &a.hidden_noise, a.output_noise)?;
    println!("gap_conservative = {}", g.conservative);
    println!("gap_literal = {}", g.literal);
    Ok(())
}

fn read_column(path: &Path, column: &str) -> Result<Vec<(f64, f64)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: no column '{name}'", path.display())))
    };
    let kc = find("k")?;
    let vc = find(column)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        let parse = |c: usize| -> Result<Option<f64>> {
            let f = rec.get(c).unwrap_or("");
            if f.is_empty() {
                return Ok(None);
            }
            f.parse()
                .map(Some)
                .map_err(|_| Error::Data(format!("{}: row {}: '{f}' is not a number", path.display(), i + 2)))
        };
        // The initial row (k = 0) has no place on a log axis.
        if let (Some(k), Some(v)) = (parse(kc)?, parse(vc)?) {
            if k > 0.0 {
                out.push((k, v));
            }
        }
    }
    Ok(out)
}

fn cmd_fit_rate(a: FitRateArgs) -> Result<()> {
    let mut series = read_column(&a.metrics, &a.column)?;
    if a.running_min {
        let mut best = f64::INFINITY;
        for p in &mut series {
            best = best.min(p.1);
            p.1 = best;
        }
    }
    let window = match (a.from, a.to) {
        (None, None) => None,
        (lo, hi) => Some((lo.unwrap_or(f64::MIN_POSITIVE), hi.unwrap_or(f64::INFINITY))),
    };
    let fit = fit_loglog_slope(&series, window)?;
    println!("slope = {}", fit.slope);
    println!("half_width = {}", fit.half_width);
    println!("points = {}", fit.points);
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let task = Task::parse(&a.task).ok_or_else(|| config_error(format!("unknown task '{}'", a.task)))?;
    let ds = gen_synthetic(&SyntheticSpec {
        n: a.n,
        p: a.p,
        clients: a.m,
        task,
        noise_std: a.noise_std,
        seed: a.seed,
    })?;
    ds.write_csv(&a.out)?;
    println!("wrote {} rows to {}", a.n, a.out.display());
    Ok(())
}
