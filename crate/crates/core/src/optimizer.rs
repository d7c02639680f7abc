//! Stepsize schedules for the bounded-delay and stochastic-delay regimes,
//! the geometric delay-tail constants they depend on, and the plain
//! gradient step.

use std::fmt;

use crate::error::{config_err, model_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    /// Fixed `(eta_0, eta_m)`.
    Constant { eta0: f64, eta: f64 },
    /// Nonconvex, bounded delay: `min{1/(4(1+D)L), c_eta/sqrt(K)}`.
    NcBounded,
    /// Strongly convex, bounded delay: `4/(mu min_m sqrt(q_m) (k+K0))`.
    ScBounded,
    /// Nonconvex, stochastic delay: `min{1/(4(1+sqrt(c))L), c_eta/sqrt(K)}`.
    NcUnbounded,
    /// Strongly convex, stochastic delay: `2/(nu (k+K0))`.
    ScUnbounded,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Constant { .. } => "constant",
            ScheduleKind::NcBounded => "nc_bounded",
            ScheduleKind::ScBounded => "sc_bounded",
            ScheduleKind::NcUnbounded => "nc_unbounded",
            ScheduleKind::ScUnbounded => "sc_unbounded",
        }
    }
}

/// How `c_m` is reduced over clients in the stochastic-delay nonconvex cap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientReduce {
    Min,
    Max,
}

/// Geometric tail `P(tau = d) <= pbar_m rho^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TailSpec {
    pub pbar: Vec<f64>,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Smoothness constant `L` of the objective.
    pub lipschitz: Option<f64>,
    /// Strong convexity constant.
    pub mu: Option<f64>,
    pub delay_bound: Option<u64>,
    pub c_eta: Option<f64>,
    /// Horizon `K`.
    pub horizon: Option<u64>,
    /// Overrides the default offset `K0`.
    pub k0: Option<f64>,
    /// Per-client update probabilities.
    pub q: Vec<f64>,
    pub tail: Option<TailSpec>,
    /// Overrides the derived `nu` for `sc_unbounded`.
    pub nu: Option<f64>,
    /// Stepsize bound used when deriving `nu`.
    pub eta_bar: Option<f64>,
    /// `t` of t-synchronous mode.
    pub tsync: Option<usize>,
    /// `sc_bounded` denominator uses `min sqrt(q_m)` (true) or `min q_m` (false).
    pub sqrt_q: bool,
    pub c_reduce: ClientReduce,
    /// Recorded only: server gradient variance.
    pub sigma0: Option<f64>,
    /// Recorded only: client gradient variances.
    pub sigma: Vec<f64>,
    /// Recorded only: blockwise smoothness constants.
    pub block_lipschitz: Vec<f64>,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind) -> Self {
        ScheduleSpec {
            kind,
            lipschitz: None,
            mu: None,
            delay_bound: None,
            c_eta: None,
            horizon: None,
            k0: None,
            q: Vec::new(),
            tail: None,
            nu: None,
            eta_bar: None,
            tsync: None,
            sqrt_q: true,
            c_reduce: ClientReduce::Min,
            sigma0: None,
            sigma: Vec::new(),
            block_lipschitz: Vec::new(),
        }
    }

    pub fn constant(eta0: f64, eta: f64) -> Self {
        ScheduleSpec::new(ScheduleKind::Constant { eta0, eta })
    }
}

fn need<T: Copy>(v: Option<T>, what: &str, kind: &str) -> Result<T> {
    v.ok_or_else(|| config_err!("schedule {kind} needs {what}"))
}

fn positive(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(config_err!("{what} must be positive and finite, got {v}"))
    }
}

/// A schedule with every derived constant computed.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    /// Server stepsize is `server_factor * base(k)`, client stepsize `client_factor * base(k)`.
    server_factor: f64,
    client_factor: f64,
    form: Form,
}

#[derive(Clone, Debug, PartialEq)]
enum Form {
    Fixed(f64, f64),
    Flat(f64),
    /// `numerator / (k + k0)`.
    Harmonic { numerator: f64, k0: f64 },
}

impl Schedule {
    pub fn resolve(spec: &ScheduleSpec) -> Result<Schedule> {
        let kind_name = spec.kind.name();
        let t = spec.tsync.unwrap_or(1);
        if t == 0 {
            return Err(config_err!("t-synchronous t must be >= 1"));
        }
        let min_q = || -> Result<f64> {
            if spec.q.is_empty() || spec.q.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
                return Err(config_err!("schedule {kind_name} needs update probabilities q_m in (0, 1]"));
            }
            Ok(spec.q.iter().cloned().fold(f64::INFINITY, f64::min))
        };
        let tails = || -> Result<Vec<f64>> {
            let tail = spec
                .tail
                .as_ref()
                .ok_or_else(|| config_err!("schedule {kind_name} needs delay tail parameters"))?;
            tail.pbar
                .iter()
                .map(|&p| c_m(p, tail.rho))
                .collect::<Result<Vec<_>>>()
        };
        let (form, server_factor, client_factor) = match spec.kind {
            ScheduleKind::Constant { eta0, eta } => {
                if !(eta0 >= 0.0 && eta >= 0.0 && eta0.is_finite() && eta.is_finite()) {
                    return Err(config_err!("constant stepsizes must be finite and >= 0"));
                }
                (Form::Fixed(eta0, eta), 1.0, 1.0)
            }
            ScheduleKind::NcBounded => {
                let l = positive(need(spec.lipschitz, "L", kind_name)?, "L")?;
                let d = need(spec.delay_bound, "D", kind_name)?;
                if d == 0 {
                    return Err(config_err!("delay bound D must be >= 1"));
                }
                let cap = 1.0 / (4.0 * (1.0 + d as f64) * l);
                let value = match (spec.c_eta, spec.horizon) {
                    (Some(c), Some(k)) => cap.min(positive(c, "c_eta")? / (k.max(1) as f64).sqrt()),
                    (None, _) => cap,
                    (Some(_), None) => return Err(config_err!("schedule {kind_name} needs horizon K with c_eta")),
                };
                (Form::Flat(value), 1.0, 1.0 / t as f64)
            }
            ScheduleKind::NcUnbounded => {
                let l = positive(need(spec.lipschitz, "L", kind_name)?, "L")?;
                let cs = tails()?;
                let c = match spec.c_reduce {
                    ClientReduce::Min => cs.iter().cloned().fold(f64::INFINITY, f64::min),
                    ClientReduce::Max => cs.iter().cloned().fold(0.0, f64::max),
                };
                let cap = 1.0 / (4.0 * (1.0 + c.sqrt()) * l);
                let value = match (spec.c_eta, spec.horizon) {
                    (Some(ce), Some(k)) => cap.min(positive(ce, "c_eta")? / (k.max(1) as f64).sqrt()),
                    (None, _) => cap,
                    (Some(_), None) => return Err(config_err!("schedule {kind_name} needs horizon K with c_eta")),
                };
                (Form::Flat(value), 1.0, 1.0 / t as f64)
            }
            ScheduleKind::ScBounded => {
                let mu = positive(need(spec.mu, "mu", kind_name)?, "mu")?;
                let qmin = min_q()?;
                let denom_q = if spec.sqrt_q { qmin.sqrt() } else { qmin };
                let k0 = match spec.k0 {
                    Some(k0) => positive(k0, "K0")?,
                    None => {
                        let l = positive(need(spec.lipschitz, "L (for default K0)", kind_name)?, "L")?;
                        let d = need(spec.delay_bound, "D (for default K0)", kind_name)? as f64;
                        if spec.tsync.is_some() {
                            let sq = qmin.sqrt();
                            4.0 * (4.0 * (d + 1.0) * l + mu * sq * d) / (mu * t as f64 * sq)
                        } else {
                            4.0 * (4.0 * (d + 1.0) * l + 2.0 * mu * qmin * d) / (mu * qmin)
                        }
                    }
                };
                (
                    Form::Harmonic {
                        numerator: 4.0 / (mu * denom_q),
                        k0,
                    },
                    1.0,
                    1.0,
                )
            }
            ScheduleKind::ScUnbounded => {
                let nu = match spec.nu {
                    Some(nu) => positive(nu, "nu")?,
                    None => {
                        let mu = positive(need(spec.mu, "mu", kind_name)?, "mu")?;
                        let l = positive(need(spec.lipschitz, "L", kind_name)?, "L")?;
                        let tail = spec.tail.as_ref().ok_or_else(|| config_err!("schedule {kind_name} needs delay tail parameters"))?;
                        if tail.pbar.len() != spec.q.len() {
                            return Err(config_err!("tail pbar and q must list every client"));
                        }
                        min_q()?;
                        let cmax = tails()?.into_iter().fold(0.0, f64::max);
                        let eta_bar = match spec.eta_bar {
                            Some(e) => positive(e, "eta_bar")?,
                            None => 1.0 / (2.0 * (1.0 + cmax.sqrt()) * l),
                        };
                        global_nu(&tail.pbar, tail.rho, mu, &spec.q, eta_bar)?
                    }
                };
                let k0 = match spec.k0 {
                    Some(k0) => positive(k0, "K0")?,
                    None => {
                        let l = positive(need(spec.lipschitz, "L (for default K0)", kind_name)?, "L")?;
                        let cmax = tails()?.into_iter().fold(0.0, f64::max);
                        4.0 * (1.0 + cmax.sqrt()) * l / (t as f64 * nu)
                    }
                };
                (Form::Harmonic { numerator: 2.0 / nu, k0 }, 1.0, 1.0)
            }
        };
        Ok(Schedule {
            kind: spec.kind,
            server_factor,
            client_factor,
            form,
        })
    }

    /// `(eta_0^k, eta_m^k)`.
    pub fn at(&self, k: u64) -> (f64, f64) {
        let base = match self.form {
            Form::Fixed(e0, e) => return (e0, e),
            Form::Flat(v) => v,
            Form::Harmonic { numerator, k0 } => numerator / (k as f64 + k0),
        };
        (self.server_factor * base, self.client_factor * base)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Offset `K0` of harmonic schedules.
    pub fn k0(&self) -> Option<f64> {
        match self.form {
            Form::Harmonic { k0, .. } => Some(k0),
            _ => None,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.form {
            Form::Fixed(e0, e) => write!(f, "constant eta0={e0} eta={e}"),
            Form::Flat(v) => write!(
                f,
                "{} eta0={} eta={}",
                self.kind.name(),
                self.server_factor * v,
                self.client_factor * v
            ),
            Form::Harmonic { numerator, k0 } => {
                write!(f, "{} eta(k)={numerator}/(k+{k0})", self.kind.name())
            }
        }
    }
}

pub fn stepsize(spec: &ScheduleSpec, k: u64) -> Result<(f64, f64)> {
    Ok(Schedule::resolve(spec)?.at(k))
}

/// Delay-tail constants of one client.
#[derive(Clone, Debug, PartialEq)]
pub struct TailConstants {
    pub pbar: f64,
    pub rho: f64,
    /// `sum_d c_{m,d}`.
    pub c_m: f64,
    /// This client's candidate `min{(1/eta_bar)(1-rho)c_m/(20+c_m), mu q_m/2}`.
    pub nu: f64,
}

impl TailConstants {
    /// `c_{m,d} = sum_{s >= d} s pbar rho^s`.
    pub fn c_md(&self, d: u64) -> f64 {
        c_md(self.pbar, self.rho, d)
    }
}

fn check_tail(pbar: f64, rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(config_err!("tail ratio rho must lie in (0, 1), got {rho}"));
    }
    if !(pbar > 0.0 && pbar.is_finite()) {
        return Err(config_err!("tail scale pbar must be positive, got {pbar}"));
    }
    Ok(())
}

pub fn c_md(pbar: f64, rho: f64, d: u64) -> f64 {
    let d_f = d as f64;
    let one = 1.0 - rho;
    pbar * (d_f * rho.powf(d_f) / one + rho.powf(d_f + 1.0) / (one * one))
}

pub fn c_m(pbar: f64, rho: f64) -> Result<f64> {
    check_tail(pbar, rho)?;
    let one = 1.0 - rho;
    Ok(pbar * (rho / (one * one) + 2.0 * rho * rho / (one * one * one)))
}

pub fn tail_constants(pbar: f64, rho: f64, mu: f64, q: f64, eta_bar: f64) -> Result<TailConstants> {
    let cm = c_m(pbar, rho)?;
    positive(mu, "mu")?;
    positive(q, "q_m")?;
    positive(eta_bar, "eta_bar")?;
    let nu = ((1.0 - rho) * cm / (eta_bar * (20.0 + cm))).min(mu * q / 2.0);
    Ok(TailConstants { pbar, rho, c_m: cm, nu })
}

/// `nu = min_m` of the per-client candidates.
pub fn global_nu(pbar: &[f64], rho: f64, mu: f64, q: &[f64], eta_bar: f64) -> Result<f64> {
    if pbar.is_empty() || pbar.len() != q.len() {
        return Err(config_err!("pbar and q must list the same clients"));
    }
    pbar.iter()
        .zip(q)
        .map(|(&p, &qm)| tail_constants(p, rho, mu, qm, eta_bar).map(|t| t.nu))
        .try_fold(f64::INFINITY, |acc, nu| nu.map(|v| acc.min(v)))
}

/// `params - eta * gradient`.
pub fn apply_update(params: &[f64], gradient: &[f64], eta: f64) -> Result<Vec<f64>> {
    let mut out = params.to_vec();
    apply_update_in_place(&mut out, gradient, eta)?;
    Ok(out)
}

pub fn apply_update_in_place(params: &mut [f64], gradient: &[f64], eta: f64) -> Result<()> {
    if params.len() != gradient.len() {
        return Err(model_err!(
            "gradient has {} entries, parameters have {}",
            gradient.len(),
            params.len()
        ));
    }
    if eta != 0.0 {
        for (p, g) in params.iter_mut().zip(gradient) {
            *p -= eta * g;
        }
    }
    Ok(())
}
