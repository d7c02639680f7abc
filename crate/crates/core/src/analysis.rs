//! Constants and diagnostics: smoothing and smoothness constants of perturbed
//! embeddings, the perturbation gap, privacy calibration, update shares,
//! Lyapunov values and rate fitting.

use crate::error::{analysis_err, Result};
use crate::model::{embed_forward, EmbeddingParams, PerturbationSpec};
use crate::numerics::{norm, Matrix, Rng};

/// Noise law for the single-neuron smoothing constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SmoothingLaw {
    /// Uniform on a cube of side `c`.
    Uniform(f64),
    /// `N(0, c^2 I)`.
    Gaussian(f64),
}

/// Smoothness constant of `x -> E sigma(x + Z)` for a `d`-dimensional neuron.
pub fn layer_smoothing_constant(law: SmoothingLaw, lsigma0: f64, d: usize) -> Result<f64> {
    let (c, value) = match law {
        SmoothingLaw::Uniform(c) => (c, 2.0 * (d as f64).sqrt() * lsigma0 / c),
        SmoothingLaw::Gaussian(c) => (c, lsigma0 * d as f64 / c),
    };
    if !(c > 0.0) || !c.is_finite() {
        return Err(analysis_err!("noise level must be positive, got {c}"));
    }
    Ok(value)
}

/// Inputs of the layerwise smoothness recursion for one client.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessInputs {
    /// Lipschitz constant `L_sigma^0` of the activations.
    pub lsigma0: f64,
    /// Operator norms `|w_1| .. |w_L|`.
    pub weight_norms: Vec<f64>,
    /// Layer widths `d_1 .. d_L`.
    pub dims: Vec<usize>,
    /// Hidden noise levels `c_1 .. c_{L-1}`.
    pub hidden_noise: Vec<f64>,
    /// Output noise level `c`.
    pub output_noise: f64,
    /// `E|u_0| .. E|u_{L-1}|` with `u_0 = x`.
    pub input_norms: Vec<f64>,
    /// Smoothness of the loss in this client's embedding.
    pub loss_smooth_h: f64,
    /// Lipschitz constant of the loss.
    pub loss_lipschitz: f64,
    /// Lipschitz constant of the embedding in its parameters.
    pub embedding_lipschitz: f64,
    /// Smoothness of the regularizer.
    pub reg_smooth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessReport {
    pub inputs: SmoothnessInputs,
    /// `L_{b_l}^h` for `l = 1..L`.
    pub bias_constants: Vec<f64>,
    /// `L_{w_l}^h` for `l = 1..L`.
    pub weight_constants: Vec<f64>,
    /// Smoothness of the smoothed objective in this client's parameters.
    pub objective_constant: f64,
}

impl SmoothnessReport {
    pub fn to_key_values(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (l, v) in self.bias_constants.iter().enumerate() {
            out.push((format!("L_b{}", l + 1), *v));
        }
        for (l, v) in self.weight_constants.iter().enumerate() {
            out.push((format!("L_w{}", l + 1), *v));
        }
        out.push(("L_Fc".to_string(), self.objective_constant));
        out
    }
}

pub fn smoothness_recursion(inputs: &SmoothnessInputs) -> Result<SmoothnessReport> {
    let depth = inputs.weight_norms.len();
    if depth == 0 {
        return Err(analysis_err!("smoothness recursion needs at least one layer"));
    }
    if inputs.dims.len() != depth || inputs.input_norms.len() != depth || inputs.hidden_noise.len() + 1 != depth {
        return Err(analysis_err!(
            "layer lists disagree: {} norms, {} dims, {} input norms, {} hidden noise levels",
            depth,
            inputs.dims.len(),
            inputs.input_norms.len(),
            inputs.hidden_noise.len()
        ));
    }
    if let Some(c) = inputs
        .hidden_noise
        .iter()
        .chain(std::iter::once(&inputs.output_noise))
        .find(|c| !(**c > 0.0))
    {
        return Err(analysis_err!(
            "every layer needs positive noise for finite smoothness constants, got {c}"
        ));
    }
    let ls = inputs.lsigma0;
    let mut bias = vec![0.0; depth];
    bias[depth - 1] = layer_smoothing_constant(SmoothingLaw::Gaussian(inputs.output_noise), ls, inputs.dims[depth - 1])?;
    for l in (0..depth - 1).rev() {
        let chain: f64 = inputs.weight_norms[l + 1..].iter().map(|w| ls * w).product();
        let own = layer_smoothing_constant(SmoothingLaw::Uniform(inputs.hidden_noise[l]), ls, inputs.dims[l])?;
        bias[l] = bias[l + 1] * inputs.weight_norms[l + 1] * ls * ls + chain * own;
    }
    let weight: Vec<f64> = bias.iter().zip(&inputs.input_norms).map(|(b, u)| u * b).collect();
    let layer_sum: f64 = bias.iter().chain(&weight).sum();
    let objective = inputs.loss_smooth_h * inputs.embedding_lipschitz.powi(2)
        + inputs.loss_lipschitz * layer_sum
        + inputs.reg_smooth;
    Ok(SmoothnessReport {
        inputs: inputs.clone(),
        bias_constants: bias,
        weight_constants: weight,
        objective_constant: objective,
    })
}

/// Spectral norms of every layer of an embedding.
pub fn weight_norms(params: &EmbeddingParams) -> Vec<f64> {
    params.layers.iter().map(|l| l.w.spectral_norm(50, 1e-6)).collect()
}

/// Monte Carlo `E|u_{l-1}|` for `l = 1..L` over at most 1000 rows of `x`,
/// with 16 noise draws per row.
pub fn estimate_input_norms(
    params: &EmbeddingParams,
    pert: &PerturbationSpec,
    x: &Matrix,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = x.rows().min(1000);
    if n == 0 {
        return Err(analysis_err!("cannot estimate layer input norms from an empty dataset"));
    }
    let draws = if pert.is_zero() { 1 } else { 16 };
    let depth = params.depth();
    let mut acc = vec![0.0; depth];
    for r in 0..n {
        let row = x.row(r);
        for _ in 0..draws {
            let (_, tape) = embed_forward(params, row, pert, rng)?;
            acc[0] += norm(row);
            for l in 1..depth {
                acc[l] += norm(&tape.post[l - 1]);
            }
        }
    }
    let total = (n * draws) as f64;
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Both readings of the perturbation-gap bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapBound {
    /// Includes the loss Lipschitz factor.
    pub conservative: f64,
    /// Without the loss Lipschitz factor.
    pub literal: f64,
}

/// `|F_c - F| <= M L_l (sum_j prod_{l>=j} L_{sigma_l}^2 |w_l|^2)^(1/2) (sum c_l^2 + c^2)^(1/2)`.
pub fn perturbation_gap(
    clients: usize,
    loss_lipschitz: f64,
    lsigma: &[f64],
    weight_norms: &[f64],
    hidden_noise: &[f64],
    output_noise: f64,
) -> Result<GapBound> {
    if lsigma.len() != weight_norms.len() || weight_norms.is_empty() {
        return Err(analysis_err!("need one activation constant per weight norm"));
    }
    let depth = weight_norms.len();
    let mut amp = 0.0;
    for j in 0..depth {
        amp += (j..depth)
            .map(|l| (lsigma[l] * weight_norms[l]).powi(2))
            .product::<f64>();
    }
    let noise: f64 = hidden_noise.iter().map(|c| c * c).sum::<f64>() + output_noise * output_noise;
    let literal = clients as f64 * amp.sqrt() * noise.sqrt();
    Ok(GapBound {
        conservative: loss_lipschitz * literal,
        literal,
    })
}

/// Worst-case change of the last layer's input across neighbouring inputs,
/// scaled by `|w_L|`.
pub fn sensitivity_bound(
    weight_norms: &[f64],
    lsigma: &[f64],
    input_distance: f64,
    dims: &[usize],
    hidden_noise: &[f64],
) -> Result<f64> {
    let depth = weight_norms.len();
    if depth == 0 {
        return Err(analysis_err!("sensitivity needs at least one layer"));
    }
    let hidden = depth - 1;
    if lsigma.len() < hidden || dims.len() < hidden || hidden_noise.len() < hidden {
        return Err(analysis_err!(
            "sensitivity needs {hidden} activation constants, widths and noise levels"
        ));
    }
    let wl = weight_norms[depth - 1];
    let chain: f64 = (0..hidden).map(|l| lsigma[l] * weight_norms[l]).product();
    let mut noise_term = 0.0;
    let mut prod = 1.0;
    for l in 0..hidden {
        prod *= lsigma[l] * (dims[l] as f64).sqrt();
        noise_term += prod * hidden_noise[l];
    }
    Ok(wl * chain * input_distance + wl * noise_term)
}

/// Gaussian noise std giving `(eps, delta)`-DP for `T` releases at sampling ratio `q`.
pub fn dp_calibrate(sensitivity: f64, q: f64, releases: f64, eps: f64, delta: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(analysis_err!("epsilon must be positive, got {eps}"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(analysis_err!("delta must lie in (0, 1), got {delta}"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(analysis_err!("sampling ratio must lie in (0, 1], got {q}"));
    }
    if !(releases >= 1.0) {
        return Err(analysis_err!("release count must be >= 1, got {releases}"));
    }
    if !(sensitivity >= 0.0) {
        return Err(analysis_err!("sensitivity must be nonnegative, got {sensitivity}"));
    }
    Ok(sensitivity * q * (releases * (1.0 / delta).ln()).sqrt() / eps)
}

/// `c = kappa N_m sqrt(K) / (mu N)`; `kappa` carries the unknown order constant.
pub fn gdp_variance_order(n_m: f64, n: f64, k: f64, mu: f64, kappa: f64) -> Result<f64> {
    if [n_m, n, k, mu, kappa].iter().any(|v| !(*v > 0.0)) {
        return Err(analysis_err!("GDP order inputs must all be positive"));
    }
    Ok(kappa * n_m * k.sqrt() / (mu * n))
}

/// Normalized inverse rates.
pub fn qm_from_rates(rates: &[f64]) -> Result<Vec<f64>> {
    if rates.is_empty() || rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(analysis_err!("rates must be positive and finite"));
    }
    let inv: Vec<f64> = rates.iter().map(|r| 1.0 / r).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaVariant {
    Nonconvex,
    StronglyConvex { mu: f64, min_q: f64 },
}

/// Lyapunov weights `gamma_1 .. gamma_D`.
pub fn gamma_schedule(d: usize, l: f64, eta_bar: f64, variant: GammaVariant) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(analysis_err!("delay bound must be >= 1"));
    }
    let df = d as f64;
    let base = 1.0 - 2.0 * df * df * eta_bar * eta_bar * l * l;
    let num = 1.5 * eta_bar * df * df * l * l;
    match variant {
        GammaVariant::Nonconvex => {
            if !(base > 0.0) {
                return Err(analysis_err!("stepsize bound {eta_bar} too large: gamma_1 denominator {base}"));
            }
            let g1 = num / base;
            let step = 1.5 * df * eta_bar * l * l + 2.0 * df * g1 * eta_bar * eta_bar * l * l;
            Ok((0..d).map(|i| g1 - i as f64 * step).collect())
        }
        GammaVariant::StronglyConvex { mu, min_q } => {
            let denom = base - 0.5 * mu * min_q * df * eta_bar;
            if !(denom > 0.0) {
                return Err(analysis_err!("stepsize bound {eta_bar} too large: gamma_1 denominator {denom}"));
            }
            let g1 = num / denom;
            let step = 1.5 * df * eta_bar * l * l + 2.0 * df * g1 * eta_bar * l * l + 0.5 * mu * min_q * eta_bar * g1;
            let mut out = vec![g1];
            out.extend((2..=d).map(|i| (df + 1.0 - i as f64) * step));
            Ok(out)
        }
    }
}

/// `V = F + sum_d gamma_d |theta^{k+1-d} - theta^{k-d}|^2`; `history` runs oldest
/// to newest and ends with `theta^k`.
pub fn lyapunov_value(f: f64, history: &[Vec<f64>], gamma: &[f64]) -> Result<f64> {
    let d = gamma.len();
    if history.len() < d + 1 {
        return Err(analysis_err!(
            "Lyapunov value needs {} snapshots, history has {}",
            d + 1,
            history.len()
        ));
    }
    let last = history.len() - 1;
    let mut v = f;
    for (i, g) in gamma.iter().enumerate() {
        let newer = &history[last - i];
        let older = &history[last - i - 1];
        if newer.len() != older.len() {
            return Err(analysis_err!("snapshots have different lengths"));
        }
        let diff: f64 = newer.iter().zip(older).map(|(a, b)| (a - b) * (a - b)).sum();
        v += g * diff;
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% normal-approximation half-width of the slope.
    pub half_width: f64,
    pub points: usize,
}

/// Least-squares slope of `log(value)` against `log(k)` over `k` in `window`.
pub fn fit_loglog_slope(series: &[(f64, f64)], window: Option<(f64, f64)>) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(k, _)| window.is_none_or(|(lo, hi)| *k >= lo && *k <= hi))
        .cloned()
        .collect();
    if pts.len() < 10 {
        return Err(analysis_err!("slope fit needs at least 10 points, window holds {}", pts.len()));
    }
    if let Some((k, v)) = pts.iter().find(|(k, v)| !(*k > 0.0) || !(*v > 0.0)) {
        return Err(analysis_err!("log-log fit needs positive k and values, got ({k}, {v})"));
    }
    let xs: Vec<f64> = pts.iter().map(|(k, _)| k.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|(_, v)| v.ln()).collect();
    let (slope, intercept, se) = least_squares(&xs, &ys, None);
    Ok(SlopeFit {
        slope,
        intercept,
        half_width: 1.96 * se,
        points: pts.len(),
    })
}

/// Weighted simple regression; returns `(slope, intercept, slope standard error)`.
fn least_squares(xs: &[f64], ys: &[f64], weights: Option<&[f64]>) -> (f64, f64, f64) {
    let n = xs.len();
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let sw: f64 = (0..n).map(w).sum();
    let mx = (0..n).map(|i| w(i) * xs[i]).sum::<f64>() / sw;
    let my = (0..n).map(|i| w(i) * ys[i]).sum::<f64>() / sw;
    let sxx: f64 = (0..n).map(|i| w(i) * (xs[i] - mx).powi(2)).sum();
    let sxy: f64 = (0..n).map(|i| w(i) * (xs[i] - mx) * (ys[i] - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = (0..n).map(|i| w(i) * (ys[i] - intercept - slope * xs[i]).powi(2)).sum();
    let se = if n > 2 { (rss / (n as f64 - 2.0) / sxx).sqrt() } else { f64::NAN };
    (slope, intercept, se)
}

/// Geometric envelope `P(tau = d) <= pbar rho^d` fitted to a staleness histogram.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricEnvelope {
    pub pbar: f64,
    pub rho: f64,
}

impl GeometricEnvelope {
    pub fn at(&self, d: usize) -> f64 {
        self.pbar * self.rho.powi(d as i32)
    }
}

/// Fits `rho` by count-weighted least squares of `log P(tau = d)` on `d`, over bins
/// with at least `min_count` events, then sets `pbar` to the smallest value
/// that dominates every such bin. `counts[d]` is the number of reads at staleness `d`.
pub fn fit_geometric_envelope(counts: &[u64], min_count: u64) -> Result<GeometricEnvelope> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(analysis_err!("empty staleness histogram"));
    }
    let bins: Vec<usize> = (1..counts.len()).filter(|&d| counts[d] >= min_count.max(1)).collect();
    if bins.len() < 2 {
        return Err(analysis_err!("need at least two well-populated staleness bins, found {}", bins.len()));
    }
    let xs: Vec<f64> = bins.iter().map(|&d| d as f64).collect();
    let ys: Vec<f64> = bins.iter().map(|&d| (counts[d] as f64 / total as f64).ln()).collect();
    let ws: Vec<f64> = bins.iter().map(|&d| counts[d] as f64).collect();
    let (slope, _, _) = least_squares(&xs, &ys, Some(&ws));
    let rho = slope.exp();
    let pbar = bins
        .iter()
        .map(|&d| counts[d] as f64 / total as f64 / rho.powi(d as i32))
        .fold(0.0, f64::max);
    Ok(GeometricEnvelope { pbar, rho })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn smoothing_constant_examples() {
        assert_eq!(layer_smoothing_constant(SmoothingLaw::Uniform(2.0), 1.0, 1).unwrap(), 1.0);
        assert_eq!(layer_smoothing_constant(SmoothingLaw::Gaussian(2.0), 1.0, 4).unwrap(), 2.0);
        let a = layer_smoothing_constant(SmoothingLaw::Uniform(0.7), 1.3, 3).unwrap();
        let b = layer_smoothing_constant(SmoothingLaw::Uniform(1.4), 1.3, 3).unwrap();
        assert!(close(b, a / 2.0, 1e-15));
        assert!(layer_smoothing_constant(SmoothingLaw::Gaussian(0.0), 1.0, 1).is_err());
    }

    fn inputs(depth: usize) -> SmoothnessInputs {
        SmoothnessInputs {
            lsigma0: 1.0,
            weight_norms: vec![1.0; depth],
            dims: vec![1; depth],
            hidden_noise: vec![1.0; depth - 1],
            output_noise: 1.0,
            input_norms: vec![1.0; depth],
            loss_smooth_h: 0.25,
            loss_lipschitz: 1.0,
            embedding_lipschitz: 1.0,
            reg_smooth: 0.0,
        }
    }

    #[test]
    fn recursion_examples() {
        let mut one = inputs(1);
        one.dims = vec![3];
        one.output_noise = 3.0;
        assert_eq!(smoothness_recursion(&one).unwrap().bias_constants, vec![1.0]);

        let two = smoothness_recursion(&inputs(2)).unwrap();
        assert_eq!(two.bias_constants, vec![3.0, 1.0]);

        let mut doubled = inputs(2);
        doubled.hidden_noise = vec![2.0];
        doubled.output_noise = 2.0;
        let d = smoothness_recursion(&doubled).unwrap();
        assert_eq!(d.bias_constants, vec![1.5, 0.5]);

        let mut zero = inputs(2);
        zero.hidden_noise = vec![0.0];
        assert!(smoothness_recursion(&zero).is_err());
    }

    #[test]
    fn gap_examples() {
        let g = perturbation_gap(1, 1.0, &[1.0], &[1.0], &[], 0.1).unwrap();
        assert!(close(g.conservative, 0.1, 1e-15));
        assert_eq!(perturbation_gap(3, 2.0, &[1.0, 1.0], &[2.0, 1.0], &[0.0], 0.0).unwrap().conservative, 0.0);
        let lo = perturbation_gap(2, 1.0, &[1.0, 1.0], &[1.0, 1.0], &[0.1], 0.1).unwrap();
        let hi = perturbation_gap(2, 1.0, &[1.0, 1.0], &[1.0, 1.0], &[0.2], 0.1).unwrap();
        assert!(hi.conservative > lo.conservative);
        let two = perturbation_gap(1, 2.0, &[1.0], &[1.0], &[], 0.1).unwrap();
        assert!(close(two.literal, 0.1, 1e-15) && close(two.conservative, 0.2, 1e-15));
    }

    #[test]
    fn sensitivity_examples() {
        assert_eq!(sensitivity_bound(&[2.0], &[], 1.0, &[], &[]).unwrap(), 2.0);
        assert_eq!(sensitivity_bound(&[1.0, 1.0], &[1.0], 1.0, &[4], &[0.5]).unwrap(), 2.0);
        assert_eq!(sensitivity_bound(&[3.0], &[], 0.0, &[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn calibration_examples() {
        let nu = dp_calibrate(1.0, 0.01, 1e4, 1.0, (-1.0f64).exp()).unwrap();
        assert!(close(nu, 1.0, 1e-12));
        assert!(dp_calibrate(1.0, 0.01, 1e4, 0.0, 0.5).is_err());
        assert!(dp_calibrate(1.0, 0.01, 1e4, 1.0, 1.0).is_err());
        assert_eq!(gdp_variance_order(5.0, 5.0, 1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!(close(gdp_variance_order(10.0, 1000.0, 1e4, 1.0, 1.0).unwrap(), 1.0, 1e-15));
        assert_eq!(
            gdp_variance_order(10.0, 1000.0, 1e4, 0.5, 1.0).unwrap(),
            2.0 * gdp_variance_order(10.0, 1000.0, 1e4, 1.0, 1.0).unwrap()
        );
    }

    #[test]
    fn qm_examples() {
        assert_eq!(qm_from_rates(&[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        let q = qm_from_rates(&[1.0, 2.0]).unwrap();
        assert!(close(q[0], 2.0 / 3.0, 1e-15) && close(q[1], 1.0 / 3.0, 1e-15));
        let q = qm_from_rates(&[0.3, 7.0, 2.5]).unwrap();
        assert!(close(q.iter().sum(), 1.0, 1e-15));
        assert!(qm_from_rates(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn gamma_examples() {
        let g = gamma_schedule(1, 2.0, 0.1, GammaVariant::Nonconvex).unwrap();
        assert!(close(g[0], 1.5 * 0.1 * 4.0 / (1.0 - 2.0 * 0.01 * 4.0), 1e-15));
        let g = gamma_schedule(2, 1.0, 0.1, GammaVariant::Nonconvex).unwrap();
        let g1 = 0.6 / 0.92;
        assert!(close(g[0], g1, 1e-15));
        assert!(close(g[1], g1 - 0.3 - 4.0 * g1 * 0.01, 1e-14));
        let g = gamma_schedule(5, 1.0, 0.01, GammaVariant::Nonconvex).unwrap();
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        assert!(gamma_schedule(2, 1.0, 1.0, GammaVariant::Nonconvex).is_err());
        let s = gamma_schedule(3, 1.0, 0.01, GammaVariant::StronglyConvex { mu: 0.1, min_q: 0.25 }).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s[1] > s[2] && s[2] > 0.0);
    }

    #[test]
    fn lyapunov_examples() {
        let h = vec![vec![1.0, 2.0]; 3];
        assert_eq!(lyapunov_value(4.0, &h, &[1.0, 2.0]).unwrap(), 4.0);
        let h = vec![vec![0.0], vec![0.5]];
        assert_eq!(lyapunov_value(1.0, &h, &[2.0]).unwrap(), 1.5);
        assert_eq!(lyapunov_value(1.0, &h, &[0.0]).unwrap(), 1.0);
        assert!(lyapunov_value(1.0, &h, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn slope_examples() {
        let inv: Vec<(f64, f64)> = (1..=100).map(|k| (k as f64, 1.0 / k as f64)).collect();
        let f = fit_loglog_slope(&inv, None).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-6);
        let sq: Vec<(f64, f64)> = (1..=100).map(|k| (k as f64, (k as f64).powf(-0.5))).collect();
        assert!((fit_loglog_slope(&sq, Some((10.0, 100.0))).unwrap().slope + 0.5).abs() < 1e-9);
        assert!(fit_loglog_slope(&inv[..5], None).is_err());
        let mut bad = inv.clone();
        bad[3].1 = 0.0;
        assert!(fit_loglog_slope(&bad, None).is_err());
    }

    #[test]
    fn envelope_recovers_geometric_law() {
        let counts: Vec<u64> = (0..12).map(|d| if d == 0 { 0 } else { (1e6 * 0.5f64.powi(d)).round() as u64 }).collect();
        let env = fit_geometric_envelope(&counts, 30).unwrap();
        assert!((env.rho - 0.5).abs() < 1e-3, "{env:?}");
        let total: u64 = counts.iter().sum();
        for d in 1..12 {
            assert!(counts[d] as f64 / total as f64 <= env.at(d) * (1.0 + 1e-12));
        }
    }
}
