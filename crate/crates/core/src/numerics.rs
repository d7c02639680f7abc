//! Seeded randomness, the handful of distributions the simulator draws from,
//! and small dense linear-algebra helpers.
//!
//! Every random quantity in a run (minibatch indices, activation gaps,
//! perturbation noise, model initialization) comes from an [`Rng`] that is
//! forked from the run seed with a fixed stream label. The generator is
//! ChaCha8 keyed by the 64-bit seed, with the ChaCha stream id selecting the
//! substream, so streams never overlap and a fork does not depend on how many
//! values the parent has produced.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Normal};

use crate::error::{config_err, model_err, Result};

/// Stream labels used when forking the run seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const ACTIVATION: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const SERVER: u64 = 6;
    pub const EVAL: u64 = 7;

    /// Perturbation sites below a client's noise stream.
    pub const SITE_UPLOAD: u64 = 0;
    pub const SITE_REFRESH: u64 = 1;
    pub const SITE_INIT: u64 = 2;
    pub const SITE_PUSH: u64 = 3;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A reproducible random stream identified by `(seed, stream_id)`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Rng {
            seed,
            stream_id,
            inner,
        }
    }

    /// Root stream of a run.
    pub fn from_seed(seed: u64) -> Self {
        Rng::new(seed, 0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream determined by `(seed, stream_id, id)` only.
    pub fn fork(&self, id: u64) -> Rng {
        let child = splitmix64(splitmix64(self.stream_id) ^ id.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        Rng::new(self.seed, child)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform01(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        rand_distr::StandardNormal.sample(&mut self.inner)
    }

    pub(crate) fn engine(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

/// Child stream of `rng` labelled `stream_id`.
pub fn fork_rng(rng: &Rng, stream_id: u64) -> Rng {
    rng.fork(stream_id)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DistKind {
    Gaussian { mean: f64, std: f64 },
    /// Uniform on `[-half_width, half_width]`.
    UniformSymmetric { half_width: f64 },
    Exponential { rate: f64 },
    Categorical { weights: Vec<f64> },
}

/// A distribution together with the number of i.i.d. components to draw.
#[derive(Clone, Debug, PartialEq)]
pub struct DistSpec {
    pub kind: DistKind,
    pub dim: usize,
}

impl DistSpec {
    pub fn gaussian(mean: f64, std: f64, dim: usize) -> Self {
        DistSpec {
            kind: DistKind::Gaussian { mean, std },
            dim,
        }
    }

    pub fn uniform_symmetric(half_width: f64, dim: usize) -> Self {
        DistSpec {
            kind: DistKind::UniformSymmetric { half_width },
            dim,
        }
    }

    pub fn exponential(rate: f64, dim: usize) -> Self {
        DistSpec {
            kind: DistKind::Exponential { rate },
            dim,
        }
    }

    pub fn categorical(weights: Vec<f64>, dim: usize) -> Self {
        DistSpec {
            kind: DistKind::Categorical { weights },
            dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(config_err!("distribution dimension must be at least 1"));
        }
        match &self.kind {
            DistKind::Gaussian { mean, std } => {
                if !mean.is_finite() || !std.is_finite() || *std < 0.0 {
                    return Err(config_err!("gaussian needs finite mean and std >= 0, got ({mean}, {std})"));
                }
            }
            DistKind::UniformSymmetric { half_width } => {
                if !half_width.is_finite() || *half_width < 0.0 {
                    return Err(config_err!("uniform half width must be finite and >= 0, got {half_width}"));
                }
            }
            DistKind::Exponential { rate } => {
                if !rate.is_finite() || *rate <= 0.0 {
                    return Err(config_err!("exponential rate must be finite and > 0, got {rate}"));
                }
            }
            DistKind::Categorical { weights } => {
                if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(config_err!("categorical weights must be nonnegative and finite"));
                }
                if weights.iter().sum::<f64>() <= 0.0 {
                    return Err(config_err!("categorical weights must have a positive sum"));
                }
            }
        }
        Ok(())
    }
}

/// Draws `spec.dim` i.i.d. values. Categorical draws are returned as indices
/// cast to `f64`.
pub fn sample(spec: &DistSpec, rng: &mut Rng) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.dim;
    let out = match &spec.kind {
        DistKind::Gaussian { mean, std } => {
            if *std == 0.0 {
                vec![*mean; n]
            } else {
                let d = Normal::new(*mean, *std).map_err(|e| config_err!("gaussian: {e}"))?;
                (0..n).map(|_| d.sample(rng.engine())).collect()
            }
        }
        DistKind::UniformSymmetric { half_width } => {
            if *half_width == 0.0 {
                vec![0.0; n]
            } else {
                let a = *half_width;
                (0..n).map(|_| (2.0 * rng.uniform01() - 1.0) * a).collect()
            }
        }
        DistKind::Exponential { rate } => {
            let d = Exp::new(*rate).map_err(|e| config_err!("exponential: {e}"))?;
            (0..n).map(|_| d.sample(rng.engine())).collect()
        }
        DistKind::Categorical { weights } => {
            let d = WeightedIndex::new(weights).map_err(|e| config_err!("categorical: {e}"))?;
            (0..n).map(|_| d.sample(rng.engine()) as f64).collect()
        }
    };
    Ok(out)
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(model_err!(
                "matrix data has {} entries, expected {}x{}",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(model_err!("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    /// Columns `start..end` as a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Rows listed in `idx`, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        norm_sq(&self.data)
    }

    /// Largest singular value by power iteration on `W^T W`.
    pub fn spectral_norm(&self, max_iter: usize, tol: f64) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (self.cols as f64).sqrt(); self.cols];
        let mut sigma = 0.0;
        for _ in 0..max_iter {
            let wv = self.matvec(&v);
            let mut next = self.matvec_t(&wv);
            let n = norm(&next);
            if n == 0.0 {
                return 0.0;
            }
            next.iter_mut().for_each(|x| *x /= n);
            let est = norm(&self.matvec(&next));
            v = next;
            let done = (est - sigma).abs() <= tol * est.max(1.0);
            sigma = est;
            if done {
                break;
            }
        }
        sigma
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_gaussian_and_uniform() {
        let mut rng = Rng::from_seed(1);
        assert_eq!(sample(&DistSpec::gaussian(0.0, 0.0, 3), &mut rng).unwrap(), vec![0.0; 3]);
        assert_eq!(sample(&DistSpec::uniform_symmetric(0.0, 2), &mut rng).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn standard_gaussian_moments() {
        let mut rng = Rng::from_seed(2024);
        let xs = sample(&DistSpec::gaussian(0.0, 1.0, 100_000), &mut rng).unwrap();
        assert!(mean(&xs).abs() < 0.02);
        assert!((variance(&xs) - 1.0).abs() < 0.05);
    }

    #[test]
    fn uniform_with_sqrt3_half_width_has_unit_scaled_variance() {
        let c = 0.7;
        let mut rng = Rng::from_seed(11);
        let xs = sample(&DistSpec::uniform_symmetric(3f64.sqrt() * c, 1_000_000), &mut rng).unwrap();
        assert!((variance(&xs) / (c * c) - 1.0).abs() < 0.02);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut rng = Rng::from_seed(0);
        assert!(sample(&DistSpec::gaussian(0.0, -1.0, 1), &mut rng).is_err());
        assert!(sample(&DistSpec::uniform_symmetric(-0.1, 1), &mut rng).is_err());
        assert!(sample(&DistSpec::exponential(0.0, 1), &mut rng).is_err());
        assert!(sample(&DistSpec::categorical(vec![0.0, 0.0], 1), &mut rng).is_err());
        assert!(sample(&DistSpec::categorical(vec![1.0, -1.0], 1), &mut rng).is_err());
        assert!(sample(&DistSpec::gaussian(0.0, 1.0, 0), &mut rng).is_err());
    }

    #[test]
    fn fork_is_deterministic_and_siblings_differ() {
        let parent = Rng::from_seed(7);
        let mut a = fork_rng(&parent, 0);
        let mut b = fork_rng(&parent, 0);
        let mut c = fork_rng(&parent, 1);
        let xa: Vec<f64> = (0..100).map(|_| a.uniform01()).collect();
        let xb: Vec<f64> = (0..100).map(|_| b.uniform01()).collect();
        let xc: Vec<f64> = (0..100).map(|_| c.uniform01()).collect();
        assert_eq!(xa, xb);
        assert!(xa.iter().zip(&xc).all(|(x, y)| x != y));
    }

    #[test]
    fn fork_ignores_parent_position() {
        let mut parent = Rng::from_seed(7);
        let before = fork_rng(&parent, 3).uniform01();
        for _ in 0..10 {
            parent.uniform01();
        }
        assert_eq!(before, fork_rng(&parent, 3).uniform01());
    }

    #[test]
    fn fork_replays_frozen_values() {
        // Captured from a previous run; guards against generator changes.
        let mut child = fork_rng(&Rng::from_seed(7), 3);
        let draws: Vec<f64> = (0..3).map(|_| child.standard_normal()).collect();
        let again: Vec<f64> = {
            let mut c = fork_rng(&Rng::from_seed(7), 3);
            (0..3).map(|_| c.standard_normal()).collect()
        };
        assert_eq!(draws, again);
        assert_eq!(draws, vec![-0.45109946340797324, -1.2318515208156582, -1.6625378941205162]);
    }

    #[test]
    fn exponential_mean() {
        let mut rng = Rng::from_seed(5);
        let xs = sample(&DistSpec::exponential(2.0, 100_000), &mut rng).unwrap();
        assert!((mean(&xs) - 0.5).abs() < 0.01);
    }

    #[test]
    fn categorical_respects_weights() {
        let mut rng = Rng::from_seed(9);
        let xs = sample(&DistSpec::categorical(vec![1.0, 0.0, 3.0], 40_000), &mut rng).unwrap();
        assert!(xs.iter().all(|&x| x == 0.0 || x == 2.0));
        let share = xs.iter().filter(|&&x| x == 2.0).count() as f64 / xs.len() as f64;
        assert!((share - 0.75).abs() < 0.01);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0], vec![0.0, 0.0]]).unwrap();
        assert!((m.spectral_norm(200, 1e-12) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn matvec_and_transpose() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![3.0, 7.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![4.0, 6.0]);
        assert_eq!(m.column_block(1, 2).as_slice(), &[2.0, 4.0]);
    }
}
