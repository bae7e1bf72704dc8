//! Gaussian-process regression over joint (context, arm) feature vectors.
//!
//! The model keeps a sliding window of observations and a lower-triangular
//! Cholesky factor of `K + (noise_variance + jitter) I`. Appending an
//! observation extends the factor by one row and evicting the oldest one is a
//! rank-one update of the trailing block, so both are `O(n^2)`.
//!
//! Targets are optionally standardized with the window mean and population
//! standard deviation; posteriors are always reported in natural units.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;
pub const DEFAULT_WINDOW: usize = 512;

/// Standard deviations below this are treated as zero when standardizing.
const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),

    #[error("gram matrix is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
}

/// Squared-exponential kernel hyperparameters with one length scale per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub length_scale: Vec<f64>,
    pub noise_variance: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

impl KernelParams {
    pub fn new(
        signal_variance: f64,
        length_scale: Vec<f64>,
        noise_variance: f64,
    ) -> Result<Self, GpError> {
        let params = Self {
            signal_variance,
            length_scale,
            noise_variance,
            jitter: DEFAULT_JITTER,
        };
        params.validate()?;
        Ok(params)
    }

    /// Isotropic parameters: the same length scale in every dimension.
    pub fn isotropic(
        dim: usize,
        signal_variance: f64,
        length_scale: f64,
        noise_variance: f64,
    ) -> Result<Self, GpError> {
        Self::new(signal_variance, vec![length_scale; dim], noise_variance)
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn dim(&self) -> usize {
        self.length_scale.len()
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if self.length_scale.is_empty() {
            return Err(GpError::InvalidParams("length_scale is empty".into()));
        }
        if let Some((d, l)) = self
            .length_scale
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite() && **l > 0.0))
        {
            return Err(GpError::InvalidParams(format!(
                "length_scale[{d}] = {l} must be positive"
            )));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance >= 0.0) {
            return Err(GpError::InvalidParams(format!(
                "signal_variance = {} must be nonnegative",
                self.signal_variance
            )));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(GpError::InvalidParams(format!(
                "noise_variance = {} must be nonnegative",
                self.noise_variance
            )));
        }
        if !(self.jitter.is_finite() && self.jitter > 0.0) {
            return Err(GpError::InvalidParams(format!(
                "jitter = {} must be positive",
                self.jitter
            )));
        }
        Ok(())
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), GpError> {
        if v.len() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                actual: v.len(),
            });
        }
        Ok(())
    }

    #[inline]
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut sq = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.length_scale) {
            let z = (x - y) / l;
            sq += z * z;
        }
        self.signal_variance * (-0.5 * sq).exp()
    }
}

/// `signal_variance * exp(-0.5 * sum_d ((a_d - b_d) / l_d)^2)`.
pub fn kernel(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64, GpError> {
    params.check_dim(a)?;
    params.check_dim(b)?;
    Ok(params.eval(a, b))
}

/// How targets are transformed before fitting the zero-mean GP.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardize {
    /// Fit raw targets.
    None,
    /// Subtract the window mean and divide by the window standard deviation.
    #[default]
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub stddev: f64,
}

impl Posterior {
    pub fn lower(&self, beta: f64) -> f64 {
        self.mean - beta * self.stddev
    }

    pub fn upper(&self, beta: f64) -> f64 {
        self.mean + beta * self.stddev
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lower-triangular factor packed row by row: row `i` holds `i + 1` entries
/// starting at `i * (i + 1) / 2`.
#[derive(Debug, Clone, Default)]
struct LowerFactor {
    n: usize,
    data: Vec<f64>,
}

fn row_start(i: usize) -> usize {
    i * (i + 1) / 2
}

impl LowerFactor {
    fn row(&self, i: usize) -> &[f64] {
        let s = row_start(i);
        &self.data[s..s + i + 1]
    }

    /// Solves `L x = b` in place.
    fn solve_lower(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let row = self.row(i);
            b[i] = (b[i] - dot(&row[..i], &b[..i])) / row[i];
        }
    }

    /// Forward-solves several right-hand sides in one pass over the rows.
    fn solve_lower_many(&self, bs: &mut [Vec<f64>]) {
        for i in 0..self.n {
            let row = self.row(i);
            let (head, lii) = (&row[..i], row[i]);
            for b in bs.iter_mut() {
                b[i] = (b[i] - dot(head, &b[..i])) / lii;
            }
        }
    }

    /// Extends the factor with a new last row given the covariances against the
    /// existing points and the regularized self-covariance. Leaves the factor
    /// untouched and returns `false` when the new pivot is not positive.
    fn try_append(&mut self, mut cross: Vec<f64>, self_cov: f64) -> bool {
        self.solve_lower(&mut cross);
        let pivot = self_cov - dot(&cross, &cross);
        if !(pivot > 0.0 && pivot.is_finite()) {
            return false;
        }
        self.data.extend_from_slice(&cross);
        self.data.push(pivot.sqrt());
        self.n += 1;
        true
    }

    /// Drops the first point. With `K = [[a, b^T], [b, C]]` and
    /// `L = [[l11, 0], [l21, L22]]`, the remaining block satisfies
    /// `C = L22 L22^T + l21 l21^T`, a rank-one update of `L22`, applied here
    /// row by row with Givens rotations.
    /// Drops the first observation and returns the Givens rotations
    /// `(cos, sin)` that restored triangularity, so vectors of the form
    /// `L^-1 b` can follow along via [`rotate_solved`].
    fn remove_first(&mut self) -> Vec<(f64, f64)> {
        if self.n == 0 {
            return Vec::new();
        }
        let m = self.n - 1;
        let mut x = Vec::with_capacity(m);
        let mut write = 0;
        for i in 1..self.n {
            let s = row_start(i);
            x.push(self.data[s]);
            self.data.copy_within(s + 1..s + i + 1, write);
            write += i;
        }
        self.data.truncate(write);
        self.n = m;

        // Rotation k: c = hypot(l_kk, x_k) / l_kk, s = x_k / l_kk, c^2 - s^2 = 1.
        let mut inv_c = vec![0.0; m];
        let mut s_over_c = vec![0.0; m];
        let mut sin = vec![0.0; m];
        for (i, mut xi) in x.into_iter().enumerate() {
            let start = row_start(i);
            let row = &mut self.data[start..start + i + 1];
            for k in 0..i {
                let l = row[k];
                row[k] = (l + sin[k] * xi) * inv_c[k];
                xi = xi * inv_c[k] - s_over_c[k] * l;
            }
            let lii = row[i];
            let r = lii.hypot(xi);
            let c = r / lii;
            sin[i] = xi / lii;
            inv_c[i] = 1.0 / c;
            s_over_c[i] = sin[i] / c;
            row[i] = r;
        }
        inv_c.into_iter().zip(s_over_c).collect()
    }

    /// Full factorization of a dense symmetric matrix given entry by entry.
    /// Extends `z = L^-1 b` after a row was appended for the new entry `b_new`.
    fn extend_solved(&self, z: &mut Vec<f64>, b_new: f64) {
        let last = self.n - 1;
        let row = self.row(last);
        z.push((b_new - dot(&row[..last], z)) / row[last]);
    }

    fn factorize(n: usize, entry: impl Fn(usize, usize) -> f64) -> Option<Self> {
        let mut f = Self {
            n: 0,
            data: Vec::with_capacity(row_start(n)),
        };
        for i in 0..n {
            let start = f.data.len();
            for j in 0..=i {
                let (done, row) = f.data.split_at(start);
                let value = if i == j {
                    entry(i, i) - dot(row, row)
                } else {
                    let rj = &done[row_start(j)..row_start(j) + j + 1];
                    (entry(i, j) - dot(&row[..j], &rj[..j])) / rj[j]
                };
                if i == j {
                    if !(value > 0.0 && value.is_finite()) {
                        return None;
                    }
                    f.data.push(value.sqrt());
                } else {
                    f.data.push(value);
                }
            }
            f.n += 1;
        }
        Some(f)
    }
}

/// Carries `z = L^-1 b` across [`LowerFactor::remove_first`].
fn rotate_solved(z: &mut Vec<f64>, rotations: &[(f64, f64)]) {
    if z.is_empty() {
        return;
    }
    let mut t = z.remove(0);
    for (w, &(c, s)) in z.iter_mut().zip(rotations) {
        let wk = *w;
        *w = c * wk + s * t;
        t = c * t - s * wk;
    }
}

/// Zero-mean GP posterior over a sliding window of observations.
#[derive(Debug, Clone)]
pub struct GpModel {
    params: KernelParams,
    standardize: Standardize,
    max_observations: usize,
    inputs: VecDeque<Vec<f64>>,
    targets: VecDeque<f64>,
    factor: LowerFactor,
    jitter: f64,
    // L^-1 y and L^-1 1, kept in step with the factor.
    solved_targets: Vec<f64>,
    solved_ones: Vec<f64>,
    // Posterior mean = offset + scale * (L^-1 k*) . weights
    weights: Vec<f64>,
    offset: f64,
    scale: f64,
}

impl GpModel {
    pub fn new(
        params: KernelParams,
        max_observations: usize,
        standardize: Standardize,
    ) -> Result<Self, GpError> {
        params.validate()?;
        if max_observations == 0 {
            return Err(GpError::InvalidParams(
                "max_observations must be positive".into(),
            ));
        }
        let jitter = params.jitter;
        Ok(Self {
            params,
            standardize,
            max_observations,
            inputs: VecDeque::new(),
            targets: VecDeque::new(),
            factor: LowerFactor::default(),
            jitter,
            solved_targets: Vec::new(),
            solved_ones: Vec::new(),
            weights: Vec::new(),
            offset: 0.0,
            scale: 1.0,
        })
    }

    /// Builds a model from a batch, keeping only the newest `max_observations`.
    pub fn from_observations<'a>(
        params: KernelParams,
        max_observations: usize,
        standardize: Standardize,
        data: impl IntoIterator<Item = (&'a [f64], f64)>,
    ) -> Result<Self, GpError> {
        let mut model = Self::new(params, max_observations, standardize)?;
        for (x, y) in data {
            model.check_observation(x, y)?;
            if model.inputs.len() == model.max_observations {
                model.inputs.pop_front();
                model.targets.pop_front();
            }
            model.inputs.push_back(x.to_vec());
            model.targets.push_back(y);
        }
        model.refactor()?;
        model.refresh_targets();
        Ok(model)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn max_observations(&self) -> usize {
        self.max_observations
    }

    pub fn standardize(&self) -> Standardize {
        self.standardize
    }

    /// Jitter currently added to the Gram diagonal; grows on factorization failure.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn observations(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.inputs
            .iter()
            .map(Vec::as_slice)
            .zip(self.targets.iter().copied())
    }

    fn check_observation(&self, x: &[f64], y: f64) -> Result<(), GpError> {
        self.params.check_dim(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite("feature"));
        }
        if !y.is_finite() {
            return Err(GpError::NonFinite("target"));
        }
        Ok(())
    }

    fn diag_reg(&self) -> f64 {
        self.params.noise_variance + self.jitter
    }

    /// Appends an observation, evicting the oldest one when the window is full.
    /// On error the model is left unchanged.
    pub fn observe(&mut self, feature: &[f64], target: f64) -> Result<(), GpError> {
        self.check_observation(feature, target)?;

        let saved = (self.solved_targets.clone(), self.solved_ones.clone());
        let evicted = if self.inputs.len() == self.max_observations {
            let rotations = self.factor.remove_first();
            rotate_solved(&mut self.solved_targets, &rotations);
            rotate_solved(&mut self.solved_ones, &rotations);
            Some((
                self.inputs.pop_front().unwrap(),
                self.targets.pop_front().unwrap(),
            ))
        } else {
            None
        };

        let cross: Vec<f64> = self
            .inputs
            .iter()
            .map(|x| self.params.eval(x, feature))
            .collect();
        let self_cov = self.params.eval(feature, feature) + self.diag_reg();
        self.inputs.push_back(feature.to_vec());
        self.targets.push_back(target);

        if self.factor.try_append(cross, self_cov) {
            self.factor.extend_solved(&mut self.solved_targets, target);
            self.factor.extend_solved(&mut self.solved_ones, 1.0);
        } else {
            let jitter_before = self.jitter;
            if let Err(err) = self.refactor() {
                self.inputs.pop_back();
                self.targets.pop_back();
                if let Some((x, y)) = evicted {
                    self.inputs.push_front(x);
                    self.targets.push_front(y);
                }
                self.jitter = jitter_before;
                self.refactor()
                    .expect("previous window factorized at this jitter");
                (self.solved_targets, self.solved_ones) = saved;
                self.refresh_targets();
                return Err(err);
            }
        }
        self.refresh_targets();
        Ok(())
    }

    /// Recomputes the factor from scratch, doubling the jitter up to
    /// [`MAX_JITTER`] until the regularized Gram matrix factorizes.
    fn refactor(&mut self) -> Result<(), GpError> {
        let n = self.inputs.len();
        loop {
            let reg = self.diag_reg();
            let inputs = &self.inputs;
            let params = &self.params;
            let factor = LowerFactor::factorize(n, |i, j| {
                let k = params.eval(&inputs[i], &inputs[j]);
                if i == j {
                    k + reg
                } else {
                    k
                }
            });
            if let Some(factor) = factor {
                self.factor = factor;
                self.solved_targets = self.targets.iter().copied().collect();
                self.factor.solve_lower(&mut self.solved_targets);
                self.solved_ones = vec![1.0; n];
                self.factor.solve_lower(&mut self.solved_ones);
                return Ok(());
            }
            if self.jitter >= MAX_JITTER {
                return Err(GpError::NotPositiveDefinite {
                    jitter: self.jitter,
                });
            }
            self.jitter = (self.jitter * 2.0).min(MAX_JITTER);
        }
    }

    fn refresh_targets(&mut self) {
        let n = self.targets.len();
        (self.offset, self.scale) = match self.standardize {
            Standardize::Window if n > 0 => {
                let mean = self.targets.iter().sum::<f64>() / n as f64;
                let var = self.targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
                let sd = var.sqrt();
                (mean, if sd > MIN_SCALE { sd } else { 1.0 })
            }
            _ => (0.0, 1.0),
        };
        let (offset, scale) = (self.offset, self.scale);
        self.weights = self
            .solved_targets
            .iter()
            .zip(&self.solved_ones)
            .map(|(z, o)| (z - offset * o) / scale)
            .collect();
    }

    /// Posterior mean and standard deviation of the latent function at `query`.
    pub fn posterior(&self, query: &[f64]) -> Result<Posterior, GpError> {
        self.params.check_dim(query)?;
        if self.inputs.is_empty() {
            return Ok(self.prior());
        }
        let mut v: Vec<f64> = self
            .inputs
            .iter()
            .map(|x| self.params.eval(x, query))
            .collect();
        self.factor.solve_lower(&mut v);
        Ok(self.finish(&v))
    }

    /// Same as calling [`GpModel::posterior`] on each query, sharing one pass
    /// over the factor.
    pub fn posteriors(&self, queries: &[&[f64]]) -> Result<Vec<Posterior>, GpError> {
        for q in queries {
            self.params.check_dim(q)?;
        }
        if self.inputs.is_empty() {
            return Ok(vec![self.prior(); queries.len()]);
        }
        let mut vs: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| self.inputs.iter().map(|x| self.params.eval(x, q)).collect())
            .collect();
        self.factor.solve_lower_many(&mut vs);
        Ok(vs.iter().map(|v| self.finish(v)).collect())
    }

    /// What [`GpModel::posterior`] returns far from every observation.
    pub fn prior(&self) -> Posterior {
        Posterior {
            mean: self.offset,
            stddev: self.scale * self.params.signal_variance.sqrt(),
        }
    }

    fn finish(&self, solved_cross: &[f64]) -> Posterior {
        let mean_std = dot(solved_cross, &self.weights);
        let var_std = (self.params.signal_variance - dot(solved_cross, solved_cross)).max(0.0);
        Posterior {
            mean: self.offset + self.scale * mean_std,
            stddev: self.scale * var_std.sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    fn iso(dim: usize, sf2: f64, l: f64, sn2: f64) -> KernelParams {
        KernelParams::isotropic(dim, sf2, l, sn2).unwrap()
    }

    #[test]
    fn kernel_closed_forms() {
        let p = iso(1, 1.0, 0.7, 0.0);
        assert_eq!(kernel(&[0.3], &[0.3], &p).unwrap(), 1.0);
        let k = kernel(&[0.0], &[0.7], &p).unwrap();
        assert!(close(k, (-0.5f64).exp(), 1e-15));
        let p2 = iso(2, 2.0, 1.0, 0.0);
        let k = kernel(&[0.0, 0.0], &[3.0, 4.0], &p2).unwrap();
        assert!(close(k, 2.0 * (-12.5f64).exp(), 1e-18));
    }

    #[test]
    fn kernel_rejects_dimension_mismatch() {
        let p = iso(2, 1.0, 1.0, 0.0);
        assert_eq!(
            kernel(&[0.0], &[0.0, 1.0], &p),
            Err(GpError::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        );
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(1.0, vec![1.0, -0.1], 0.0).is_err());
        assert!(KernelParams::new(-1.0, vec![1.0], 0.0).is_err());
        assert!(KernelParams::new(1.0, vec![1.0], -0.01).is_err());
        assert!(iso(1, 1.0, 1.0, 0.0).with_jitter(0.0).validate().is_err());
    }

    #[test]
    fn empty_model_returns_prior() {
        let gp = GpModel::new(iso(3, 4.0, 1.0, 0.1), 8, Standardize::Window).unwrap();
        let post = gp.posterior(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(post.mean, 0.0);
        assert_eq!(post.stddev, 2.0);
    }

    #[test]
    fn single_noise_free_observation_interpolates() {
        for mode in [Standardize::None, Standardize::Window] {
            let mut gp = GpModel::new(iso(2, 1.0, 1.0, 0.0), 8, mode).unwrap();
            gp.observe(&[0.5, -0.5], 1.7).unwrap();
            let post = gp.posterior(&[0.5, -0.5]).unwrap();
            assert!(close(post.mean, 1.7, 1e-6), "{mode:?}: {post:?}");
            assert!(post.stddev < 1e-3, "{mode:?}: {post:?}");
        }
    }

    #[test]
    fn window_keeps_newest() {
        let mut gp = GpModel::new(iso(1, 1.0, 1.0, 0.01), 2, Standardize::None).unwrap();
        for (x, y) in [(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)] {
            gp.observe(&[x], y).unwrap();
        }
        let kept: Vec<_> = gp.observations().map(|(x, y)| (x[0], y)).collect();
        assert_eq!(kept, vec![(1.0, 2.0), (2.0, 3.0)]);
    }

    #[test]
    fn non_finite_inputs_rejected_without_mutation() {
        let mut gp = GpModel::new(iso(1, 1.0, 1.0, 0.01), 4, Standardize::Window).unwrap();
        gp.observe(&[0.0], 1.0).unwrap();
        assert_eq!(
            gp.observe(&[1.0], f64::NAN),
            Err(GpError::NonFinite("target"))
        );
        assert_eq!(
            gp.observe(&[f64::INFINITY], 0.0),
            Err(GpError::NonFinite("feature"))
        );
        assert_eq!(gp.len(), 1);
    }

    #[test]
    fn duplicate_noise_free_points_escalate_jitter() {
        // At this signal variance a 1e-8 jitter is below f64 resolution.
        let mut gp = GpModel::new(iso(1, 1e9, 1.0, 0.0), 16, Standardize::None).unwrap();
        for _ in 0..4 {
            gp.observe(&[0.25], 0.5).unwrap();
        }
        assert!(gp.jitter() > DEFAULT_JITTER);
        assert!(gp.jitter() <= MAX_JITTER);
        let post = gp.posterior(&[0.25]).unwrap();
        assert!(close(post.mean, 0.5, 1e-3));
    }

    #[test]
    fn failed_refactor_leaves_model_unchanged() {
        // A signal variance this large swallows even the maximum jitter, so an
        // exact duplicate with zero noise can never factorize.
        let params = iso(1, 1e16, 1.0, 0.0);
        let mut gp = GpModel::new(params, 2, Standardize::Window).unwrap();
        gp.observe(&[0.0], 1.0).unwrap();
        gp.observe(&[5.0], 3.0).unwrap();
        let before: Vec<_> = gp.observations().map(|(x, y)| (x.to_vec(), y)).collect();
        let q = gp.posterior(&[2.0]).unwrap();
        let err = gp.observe(&[5.0], 3.0).unwrap_err();
        assert!(matches!(err, GpError::NotPositiveDefinite { .. }));
        let after: Vec<_> = gp.observations().map(|(x, y)| (x.to_vec(), y)).collect();
        assert_eq!(after, before);
        assert_eq!(gp.jitter(), DEFAULT_JITTER);
        assert_eq!(gp.posterior(&[2.0]).unwrap(), q);
    }

    fn gram_residual(gp: &GpModel) -> f64 {
        let n = gp.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..=i {
                let llt: f64 = (0..=j)
                    .map(|k| gp.factor.row(i)[k] * gp.factor.row(j)[k])
                    .sum();
                let mut k = gp.params.eval(&gp.inputs[i], &gp.inputs[j]);
                if i == j {
                    k += gp.diag_reg();
                }
                worst = worst.max((llt - k).abs());
            }
        }
        worst
    }

    #[test]
    fn factor_tracks_gram_through_evictions() {
        let mut gp = GpModel::new(iso(2, 1.5, 0.8, 0.05), 6, Standardize::Window).unwrap();
        for i in 0..25 {
            let t = i as f64;
            gp.observe(&[(t * 0.37).sin(), (t * 0.11).cos()], t.sqrt())
                .unwrap();
            assert!(gram_residual(&gp) < 1e-10, "step {i}");
        }
        assert_eq!(gp.len(), 6);
    }

    #[test]
    fn long_sliding_window_matches_batch() {
        let params = iso(2, 1.5, 0.6, 0.05);
        let mut inc = GpModel::new(params.clone(), 40, Standardize::Window).unwrap();
        let mut data = Vec::new();
        for i in 0..600 {
            let t = i as f64;
            let x = vec![(t * 0.37).sin(), (t * 0.11).cos()];
            let y = 3.0 + (t * 0.05).sin() * 2.0 + 0.01 * (t * 7.1).cos();
            inc.observe(&x, y).unwrap();
            data.push((x, y));
        }
        let batch = GpModel::from_observations(
            params,
            40,
            Standardize::Window,
            data.iter().map(|(x, y)| (x.as_slice(), *y)),
        )
        .unwrap();
        let qs = [[0.3, -0.2], [0.9, 0.9], [-1.0, 0.0]];
        let refs: Vec<&[f64]> = qs.iter().map(|q| q.as_slice()).collect();
        let many = inc.posteriors(&refs).unwrap();
        for (q, m) in qs.iter().zip(&many) {
            let a = inc.posterior(q).unwrap();
            let b = batch.posterior(q).unwrap();
            assert!(close(a.mean, b.mean, 1e-9), "{a:?} vs {b:?}");
            assert!(close(a.stddev, b.stddev, 1e-9), "{a:?} vs {b:?}");
            assert_eq!(a, *m);
        }
    }

    #[test]
    fn incremental_matches_batch() {
        let params = iso(3, 1.0, 0.9, 0.02);
        let mut inc = GpModel::new(params.clone(), 7, Standardize::Window).unwrap();
        let mut data = Vec::new();
        for i in 0..20 {
            let t = i as f64;
            let x = vec![(t * 0.7).sin(), (t * 1.3).cos(), t / 20.0];
            let y = (t * 0.4).sin() + 0.1 * t;
            inc.observe(&x, y).unwrap();
            // posterior queries interleaved must not disturb the state
            inc.posterior(&[0.0, 0.0, 0.5]).unwrap();
            data.push((x, y));
        }
        let batch = GpModel::from_observations(
            params,
            7,
            Standardize::Window,
            data.iter().map(|(x, y)| (x.as_slice(), *y)),
        )
        .unwrap();
        for q in [[0.1, 0.2, 0.3], [-0.5, 0.9, 0.8], [0.0, -1.0, 0.95]] {
            let a = inc.posterior(&q).unwrap();
            let b = batch.posterior(&q).unwrap();
            assert!(close(a.mean, b.mean, 1e-9), "{a:?} vs {b:?}");
            assert!(close(a.stddev, b.stddev, 1e-9), "{a:?} vs {b:?}");
        }
    }
}
