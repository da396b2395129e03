//! Multivariate Gaussian over stacked pose parameters.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{PoseParams, ALPHA_OFFSET, GAMMA_OFFSET, SIGMA_OFFSET, THETA_OFFSET};
use crate::template::{NUM_BONES, NUM_POSE_PARAMS};

/// Length of the stacked vector `(θ, γ, α)`.
pub const PRIOR_DIM: usize = NUM_POSE_PARAMS + 3 + NUM_BONES;
pub const PRIOR_THETA: std::ops::Range<usize> = 0..NUM_POSE_PARAMS;
pub const PRIOR_GAMMA: std::ops::Range<usize> = NUM_POSE_PARAMS..NUM_POSE_PARAMS + 3;
pub const PRIOR_ALPHA: std::ops::Range<usize> = NUM_POSE_PARAMS + 3..PRIOR_DIM;

/// Sampled entries labelled as bone lengths never go below this.
pub const ALPHA_FLOOR: f64 = 1e-3;

const FORMAT: &str = "avimesh-prior/1";

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("covariance plus regularization is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value in prior")]
    NonFinite,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed prior file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed prior file: {0}")]
    Format(String),
}

/// Gaussian with mean `μ`, sample covariance `Σ` and diagonal regularization `ε`.
/// Every computation uses `Σ + εI`.
#[derive(Debug, Clone)]
pub struct PosePrior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub epsilon: f64,
    pub labels: Vec<String>,
    factor: Cholesky<f64, Dyn>,
}

/// Default labels for the `(θ, γ, α)` layout.
pub fn stacked_labels() -> Vec<String> {
    let mut labels = Vec::with_capacity(PRIOR_DIM);
    for j in 0..NUM_POSE_PARAMS / 3 {
        for axis in ["x", "y", "z"] {
            labels.push(format!("theta[{j}].{axis}"));
        }
    }
    for axis in ["x", "y", "z"] {
        labels.push(format!("gamma.{axis}"));
    }
    for b in 0..NUM_BONES {
        labels.push(format!("alpha[{}]", b + 1));
    }
    labels
}

/// `(θ, γ, α)` of a parameter set.
pub fn stack_params(p: &PoseParams) -> DVector<f64> {
    let mut v = DVector::zeros(PRIOR_DIM);
    v.rows_mut(PRIOR_THETA.start, NUM_POSE_PARAMS).copy_from_slice(&p.joint_rotations);
    v.rows_mut(PRIOR_GAMMA.start, 3).copy_from(&p.translation);
    v.rows_mut(PRIOR_ALPHA.start, NUM_BONES).copy_from_slice(&p.bone_lengths);
    v
}

/// Inverse of [`stack_params`]; `scale` is supplied separately.
pub fn unstack_params(v: &DVector<f64>, scale: f64) -> PoseParams {
    PoseParams {
        joint_rotations: v.rows(PRIOR_THETA.start, NUM_POSE_PARAMS).iter().copied().collect(),
        translation: v.fixed_rows::<3>(PRIOR_GAMMA.start).into_owned(),
        bone_lengths: v.rows(PRIOR_ALPHA.start, NUM_BONES).iter().copied().collect(),
        scale,
    }
}

/// Maps a gradient over the stacked vector onto the flat parameter layout.
pub fn stacked_grad_to_flat(g: &DVector<f64>, out: &mut [f64]) {
    for i in 0..NUM_POSE_PARAMS {
        out[THETA_OFFSET + i] += g[PRIOR_THETA.start + i];
    }
    for i in 0..3 {
        out[GAMMA_OFFSET + i] += g[PRIOR_GAMMA.start + i];
    }
    for i in 0..NUM_BONES {
        out[ALPHA_OFFSET + i] += g[PRIOR_ALPHA.start + i];
    }
    debug_assert_eq!(SIGMA_OFFSET, GAMMA_OFFSET + 3);
}

impl PosePrior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, epsilon: f64, labels: Vec<String>) -> Result<Self, PriorError> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(PriorError::Dimension { expected: d, found: covariance.nrows() });
        }
        if labels.len() != d {
            return Err(PriorError::Dimension { expected: d, found: labels.len() });
        }
        if !mean.iter().chain(covariance.iter()).all(|x| x.is_finite()) || !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(PriorError::NonFinite);
        }
        let regularized = &covariance + DMatrix::identity(d, d) * epsilon;
        let factor = Cholesky::new(regularized).ok_or(PriorError::NotPositiveDefinite)?;
        Ok(Self { mean, covariance, epsilon, labels, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Lower-triangular `L` with `L·Lᵀ = Σ + εI`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    /// Gaussian restricted to a contiguous block of coordinates.
    pub fn marginal(&self, range: std::ops::Range<usize>) -> Result<PosePrior, PriorError> {
        let n = range.len();
        PosePrior::new(
            self.mean.rows(range.start, n).into_owned(),
            self.covariance.view((range.start, range.start), (n, n)).into_owned(),
            self.epsilon,
            self.labels[range].to_vec(),
        )
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<(), PriorError> {
        if x.len() != self.dim() {
            return Err(PriorError::Dimension { expected: self.dim(), found: x.len() });
        }
        Ok(())
    }

    /// Distance and its gradient `(Σ+εI)⁻¹(x−μ)/D`; the gradient is zero at `x = μ`.
    pub fn mahalanobis_with_grad(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>), PriorError> {
        self.check_dim(x)?;
        let r = x - &self.mean;
        let l = self.factor.l_dirty();
        let mut z = r.clone();
        l.solve_lower_triangular_mut(&mut z);
        let d = z.norm();
        if d == 0.0 {
            return Ok((0.0, DVector::zeros(self.dim())));
        }
        let g = self.factor.solve(&r) / d;
        Ok((d, g))
    }

    pub fn to_json(&self) -> String {
        let d = self.dim();
        let file = PriorFile {
            format: FORMAT.to_string(),
            dimension: d,
            labels: self.labels.clone(),
            mean: self.mean.iter().copied().collect(),
            covariance: (0..d).map(|i| self.covariance.row(i).iter().copied().collect()).collect(),
            epsilon: self.epsilon,
        };
        serde_json::to_string_pretty(&file).expect("prior serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PriorError> {
        let file: PriorFile = serde_json::from_str(text)?;
        if file.format != FORMAT {
            return Err(PriorError::Format(format!("unknown format tag {:?}", file.format)));
        }
        let d = file.dimension;
        if file.mean.len() != d || file.covariance.len() != d || file.covariance.iter().any(|r| r.len() != d) {
            return Err(PriorError::Format("array sizes disagree with dimension".into()));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| file.covariance[i][j]);
        PosePrior::new(DVector::from_vec(file.mean), cov, file.epsilon, file.labels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PriorError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PriorError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PriorFile {
    format: String,
    dimension: usize,
    labels: Vec<String>,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    epsilon: f64,
}

/// Default regularization `1e-6·trace(Σ)/D`, floored so a zero covariance still factors.
pub fn default_epsilon(covariance: &DMatrix<f64>) -> f64 {
    (1e-6 * covariance.trace() / covariance.nrows() as f64).max(1e-12)
}

/// Sample mean and unbiased covariance. `epsilon = None` picks [`default_epsilon`].
pub fn fit_gaussian(samples: &[DVector<f64>], epsilon: Option<f64>, labels: Option<Vec<String>>) -> Result<PosePrior, PriorError> {
    let n = samples.len();
    if n < 2 {
        return Err(PriorError::TooFewSamples(n));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(PriorError::Dimension { expected: d, found: bad.len() });
    }
    // shifted by the first sample, so identical samples reproduce it exactly
    let shift = &samples[0];
    let mean = shift + samples.iter().fold(DVector::zeros(d), |acc, s| acc + (s - shift)) / n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let r = s - &mean;
        cov.ger(1.0, &r, &r, 1.0);
    }
    cov /= (n - 1) as f64;
    let eps = epsilon.unwrap_or_else(|| default_epsilon(&cov));
    let labels = labels.unwrap_or_else(|| if d == PRIOR_DIM { stacked_labels() } else { (0..d).map(|i| format!("x[{i}]")).collect() });
    PosePrior::new(mean, cov, eps, labels)
}

pub fn mahalanobis(x: &DVector<f64>, prior: &PosePrior) -> Result<f64, PriorError> {
    Ok(prior.mahalanobis_with_grad(x)?.0)
}

/// `n` draws `μ + L·z`. Coordinates labelled `alpha[..]` are floored at [`ALPHA_FLOOR`].
pub fn sample_prior(prior: &PosePrior, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = prior.factor();
    let d = prior.dim();
    let alpha: Vec<usize> = prior.labels.iter().enumerate().filter(|(_, s)| s.starts_with("alpha")).map(|(i, _)| i).collect();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let mut x = &prior.mean + &l * z;
            for &i in &alpha {
                x[i] = x[i].max(ALPHA_FLOOR);
            }
            x
        })
        .collect()
}
