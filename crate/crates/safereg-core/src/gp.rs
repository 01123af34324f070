//! Bayesian effect learning on top of the observational prior.
//!
//! The prior mean and the kernel amplitude both come from an [`EffectModel`]:
//! the covariance between two control points is the product of their prior
//! standard deviations times a squared-exponential correlation in normalized
//! control coordinates. Points the passive data pinned down precisely (small
//! sigma) therefore move little under new evidence, while unsupported points
//! (sigma at the ceiling) stay maximally adaptable.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;
use thiserror::Error;

use crate::grid::GridError;
use crate::prior::EffectModel;

/// Baseline diagonal term added before every factorization attempt; the
/// posterior contract includes it, so an independent solver must add it too.
pub const BASE_JITTER: f64 = 1e-10;
/// Largest diagonal inflation tried before giving up on a factorization.
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),
    #[error("lengthscale must be positive and finite, got {0}")]
    InvalidLengthscale(f64),
    #[error("noise standard deviation must be positive and finite, got {0}")]
    InvalidNoise(f64),
    #[error("observation noise must be finite and non-negative, got {0}")]
    InvalidObservationNoise(f64),
    #[error("point has {got} coordinates, grid has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance factorization failed even with diagonal inflation {MAX_JITTER}")]
    SingularFactorization,
    #[error("matrix is not positive semi-definite (eigenvalue {eigenvalue})")]
    NotPSD { eigenvalue: f64 },
    #[error("matrix is not square ({rows} rows, row {row} has {len} entries)")]
    NotSquare { rows: usize, row: usize, len: usize },
    #[error("step index must be at least 1, got {0}")]
    InvalidStep(u64),
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Covariance function scaled by the prior uncertainty:
/// `k(a, b) = sigma(a) * sigma(b) * exp(-||a - b||^2 / (2 l^2))`
/// with distances measured after normalizing each control axis to `[0, 1]`.
#[derive(Debug, Clone, Serialize)]
pub struct PriorScaledKernel {
    prior: EffectModel,
    lengthscale: f64,
}

impl PriorScaledKernel {
    pub fn new(prior: EffectModel, lengthscale: f64) -> Result<Self, GpError> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(GpError::InvalidLengthscale(lengthscale));
        }
        Ok(PriorScaledKernel { prior, lengthscale })
    }

    pub fn prior(&self) -> &EffectModel {
        &self.prior
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    fn check_dims(&self, point: &[f64]) -> Result<(), GpError> {
        let expected = self.prior.grid.dims();
        if point.len() != expected {
            return Err(GpError::DimensionMismatch {
                expected,
                got: point.len(),
            });
        }
        Ok(())
    }

    fn correlation(&self, a_norm: &[f64], b_norm: &[f64]) -> f64 {
        let d2: f64 = a_norm
            .iter()
            .zip(b_norm)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64, GpError> {
        self.check_dims(a)?;
        self.check_dims(b)?;
        let an = self.prior.grid.normalize(a)?;
        let bn = self.prior.grid.normalize(b)?;
        Ok(self.prior.sigma_at(a)? * self.prior.sigma_at(b)? * self.correlation(&an, &bn))
    }
}

/// One noisy measurement of the effect at a control point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub point: Vec<f64>,
    pub value: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone)]
struct Factorization {
    chol: Cholesky<f64, Dyn>,
    /// `(K + noise^2 I + jitter I)^{-1} (y - m0(X))`.
    alpha: DVector<f64>,
    norm_points: Vec<Vec<f64>>,
    sigmas: Vec<f64>,
}

/// Gaussian-process posterior over the effect surface. Updating returns a
/// new process; existing handles keep answering from their own snapshot.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    kernel: PriorScaledKernel,
    observations: Vec<Observation>,
    factorization: Option<Factorization>,
}

impl GaussianProcess {
    pub fn from_prior(prior: EffectModel, lengthscale: f64) -> Result<Self, GpError> {
        Ok(GaussianProcess {
            kernel: PriorScaledKernel::new(prior, lengthscale)?,
            observations: Vec::new(),
            factorization: None,
        })
    }

    pub fn with_observations(
        prior: EffectModel,
        lengthscale: f64,
        observations: Vec<Observation>,
    ) -> Result<Self, GpError> {
        let kernel = PriorScaledKernel::new(prior, lengthscale)?;
        for obs in &observations {
            validate_observation(&kernel, obs)?;
        }
        let factorization = factorize(&kernel, &observations)?;
        Ok(GaussianProcess {
            kernel,
            observations,
            factorization,
        })
    }

    pub fn kernel(&self) -> &PriorScaledKernel {
        &self.kernel
    }

    pub fn prior(&self) -> &EffectModel {
        self.kernel.prior()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// New process incorporating one more observation. `self` is unchanged.
    pub fn update(&self, point: &[f64], value: f64, noise_std: f64) -> Result<Self, GpError> {
        let obs = Observation {
            point: point.to_vec(),
            value,
            noise_std,
        };
        validate_observation(&self.kernel, &obs)?;
        let mut observations = self.observations.clone();
        observations.push(obs);
        let factorization = factorize(&self.kernel, &observations)?;
        Ok(GaussianProcess {
            kernel: self.kernel.clone(),
            observations,
            factorization,
        })
    }

    /// Posterior mean and variance at one point. Means are not clamped;
    /// variances are truncated at zero against round-off.
    pub fn posterior_at(&self, point: &[f64]) -> Result<(f64, f64), GpError> {
        self.kernel.check_dims(point)?;
        let prior_mean = self.kernel.prior().mean_at(point)?;
        let sigma = self.kernel.prior().sigma_at(point)?;
        let prior_var = sigma * sigma;
        let Some(f) = &self.factorization else {
            return Ok((prior_mean, prior_var));
        };
        let qn = self.kernel.prior().grid.normalize(point)?;
        let n = f.alpha.len();
        let kstar = DVector::from_fn(n, |i, _| {
            sigma * f.sigmas[i] * self.kernel.correlation(&qn, &f.norm_points[i])
        });
        let mean = prior_mean + kstar.dot(&f.alpha);
        let solved = f.chol.solve(&kstar);
        let var = (prior_var - kstar.dot(&solved)).max(0.0);
        Ok((mean, var))
    }

    /// Vectorized [`posterior_at`].
    pub fn posterior(&self, points: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), GpError> {
        let mut means = Vec::with_capacity(points.len());
        let mut vars = Vec::with_capacity(points.len());
        for p in points {
            let (m, v) = self.posterior_at(p)?;
            means.push(m);
            vars.push(v);
        }
        Ok((means, vars))
    }

    /// Serializable snapshot: kernel hyperparameters plus the raw
    /// observations (the factorization is reconstructible from them).
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "lengthscale": self.kernel.lengthscale,
            "prior": self.kernel.prior.to_json(),
            "observations": self.observations,
        })
    }
}

fn validate_observation(kernel: &PriorScaledKernel, obs: &Observation) -> Result<(), GpError> {
    kernel.check_dims(&obs.point)?;
    if obs.point.iter().any(|v| !v.is_finite()) {
        return Err(GpError::NonFiniteValue("observation point"));
    }
    if !obs.value.is_finite() {
        return Err(GpError::NonFiniteValue("observation value"));
    }
    if !(obs.noise_std >= 0.0 && obs.noise_std.is_finite()) {
        return Err(GpError::InvalidObservationNoise(obs.noise_std));
    }
    Ok(())
}

/// Builds the Cholesky factorization of `K + diag(noise^2) + jitter I`,
/// escalating the jitter tenfold from [`BASE_JITTER`] to [`MAX_JITTER`] if
/// the matrix is numerically singular (prior sigma can be exactly zero at
/// well-covered points, making `K` rank-deficient).
fn factorize(
    kernel: &PriorScaledKernel,
    observations: &[Observation],
) -> Result<Option<Factorization>, GpError> {
    let n = observations.len();
    if n == 0 {
        return Ok(None);
    }
    let grid = &kernel.prior().grid;
    let mut norm_points = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    let mut residual = DVector::zeros(n);
    for (i, obs) in observations.iter().enumerate() {
        norm_points.push(grid.normalize(&obs.point)?);
        sigmas.push(kernel.prior().sigma_at(&obs.point)?);
        residual[i] = obs.value - kernel.prior().mean_at(&obs.point)?;
    }
    let base = DMatrix::from_fn(n, n, |i, j| {
        let mut k = sigmas[i] * sigmas[j] * kernel.correlation(&norm_points[i], &norm_points[j]);
        if i == j {
            k += observations[i].noise_std * observations[i].noise_std;
        }
        k
    });
    let mut jitter = BASE_JITTER;
    loop {
        let mut attempt = base.clone();
        for i in 0..n {
            attempt[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(attempt) {
            let alpha = chol.solve(&residual);
            return Ok(Some(Factorization {
                chol,
                alpha,
                norm_points,
                sigmas,
            }));
        }
        jitter *= 10.0;
        if jitter > MAX_JITTER * 1.0000001 {
            return Err(GpError::SingularFactorization);
        }
    }
}

/// Mutual information between `n` noisy measurements with covariance `gram`
/// and the underlying function: `0.5 * ln det(I + gram / noise^2)`, computed
/// through the eigenvalues of the symmetrized matrix.
pub fn information_gain(gram: &[Vec<f64>], noise_std: f64) -> Result<f64, GpError> {
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(GpError::InvalidNoise(noise_std));
    }
    let n = gram.len();
    for (row, r) in gram.iter().enumerate() {
        if r.len() != n {
            return Err(GpError::NotSquare {
                rows: n,
                row,
                len: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFiniteValue("gram matrix"));
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (gram[i][j] + gram[j][i]));
    let eigen = m.symmetric_eigenvalues();
    let inv_noise_var = 1.0 / (noise_std * noise_std);
    let mut acc = 0.0;
    for &lambda in eigen.iter() {
        if lambda < -1e-8 {
            return Err(GpError::NotPSD { eigenvalue: lambda });
        }
        acc += (1.0 + lambda.max(0.0) * inv_noise_var).ln();
    }
    Ok(0.5 * acc)
}

/// How the confidence multiplier over the posterior standard deviation is
/// obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ConfidenceMode {
    /// Anytime bound `beta_t = 2 B^2 + 300 gamma ln^3(t / (1 - alpha))` for a
    /// function of RKHS norm at most `bound_b` and information-gain bound
    /// `gamma`; the log term is clamped at zero when `t <= 1 - alpha`.
    Theoretical { bound_b: f64, gamma: f64 },
    /// Fixed multiplier: `beta = beta_sqrt^2`.
    Practical { beta_sqrt: f64 },
}

/// Confidence scaling `beta_t` at step `t >= 1` for a target confidence
/// level `alpha` in `(0, 1)`.
pub fn beta(t: u64, alpha: f64, mode: &ConfidenceMode) -> Result<f64, GpError> {
    if t < 1 {
        return Err(GpError::InvalidStep(t));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GpError::InvalidConfidence(alpha));
    }
    match mode {
        ConfidenceMode::Theoretical { bound_b, gamma } => {
            if !bound_b.is_finite() || !gamma.is_finite() {
                return Err(GpError::NonFiniteValue("confidence parameters"));
            }
            let ratio = t as f64 / (1.0 - alpha);
            let log_cubed = if ratio <= 1.0 {
                0.0
            } else {
                ratio.ln().powi(3)
            };
            Ok(2.0 * bound_b * bound_b + 300.0 * gamma * log_cubed)
        }
        ConfidenceMode::Practical { beta_sqrt } => {
            if !beta_sqrt.is_finite() {
                return Err(GpError::NonFiniteValue("confidence parameters"));
            }
            Ok(beta_sqrt * beta_sqrt)
        }
    }
}

/// Half-width of the confidence interval at a point with posterior variance
/// `variance`: `sqrt(beta) * sqrt(variance)`.
pub fn kappa(beta: f64, variance: f64) -> f64 {
    beta.max(0.0).sqrt() * variance.max(0.0).sqrt()
}
