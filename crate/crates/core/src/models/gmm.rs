use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_dim, velocity_from_posterior_mean, PosteriorMean, VelocityField};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian mixture with isotropic components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let spec = Self {
            weights,
            means,
            variances,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A single Gaussian `N(mean, variance I)`.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::Config(
                "mixture needs matching, non-empty weights, means and variances".into(),
            ));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if self.variances.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("mixture variances must be nonnegative".into()));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Overall mean `Σ π_k μ_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (a, b) in m.iter_mut().zip(mu) {
                *a += w * b;
            }
        }
        m
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.variances[k].sqrt();
        self.means[k]
            .iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(rng);
                m + sd * e
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend(self.sample_one(rng));
        }
        Tensor::from_raw(vec![n, d], data)
    }

    /// Posterior mean of `x` given `y = a x + b ε`, `ε ~ N(0, I)`.
    ///
    /// Each component contributes responsibility
    /// `∝ π_k N(y; a μ_k, (a² σ_k² + b²) I)` and conditional mean
    /// `μ_k + a σ_k² / (a² σ_k² + b²) (y - a μ_k)`.
    pub(crate) fn kernel_posterior_mean(&self, y: &Tensor, scale: f64, noise_sd: f64) -> Result<Tensor> {
        check_dim(y, self.dim())?;
        let d = self.dim();
        let k = self.components();
        let b2 = noise_sd * noise_sd;
        let total_var: Vec<f64> = self
            .variances
            .iter()
            .map(|&v| scale * scale * v + b2)
            .collect();
        if total_var.iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("degenerate posterior: zero predictive variance".into()));
        }
        let log_norm: Vec<f64> = self
            .weights
            .iter()
            .zip(&total_var)
            .map(|(&w, &s)| w.ln() - 0.5 * d as f64 * s.ln())
            .collect();

        let mut out = Vec::with_capacity(y.len());
        let mut logits = vec![0.0; k];
        for row in y.row_iter() {
            for c in 0..k {
                let sq: f64 = row
                    .iter()
                    .zip(&self.means[c])
                    .map(|(&yv, &m)| (yv - scale * m).powi(2))
                    .sum();
                logits[c] = log_norm[c] - 0.5 * sq / total_var[c];
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let resp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = resp.iter().sum();
            let mut m = vec![0.0; d];
            for c in 0..k {
                let w = resp[c] / z;
                if w == 0.0 {
                    continue;
                }
                let gain = scale * self.variances[c] / total_var[c];
                for (j, mv) in m.iter_mut().enumerate() {
                    let mu = self.means[c][j];
                    *mv += w * (mu + gain * (row[j] - scale * mu));
                }
            }
            out.extend(m);
        }
        Ok(Tensor::from_raw(y.shape().to_vec(), out))
    }
}

/// `E[x | x_t]` under the rectified-flow kernel `x_t ~ N((1-t) x, t² I)`.
pub fn gmm_posterior_mean(spec: &GmmSpec, x_t: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!(
            "posterior mean needs t in (0, 1], got {t}"
        )));
    }
    spec.kernel_posterior_mean(x_t, 1.0 - t, t)
}

/// `(z_t - E[x | x_t = z_t]) / t`.
pub fn analytic_velocity(spec: &GmmSpec, z_t: &Tensor, t: f64) -> Result<Tensor> {
    let x_hat = gmm_posterior_mean(spec, z_t, t)?;
    velocity_from_posterior_mean(z_t, &x_hat, t)
}

impl PosteriorMean for GmmSpec {
    fn posterior_mean(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        gmm_posterior_mean(self, x_t, t)
    }
}

impl VelocityField for GmmSpec {
    fn dim(&self) -> usize {
        GmmSpec::dim(self)
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        analytic_velocity(self, z, t)
    }

    fn posterior_mean(&self, z: &Tensor, t: f64) -> Option<Result<Tensor>> {
        Some(gmm_posterior_mean(self, z, t))
    }
}
