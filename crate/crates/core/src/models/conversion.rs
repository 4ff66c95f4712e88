//! Posterior-mean conversion from VP/VE diffusion denoisers.
//!
//! A denoiser trained under kernel `N(s'(τ) x, σ'(τ)² I)` yields the
//! rectified-flow posterior mean at time `t` once it is queried at the
//! time `τ` with the same signal-to-noise ratio `(1-t)/t`, on the input
//! rescaled by `s'(τ) / (1-t)`.

use serde::{Deserialize, Serialize};

use super::{check_dim, velocity_from_posterior_mean, GmmSpec, PosteriorMean, VelocityField};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionKind {
    /// Kernel `N(α(τ) x, (1 - α(τ)²) I)` with `τ ∈ (0, 1]`.
    Vp,
    /// Kernel `N(x, τ² I)` with `τ > 0`.
    Ve,
}

const BETA_SLOPE: f64 = 19.9;
const BETA_MIN: f64 = 0.1;

fn log_alpha_vp(t: f64) -> f64 {
    -(BETA_SLOPE / 4.0) * t * t - 0.5 * BETA_MIN * t
}

/// `α(t) = exp(-(19.9/4) t² - 0.05 t)`.
pub fn alpha_vp(t: f64) -> f64 {
    log_alpha_vp(t).exp()
}

/// Positive quadratic-formula root of `α(t) = y`.
pub fn alpha_vp_inverse(y: f64) -> f64 {
    let half_beta_min = 0.5 * BETA_MIN;
    (-half_beta_min + (half_beta_min * half_beta_min - BETA_SLOPE * y.ln()).sqrt())
        / (BETA_SLOPE / 2.0)
}

/// `sqrt(1 - α(t)²)`, computed without cancellation for small `t`.
fn sigma_vp(t: f64) -> f64 {
    (-(2.0 * log_alpha_vp(t)).exp_m1()).sqrt()
}

/// Source-model time and input scale matching rectified-flow time `t`.
///
/// VE: `(t / (1-t), 1 / (1-t))`. VP: `τ = α⁻¹((1-t) / sqrt((1-t)² + t²))`,
/// scale `α(τ) / (1-t)`.
pub fn convert_time_scale(kind: DiffusionKind, t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!(
            "time conversion needs t in (0, 1), got {t}"
        )));
    }
    let one_minus = 1.0 - t;
    Ok(match kind {
        DiffusionKind::Ve => (t / one_minus, 1.0 / one_minus),
        DiffusionKind::Vp => {
            let target_alpha = one_minus / (one_minus * one_minus + t * t).sqrt();
            let t_vp = alpha_vp_inverse(target_alpha);
            (t_vp, alpha_vp(t_vp) / one_minus)
        }
    })
}

/// A model of `E[x | x_τ]` under its own diffusion kernel.
pub trait Denoiser: Send + Sync {
    fn kind(&self) -> DiffusionKind;

    fn dim(&self) -> usize;

    fn denoise(&self, x_tau: &Tensor, tau: f64) -> Result<Tensor>;
}

/// Exact VP/VE denoiser of a Gaussian mixture.
#[derive(Clone, Debug)]
pub struct GmmDenoiser {
    pub spec: GmmSpec,
    pub kind: DiffusionKind,
}

impl Denoiser for GmmDenoiser {
    fn kind(&self) -> DiffusionKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn denoise(&self, x_tau: &Tensor, tau: f64) -> Result<Tensor> {
        match self.kind {
            DiffusionKind::Ve => {
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(Error::Domain(format!("VE time must be positive, got {tau}")));
                }
                self.spec.kernel_posterior_mean(x_tau, 1.0, tau)
            }
            DiffusionKind::Vp => {
                if !(tau > 0.0 && tau <= 1.0) {
                    return Err(Error::Domain(format!("VP time must lie in (0, 1], got {tau}")));
                }
                self.spec.kernel_posterior_mean(x_tau, alpha_vp(tau), sigma_vp(tau))
            }
        }
    }
}

/// Wraps a diffusion denoiser as a rectified-flow posterior-mean predictor.
#[derive(Clone, Debug)]
pub struct DiffusionConversion<D> {
    pub denoiser: D,
}

impl<D: Denoiser> DiffusionConversion<D> {
    pub fn new(denoiser: D) -> Self {
        Self { denoiser }
    }

    pub fn kind(&self) -> DiffusionKind {
        self.denoiser.kind()
    }
}

/// Evaluates the wrapped denoiser at `(s · z_t, τ)` and returns its output unchanged.
pub fn converted_posterior_mean<D: Denoiser>(
    conv: &DiffusionConversion<D>,
    z_t: &Tensor,
    t: f64,
) -> Result<Tensor> {
    check_dim(z_t, conv.denoiser.dim())?;
    let (tau, scale) = convert_time_scale(conv.kind(), t)?;
    conv.denoiser.denoise(&z_t.scale(scale), tau)
}

impl<D: Denoiser> PosteriorMean for DiffusionConversion<D> {
    fn posterior_mean(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        converted_posterior_mean(self, x_t, t)
    }
}

impl<D: Denoiser> VelocityField for DiffusionConversion<D> {
    fn dim(&self) -> usize {
        self.denoiser.dim()
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let x_hat = converted_posterior_mean(self, z, t)?;
        velocity_from_posterior_mean(z, &x_hat, t)
    }

    fn posterior_mean(&self, z: &Tensor, t: f64) -> Option<Result<Tensor>> {
        Some(converted_posterior_mean(self, z, t))
    }
}
