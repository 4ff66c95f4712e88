//! Velocity fields `v(z_t, t)` for the rectified-flow ODE `dz/dt = v(z, t)`.
//!
//! Three realizations live here: the closed-form field of a Gaussian mixture
//! ([`GmmSpec`]), a diffusion denoiser re-expressed on the rectified-flow
//! kernel ([`DiffusionConversion`]), and a trained network ([`NeuralField`]).

mod conversion;
mod gmm;
mod neural;

pub use conversion::{
    alpha_vp, alpha_vp_inverse, convert_time_scale, converted_posterior_mean, Denoiser,
    DiffusionConversion, DiffusionKind, GmmDenoiser,
};
pub use gmm::{analytic_velocity, gmm_posterior_mean, GmmSpec};
pub use neural::{
    neural_velocity, time_embedding, NeuralDenoiser, NeuralField, NeuralSpec, Parameterization,
    EMBED_DIM,
    EMBED_FREQUENCIES,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp for field evaluation and timestep sampling.
pub const T_MIN: f64 = 0.00001;
/// Upper clamp for field evaluation and timestep sampling.
pub const T_MAX: f64 = 0.99999;

pub trait VelocityField: Send + Sync {
    /// Data dimensionality `d`; inputs are `[n, d]` batches or single rows.
    fn dim(&self) -> usize;

    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor>;

    /// `E[x | x_t = z]` when the field is defined through it.
    fn posterior_mean(&self, _z: &Tensor, _t: f64) -> Option<Result<Tensor>> {
        None
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        (**self).velocity(z, t)
    }

    fn posterior_mean(&self, z: &Tensor, t: f64) -> Option<Result<Tensor>> {
        (**self).posterior_mean(z, t)
    }
}

/// Anything that can report `E[x | x_t]` for the kernel `N((1-t)x, t²I)`.
pub trait PosteriorMean: Sync {
    fn posterior_mean(&self, x_t: &Tensor, t: f64) -> Result<Tensor>;
}

/// A velocity field defined by a closure `(z, t) -> v`.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&Tensor, f64) -> Tensor + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&Tensor, f64) -> Tensor + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        if z.last_dim() != self.dim {
            return Err(Error::shape(&[self.dim], &[z.last_dim()]));
        }
        Ok((self.f)(z, t))
    }
}

/// `(1 - t) x + t z`.
pub fn interpolate(x: &Tensor, z: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    x.zip_map(z, |a, b| (1.0 - t) * a + t * b)
}

/// `(z - x̂) / t`, the velocity implied by a posterior-mean prediction.
pub(crate) fn velocity_from_posterior_mean(z: &Tensor, x_hat: &Tensor, t: f64) -> Result<Tensor> {
    z.zip_map(x_hat, |zv, xv| (zv - xv) / t)
}

pub(crate) fn check_dim(z: &Tensor, dim: usize) -> Result<()> {
    if z.last_dim() != dim {
        return Err(Error::shape(&[dim], &[z.last_dim()]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let z = Tensor::vector(vec![0.0, 2.0]).unwrap();
        assert_eq!(interpolate(&x, &z, 0.0).unwrap(), x);
        assert_eq!(interpolate(&x, &z, 1.0).unwrap(), z);
        assert_eq!(interpolate(&x, &z, 0.5).unwrap().data(), &[0.5, 1.0]);
        assert!(interpolate(&x, &z, 1.5).is_err());
        let short = Tensor::vector(vec![1.0]).unwrap();
        assert!(interpolate(&x, &short, 0.5).is_err());
    }
}
