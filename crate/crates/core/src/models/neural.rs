use serde::{Deserialize, Serialize};

use super::{
    check_dim, convert_time_scale, velocity_from_posterior_mean, Denoiser, DiffusionKind,
    VelocityField, T_MAX, T_MIN,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mlp::{forward_mlp, Dropout, MlpParams, ParamVars};
use crate::tensor::Tensor;

pub const EMBED_FREQUENCIES: usize = 8;
pub const EMBED_DIM: usize = 2 * EMBED_FREQUENCIES;
const MAX_FREQUENCY: f64 = 8.0;

/// Sinusoidal features `[sin(ω_k τ), cos(ω_k τ)]` with `ω_k = 8^(k/7)`.
pub fn time_embedding(tau: f64) -> [f64; EMBED_DIM] {
    let mut out = [0.0; EMBED_DIM];
    for k in 0..EMBED_FREQUENCIES {
        let omega = MAX_FREQUENCY.powf(k as f64 / (EMBED_FREQUENCIES - 1) as f64);
        let (s, c) = (omega * tau).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    out
}

/// What the network output means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Output is the velocity.
    VPred,
    /// Output is `E[x | x_t]`; velocity is `(z - out) / t`.
    XPred,
    /// Output is a VE diffusion denoiser queried through the time/scale conversion.
    VeDenoiser,
    /// Output is a VP diffusion denoiser queried through the time/scale conversion.
    VpDenoiser,
}

impl Parameterization {
    pub fn diffusion_kind(self) -> Option<DiffusionKind> {
        match self {
            Parameterization::VeDenoiser => Some(DiffusionKind::Ve),
            Parameterization::VpDenoiser => Some(DiffusionKind::Vp),
            _ => None,
        }
    }

    pub fn for_denoiser(kind: DiffusionKind) -> Self {
        match kind {
            DiffusionKind::Ve => Parameterization::VeDenoiser,
            DiffusionKind::Vp => Parameterization::VpDenoiser,
        }
    }

    /// Velocity implied by network output `out` at state `z`, time `t`.
    pub fn to_velocity(self, z: &Tensor, out: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            Parameterization::VPred => {
                z.ensure_same_shape(out)?;
                Ok(out.clone())
            }
            _ => velocity_from_posterior_mean(z, out, t),
        }
    }
}

/// Scalar the denoiser network is conditioned on for source time `tau`.
fn noise_feature(kind: DiffusionKind, tau: f64) -> f64 {
    match kind {
        DiffusionKind::Ve => 0.25 * tau.ln(),
        DiffusionKind::Vp => tau,
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(T_MIN..=T_MAX).contains(&t) {
        return Err(Error::Domain(format!(
            "network fields are evaluated for t in [{T_MIN}, {T_MAX}], got {t}"
        )));
    }
    Ok(())
}

/// Architecture-level description of a network field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralSpec {
    pub data_dim: usize,
    pub parameterization: Parameterization,
}

impl NeuralSpec {
    pub fn input_width(&self) -> usize {
        self.data_dim + EMBED_DIM
    }

    /// Builds `[z', embed(τ)]` rows, where `z'` and `τ` are the rectified-flow
    /// inputs or their converted diffusion counterparts.
    fn network_input(&self, z: &Tensor, ts: &[f64]) -> Result<Tensor> {
        check_dim(z, self.data_dim)?;
        if ts.len() != z.rows() {
            return Err(Error::shape(&[z.rows()], &[ts.len()]));
        }
        let width = self.input_width();
        let mut data = Vec::with_capacity(z.rows() * width);
        for (row, &t) in z.row_iter().zip(ts) {
            let (scale, feature) = match self.parameterization.diffusion_kind() {
                Some(kind) => {
                    let (tau, s) = convert_time_scale(kind, t)?;
                    (s, noise_feature(kind, tau))
                }
                None => (1.0, t),
            };
            data.extend(row.iter().map(|v| v * scale));
            data.extend(time_embedding(feature));
        }
        Ok(Tensor::from_raw(vec![z.rows(), width], data))
    }

    /// Records the velocity of `params` at rows `z` with per-row times `ts`.
    pub fn record(
        &self,
        tape: &mut Tape,
        params: &MlpParams,
        z: &Tensor,
        ts: &[f64],
        dropout: Option<Dropout<'_>>,
    ) -> Result<(Var, ParamVars)> {
        let z = z.as_matrix();
        let input = tape.constant(self.network_input(&z, ts)?);
        let (out, vars) = params.record(tape, input, dropout)?;
        let v = match self.parameterization {
            Parameterization::VPred => out,
            _ => {
                let zv = tape.constant(z);
                let diff = tape.sub(zv, out)?;
                tape.scale_rows(diff, ts.iter().map(|t| 1.0 / t).collect())?
            }
        };
        Ok((v, vars))
    }

    /// Velocity for a batch with per-row times.
    pub fn velocity_rows(&self, params: &MlpParams, z: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let out = forward_mlp(params, &self.network_input(&z.as_matrix(), ts)?)?;
        let mut v = match self.parameterization {
            Parameterization::VPred => out,
            _ => {
                let mut v = z.as_matrix().sub(&out)?;
                let d = self.data_dim;
                for (row, t) in v.data_mut().chunks_exact_mut(d).zip(ts) {
                    row.iter_mut().for_each(|x| *x /= t);
                }
                v
            }
        };
        v = v.reshape(z.shape().to_vec())?;
        Ok(v)
    }
}

/// A trained network viewed as a velocity field.
#[derive(Clone, Debug)]
pub struct NeuralField {
    pub spec: NeuralSpec,
    pub params: MlpParams,
}

impl NeuralField {
    pub fn new(spec: NeuralSpec, params: MlpParams) -> Result<Self> {
        if params.input_width() != spec.input_width() || params.output_width() != spec.data_dim {
            return Err(Error::Config(format!(
                "network widths {:?} do not fit data dimension {}",
                params.widths(),
                spec.data_dim
            )));
        }
        Ok(Self { spec, params })
    }
}

impl VelocityField for NeuralField {
    fn dim(&self) -> usize {
        self.spec.data_dim
    }

    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        neural_velocity(&self.params, self.spec.parameterization, z, t)
    }

    fn posterior_mean(&self, z: &Tensor, t: f64) -> Option<Result<Tensor>> {
        Some(self.velocity(z, t).and_then(|v| z.axpy(-t, &v)))
    }
}

/// Network velocity at a shared time `t ∈ [T_MIN, T_MAX]`.
pub fn neural_velocity(
    params: &MlpParams,
    parameterization: Parameterization,
    z_t: &Tensor,
    t: f64,
) -> Result<Tensor> {
    check_time(t)?;
    let spec = NeuralSpec {
        data_dim: params.output_width(),
        parameterization,
    };
    let ts = vec![t; z_t.rows()];
    spec.velocity_rows(params, z_t, &ts)
}

/// A network trained directly as a diffusion denoiser under its own kernel.
#[derive(Clone, Debug)]
pub struct NeuralDenoiser {
    pub kind: DiffusionKind,
    pub params: MlpParams,
}

impl NeuralDenoiser {
    pub(crate) fn input(kind: DiffusionKind, x_tau: &Tensor, taus: &[f64]) -> Tensor {
        let x = x_tau.as_matrix();
        let mut data = Vec::with_capacity(x.rows() * (x.last_dim() + EMBED_DIM));
        for (row, &tau) in x.row_iter().zip(taus) {
            data.extend_from_slice(row);
            data.extend(time_embedding(noise_feature(kind, tau)));
        }
        Tensor::from_raw(vec![x.rows(), x.last_dim() + EMBED_DIM], data)
    }
}

impl Denoiser for NeuralDenoiser {
    fn kind(&self) -> DiffusionKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.params.output_width()
    }

    fn denoise(&self, x_tau: &Tensor, tau: f64) -> Result<Tensor> {
        check_dim(x_tau, self.dim())?;
        let taus = vec![tau; x_tau.rows()];
        forward_mlp(&self.params, &Self::input(self.kind, x_tau, &taus))?.reshape(x_tau.shape().to_vec())
    }
}
