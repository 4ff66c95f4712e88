//! Adam with bias correction and an exponential moving average of the weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::MlpParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decay of the parameter EMA; must lie in `[0, 1)`.
    pub ema_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            ema_decay: 0.9999,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.learning_rate >= 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config(
                "learning rate must be nonnegative and epsilon positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub ema_decay: f64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    ema: MlpParams,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: &AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            step: 0,
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            ema_decay: config.ema_decay,
            first_moment: zeros.clone(),
            second_moment: zeros,
            ema: params.clone(),
        })
    }

    /// Resumes from existing parameters whose EMA shadow is already known.
    pub fn with_ema(params: &MlpParams, ema: MlpParams, config: &AdamConfig) -> Result<Self> {
        if ema.widths() != params.widths() {
            return Err(Error::shape(params.widths(), ema.widths()));
        }
        let mut state = Self::new(params, config)?;
        state.ema = ema;
        Ok(state)
    }

    pub fn ema(&self) -> &MlpParams {
        &self.ema
    }

    pub fn into_ema(self) -> MlpParams {
        self.ema
    }
}

/// One Adam update of `params` in place, followed by the EMA update
/// `ema <- decay * ema + (1 - decay) * params`.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.num_tensors() {
        return Err(Error::shape(&[params.num_tensors()], &[grads.len()]));
    }
    for (p, g) in params.tensors().zip(grads) {
        p.ensure_same_shape(g)?;
    }

    state.step += 1;
    let step = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = 1.0 - b1.powi(step);
    let correction2 = 1.0 - b2.powi(step);
    let lr = state.learning_rate;
    let eps = state.epsilon;

    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / correction1;
            let v_hat = *vv / correction2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    let decay = state.ema_decay;
    for (e, p) in state.ema.tensors_mut().zip(params.tensors()) {
        for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
            *ev = decay * *ev + (1.0 - decay) * pv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, Layer};

    fn scalar_params(value: f64) -> MlpParams {
        MlpParams::from_layers(
            Activation::Tanh,
            0,
            vec![Layer {
                weight: Tensor::matrix(1, 1, vec![value]).unwrap(),
                bias: Tensor::zeros(&[1]),
            }],
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = MlpParams::init(&[2, 3, 1], Activation::Tanh, 4).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&p, &AdamConfig::default()).unwrap();
        let zeros: Vec<Tensor> = p.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        adam_step(&mut s, &mut p, &zeros).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias-corrected m̂ = v̂ = 1 so the step is lr / (1 + eps).
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut p = scalar_params(0.5);
        let mut s = AdamState::new(&p, &cfg).unwrap();
        let grads = vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::zeros(&[1])];
        adam_step(&mut s, &mut p, &grads).unwrap();
        let expected = 0.5 - 0.01 / (1.0 + 1e-8);
        assert!((p.layers()[0].weight.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_decay_shadow_tracks_params() {
        let cfg = AdamConfig {
            ema_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = MlpParams::init(&[2, 3, 1], Activation::Tanh, 4).unwrap();
        let mut s = AdamState::new(&p, &cfg).unwrap();
        assert_eq!(s.ema(), &p);
        for k in 0..5 {
            let grads: Vec<Tensor> = p
                .tensors()
                .map(|t| Tensor::full(t.shape(), 0.1 * (k as f64 + 1.0)))
                .collect();
            adam_step(&mut s, &mut p, &grads).unwrap();
            assert_eq!(s.ema(), &p);
        }
    }

    #[test]
    fn ema_approaches_constant_params_monotonically() {
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ema_decay: 0.9,
            ..AdamConfig::default()
        };
        let p0 = scalar_params(0.0);
        let mut p = scalar_params(1.0);
        let mut s = AdamState::with_ema(&p, p0, &cfg).unwrap();
        let grads: Vec<Tensor> = p.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        let mut gap = 1.0;
        for _ in 0..50 {
            adam_step(&mut s, &mut p, &grads).unwrap();
            let now = (1.0 - s.ema().layers()[0].weight.data()[0]).abs();
            assert!(now < gap);
            gap = now;
        }
    }

    #[test]
    fn rejects_bad_decay_and_shapes() {
        let p = scalar_params(0.0);
        let cfg = AdamConfig {
            ema_decay: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(&p, &cfg).is_err());
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p, &AdamConfig::default()).unwrap();
        assert!(adam_step(&mut s, &mut p, &[Tensor::zeros(&[1])]).is_err());
    }
}
