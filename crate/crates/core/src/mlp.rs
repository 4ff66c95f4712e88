//! Multilayer perceptron parameters and forward passes.
//!
//! Weights are stored `[fan_in, fan_out]` so that a batch `[n, fan_in]`
//! multiplies on the left. Hidden layers apply the activation; the output
//! layer is linear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn id(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation id {other}"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    widths: Vec<usize>,
    activation: Activation,
    seed: u64,
    layers: Vec<Layer>,
}

/// Tape handles for every weight and bias, in layer order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

/// Dropout applied to hidden activations while recording a training pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl MlpParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "an MLP needs at least two positive layer widths, got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Tensor::from_raw(vec![fan_in, fan_out], w),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            seed,
            layers,
        })
    }

    /// Assembles parameters from explicit layers, checking that dimensions chain.
    pub fn from_layers(activation: Activation, seed: u64, layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidInput("an MLP needs at least one layer".into()))?;
        let mut widths = vec![first.weight.shape()[0]];
        for layer in &layers {
            let ws = layer.weight.shape();
            if ws.len() != 2 || ws[0] != *widths.last().unwrap() {
                return Err(Error::shape(&[*widths.last().unwrap(), ws[ws.len() - 1]], ws));
            }
            if layer.bias.shape() != [ws[1]] {
                return Err(Error::shape(&[ws[1]], layer.bias.shape()));
            }
            widths.push(ws[1]);
        }
        Ok(Self {
            widths,
            activation,
            seed,
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// All parameter tensors in layer order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Registers every tensor as a tape parameter and records the forward pass.
    pub fn record(
        &self,
        tape: &mut Tape,
        input: Var,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<(Var, ParamVars)> {
        let width = tape.value(input).last_dim();
        if width != self.input_width() {
            return Err(Error::shape(&[self.input_width()], &[width]));
        }
        let mut vars = Vec::with_capacity(self.num_tensors());
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.parameter(layer.weight.clone());
            let b = tape.parameter(layer.bias.clone());
            vars.extend([w, b]);
            h = tape.affine(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
                if let Some(Dropout { rate, rng }) = dropout.as_mut() {
                    if *rate > 0.0 {
                        let keep = 1.0 - *rate;
                        let shape = tape.value(h).shape().to_vec();
                        let mask: Vec<f64> = (0..tape.value(h).len())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let m = tape.constant(Tensor::from_raw(shape, mask));
                        h = tape.mul(h, m)?;
                    }
                }
            }
        }
        Ok((h, ParamVars(vars)))
    }
}

/// Evaluates the network on a `[n, input_width]` batch (or a single row).
pub fn forward_mlp(params: &MlpParams, input: &Tensor) -> Result<Tensor> {
    let width = input.last_dim();
    if width != params.input_width() {
        return Err(Error::shape(&[params.input_width()], &[width]));
    }
    let n = input.rows();
    let mut h = input.data().to_vec();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let (k, m) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(layer.bias.data());
        }
        let w = layer.weight.data();
        for r in 0..n {
            let hr = &h[r * k..(r + 1) * k];
            let or = &mut out[r * m..(r + 1) * m];
            for (p, &hv) in hr.iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                for (o, &wv) in or.iter_mut().zip(&w[p * m..(p + 1) * m]) {
                    *o += hv * wv;
                }
            }
        }
        if i < last {
            out.iter_mut().for_each(|v| *v = params.activation.apply(*v));
        }
        h = out;
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = params.output_width();
    Ok(Tensor::from_raw(shape, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_maps_to_zero() {
        let mut p = MlpParams::init(&[3, 5, 2], Activation::Tanh, 1).unwrap();
        p.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(forward_mlp(&p, &x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn identity_single_layer() {
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let p = MlpParams::from_layers(
            Activation::Relu,
            0,
            vec![Layer {
                weight: eye,
                bias: Tensor::zeros(&[3]),
            }],
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let y = forward_mlp(&p, &x).unwrap();
        assert_eq!(y.shape(), &[3]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matches_scalar_reevaluation() {
        let p = MlpParams::init(&[3, 4, 4, 2], Activation::Tanh, 42).unwrap();
        let x = [0.3, -1.2, 0.8];

        // Plain scalar loops, independent of the batched kernel.
        let mut h = x.to_vec();
        for (li, layer) in p.layers().iter().enumerate() {
            let (k, m) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut next = vec![0.0; m];
            for (j, out) in next.iter_mut().enumerate() {
                let mut acc = layer.bias.data()[j];
                for i in 0..k {
                    acc += h[i] * layer.weight.data()[i * m + j];
                }
                *out = if li + 1 < p.layers().len() { acc.tanh() } else { acc };
            }
            h = next;
        }

        let y = forward_mlp(&p, &Tensor::vector(x.to_vec()).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_width_mismatch() {
        let p = MlpParams::init(&[3, 2], Activation::Tanh, 0).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(matches!(forward_mlp(&p, &x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = MlpParams::init(&[4, 8, 2], Activation::Tanh, 9).unwrap();
        let b = MlpParams::init(&[4, 8, 2], Activation::Tanh, 9).unwrap();
        let c = MlpParams::init(&[4, 8, 2], Activation::Tanh, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(a.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn recorded_forward_matches_plain_forward() {
        let p = MlpParams::init(&[3, 6, 2], Activation::Relu, 3).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -0.5, 1.0], vec![2.0, 0.1, -0.3]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, vars) = p.record(&mut tape, xv, None).unwrap();
        assert_eq!(vars.0.len(), 4);
        assert_eq!(tape.value(out), &forward_mlp(&p, &x).unwrap());
    }
}
