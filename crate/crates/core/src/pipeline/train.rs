//! Minibatch training of velocity fields and toy diffusion denoisers.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::pairs::PairDataset;
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{objective_at_times, LossConfig, LossSpec, TimestepDistribution};
use crate::mlp::{Activation, Dropout, MlpParams};
use crate::models::{
    convert_time_scale, DiffusionKind, GmmSpec, NeuralDenoiser, NeuralField, NeuralSpec, Parameterization,
    EMBED_DIM,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Losses above this abort training as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub parameterization: Parameterization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            parameterization: Parameterization::VPred,
        }
    }
}

impl ModelConfig {
    pub fn widths(&self, dim: usize) -> Vec<usize> {
        let mut w = vec![dim + EMBED_DIM];
        w.extend(&self.hidden);
        w.push(dim);
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub timesteps: TimestepDistribution,
    pub adam: AdamConfig,
    /// Linear learning-rate warmup length in iterations; 0 disables it.
    pub warmup: usize,
    pub dropout: f64,
    pub model: ModelConfig,
    /// Keep a snapshot every this many iterations; 0 keeps only the final state.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            iterations: 5000,
            seed: 0,
            loss: LossConfig::default(),
            timesteps: TimestepDistribution::default(),
            adam: AdamConfig::default(),
            warmup: 0,
            dropout: 0.0,
            model: ModelConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.timesteps.validate()?;
        self.adam.validate()
    }
}

/// Where `(x, z)` training couples come from.
#[derive(Clone, Copy, Debug)]
pub enum Coupling<'a> {
    /// `x ~ target`, `z ~ N(0, I)`, drawn independently.
    Independent(&'a GmmSpec),
    /// Stored couples, never re-paired.
    Paired(&'a PairDataset),
    /// Each couple comes from `synthetic` with probability `p`, otherwise
    /// from `real`.
    Mixed {
        synthetic: &'a PairDataset,
        real: &'a PairDataset,
        p: f64,
    },
}

impl Coupling<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Coupling::Independent(spec) => spec.dim(),
            Coupling::Paired(ds) => ds.dim(),
            Coupling::Mixed { real, .. } => real.dim(),
        }
    }
}

/// Walks a dataset in reshuffled epochs.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

enum BatchSource<'a> {
    Independent {
        spec: &'a GmmSpec,
        x_rng: ChaCha8Rng,
        z_rng: ChaCha8Rng,
    },
    Paired {
        data: &'a PairDataset,
        epochs: EpochSampler,
    },
    Mixed {
        synthetic: (&'a PairDataset, EpochSampler),
        real: (&'a PairDataset, EpochSampler),
        p: f64,
    },
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<'a> BatchSource<'a> {
    fn new(coupling: &Coupling<'a>, seed: u64) -> Result<Self> {
        let nonempty = |ds: &PairDataset| {
            if ds.is_empty() {
                Err(Error::InvalidInput("cannot train on an empty pair set".into()))
            } else {
                Ok(())
            }
        };
        Ok(match *coupling {
            Coupling::Independent(spec) => BatchSource::Independent {
                spec,
                x_rng: stream(seed, 1),
                z_rng: stream(seed, 2),
            },
            Coupling::Paired(data) => {
                nonempty(data)?;
                BatchSource::Paired {
                    data,
                    epochs: EpochSampler::new(data.len()),
                }
            }
            Coupling::Mixed { synthetic, real, p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("mixing probability must lie in [0, 1], got {p}")));
                }
                nonempty(real)?;
                if p == 0.0 {
                    return Self::new(&Coupling::Paired(real), seed);
                }
                nonempty(synthetic)?;
                if synthetic.dim() != real.dim() {
                    return Err(Error::shape(&[real.dim()], &[synthetic.dim()]));
                }
                if p == 1.0 {
                    return Self::new(&Coupling::Paired(synthetic), seed);
                }
                BatchSource::Mixed {
                    synthetic: (synthetic, EpochSampler::new(synthetic.len())),
                    real: (real, EpochSampler::new(real.len())),
                    p,
                }
            }
        })
    }

    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        match self {
            BatchSource::Independent { spec, x_rng, z_rng } => {
                let x = spec.sample(n, x_rng);
                let z = (0..n * spec.dim()).map(|_| StandardNormal.sample(z_rng)).collect();
                (x, Tensor::from_raw(vec![n, spec.dim()], z))
            }
            BatchSource::Paired { data, epochs } => {
                let idx: Vec<usize> = (0..n).map(|_| epochs.next(rng)).collect();
                (data.x.gather_rows(&idx), data.z.gather_rows(&idx))
            }
            BatchSource::Mixed { synthetic, real, p } => {
                let d = real.0.dim();
                let (mut xs, mut zs) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
                for _ in 0..n {
                    let (ds, epochs) = if rng.random::<f64>() < *p {
                        (synthetic.0, &mut synthetic.1)
                    } else {
                        (real.0, &mut real.1)
                    };
                    let i = epochs.next(rng);
                    xs.extend_from_slice(ds.x.row(i));
                    zs.extend_from_slice(ds.z.row(i));
                }
                (Tensor::from_raw(vec![n, d], xs), Tensor::from_raw(vec![n, d], zs))
            }
        }
    }
}

/// Starting point of a training run.
#[derive(Clone, Debug)]
pub enum Init {
    /// Seeded initialization of the configured architecture.
    Fresh,
    /// Continue from stored raw and EMA parameters.
    Checkpoint {
        checkpoint: Checkpoint,
        parameterization: Parameterization,
    },
    /// Start from a diffusion denoiser read through the time/scale conversion.
    Diffusion(NeuralDenoiser),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub spec: NeuralSpec,
    pub checkpoint: Checkpoint,
    /// Minibatch loss of every iteration.
    pub history: Vec<f64>,
    pub snapshots: Vec<(usize, Checkpoint)>,
}

impl TrainOutcome {
    /// The EMA parameters as a velocity field.
    pub fn field(&self) -> Result<NeuralField> {
        NeuralField::new(self.spec, self.checkpoint.ema.clone())
    }

    pub fn raw_field(&self) -> Result<NeuralField> {
        NeuralField::new(self.spec, self.checkpoint.params.clone())
    }
}

pub fn history_csv(history: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

fn learning_rate(base: f64, warmup: usize, iteration: usize) -> f64 {
    if warmup == 0 {
        base
    } else {
        base * ((iteration + 1) as f64 / warmup as f64).min(1.0)
    }
}

fn check_loss(iteration: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training {
            iteration,
            reason: format!("loss is {loss}"),
        });
    }
    if loss > DIVERGENCE_LIMIT {
        return Err(Error::Training {
            iteration,
            reason: format!("loss {loss:e} exceeds the divergence limit {DIVERGENCE_LIMIT:e}"),
        });
    }
    Ok(())
}

/// Trains a velocity field on `coupling` with the objective of `config`.
pub fn train_flow(coupling: &Coupling<'_>, config: &TrainConfig, init: Init) -> Result<TrainOutcome> {
    config.validate()?;
    let d = coupling.dim();
    let (spec, checkpoint) = match init {
        Init::Fresh => {
            let params = MlpParams::init(&config.model.widths(d), config.model.activation, config.seed)?;
            let spec = NeuralSpec {
                data_dim: d,
                parameterization: config.model.parameterization,
            };
            (spec, Checkpoint::fresh(params))
        }
        Init::Checkpoint {
            checkpoint,
            parameterization,
        } => (
            NeuralSpec {
                data_dim: d,
                parameterization,
            },
            checkpoint,
        ),
        Init::Diffusion(denoiser) => (
            NeuralSpec {
                data_dim: d,
                parameterization: Parameterization::for_denoiser(denoiser.kind),
            },
            Checkpoint::fresh(denoiser.params),
        ),
    };
    NeuralField::new(spec, checkpoint.params.clone())?;
    let loss = LossSpec::from_config(&config.loss, d)?;

    let mut params = checkpoint.params;
    let mut state = AdamState::with_ema(&params, checkpoint.ema, &config.adam)?;
    let mut source = BatchSource::new(coupling, config.seed)?;
    let mut shuffle_rng = stream(config.seed, 3);
    let mut t_rng = stream(config.seed, 4);
    let mut dropout_rng = stream(config.seed, 5);
    let mut history = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();

    for it in 0..config.iterations {
        let (x, z) = source.next_batch(config.batch_size, &mut shuffle_rng);
        let ts: Vec<f64> = (0..config.batch_size).map(|_| config.timesteps.sample(&mut t_rng)).collect();
        let dropout = (config.dropout > 0.0).then_some(Dropout {
            rate: config.dropout,
            rng: &mut dropout_rng,
        });
        let est = objective_at_times(&spec, &params, &loss, &x, &z, &ts, dropout)?;
        check_loss(it, est.loss)?;
        state.learning_rate = learning_rate(config.adam.learning_rate, config.warmup, it);
        adam_step(&mut state, &mut params, &est.grads)?;
        history.push(est.loss);
        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 && it + 1 < config.iterations {
            snapshots.push((
                it + 1,
                Checkpoint {
                    params: params.clone(),
                    ema: state.ema().clone(),
                },
            ));
        }
    }
    Ok(TrainOutcome {
        spec,
        checkpoint: Checkpoint {
            params,
            ema: state.into_ema(),
        },
        history,
        snapshots,
    })
}

/// A toy diffusion denoiser trained under its own kernel, together with the
/// loss history.
#[derive(Clone, Debug)]
pub struct DenoiserOutcome {
    pub denoiser: NeuralDenoiser,
    pub history: Vec<f64>,
}

/// Trains `D(x_τ, τ) ≈ E[x | x_τ]` for the VE kernel `N(x, τ² I)` or the VP
/// kernel `N(α x, (1 - α²) I)`. Training times are drawn as rectified-flow
/// times from `config.timesteps` and converted, so the network sees exactly
/// the `(τ, s z_t)` inputs the conversion wrapper will later feed it.
pub fn train_denoiser(target: &GmmSpec, kind: DiffusionKind, config: &TrainConfig) -> Result<DenoiserOutcome> {
    config.validate()?;
    let d = target.dim();
    let mut params = MlpParams::init(&config.model.widths(d), config.model.activation, config.seed)?;
    let mut state = AdamState::new(&params, &config.adam)?;
    let mut source = BatchSource::new(&Coupling::Independent(target), config.seed)?;
    let mut unused = stream(config.seed, 3);
    let mut t_rng = stream(config.seed, 4);
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let (x, z) = source.next_batch(config.batch_size, &mut unused);
        let mut taus = Vec::with_capacity(config.batch_size);
        let mut x_tau = x.clone();
        for i in 0..config.batch_size {
            let t = config.timesteps.sample(&mut t_rng);
            let (tau, s) = convert_time_scale(kind, t)?;
            taus.push(tau);
            let zi = z.row(i).to_vec();
            for (a, b) in x_tau.row_mut(i).iter_mut().zip(zi) {
                *a = s * ((1.0 - t) * *a + t * b);
            }
        }
        let mut tape = Tape::new();
        let input = tape.constant(NeuralDenoiser::input(kind, &x_tau, &taus));
        let (out, vars) = params.record(&mut tape, input, None)?;
        let target_x = tape.constant(x);
        let diff = tape.sub(out, target_x)?;
        let per_row = tape.row_sum_squares(diff);
        let loss = tape.mean(per_row);
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        check_loss(it, value)?;
        let grads: Vec<Tensor> = vars
            .0
            .iter()
            .zip(params.tensors())
            .map(|(&v, p)| grads.wrt_or_zeros(v, p.shape()))
            .collect();
        state.learning_rate = learning_rate(config.adam.learning_rate, config.warmup, it);
        adam_step(&mut state, &mut params, &grads)?;
        history.push(value);
    }
    Ok(DenoiserOutcome {
        denoiser: NeuralDenoiser {
            kind,
            params: state.into_ema(),
        },
        history,
    })
}
