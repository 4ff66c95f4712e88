//! The Reflow procedure: train on a coupling, generate pairs with the trained
//! field, retrain on the pairs, and optionally fine-tune on inverted real data.

mod evaluate;
mod pairs;
mod reflow;
mod train;

pub use evaluate::{evaluate, evaluation_samples, EvalConfig, Evaluation};
pub use pairs::{
    generate_pairs, invert_real_data, record_noise, InvertedPairs, NoiseKey, PairDataset, PairGenConfig,
    PairSource, PAIR_MAGIC,
};
pub use reflow::{finetune_with_real, reflow, ReflowConfig, ReflowRun, Stage};
pub use train::{
    history_csv, train_denoiser, train_flow, Coupling, DenoiserOutcome, Init, ModelConfig, TrainConfig,
    TrainOutcome, DIVERGENCE_LIMIT,
};
