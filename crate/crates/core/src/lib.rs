//! Rectified flows at desk scale: reverse-mode training of small MLP velocity
//! fields, the Reflow procedure, ODE samplers and trajectory diagnostics, all
//! checkable against closed-form Gaussian-mixture fields.

pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod mlp;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod samplers;
pub mod tensor;

pub use binio::sha256_hex;
pub use checkpoint::Checkpoint;
pub use diagnostics::DiagnosticsReport;
pub use models::{GmmSpec, NeuralField, Parameterization, VelocityField};
pub use pipeline::{PairDataset, ReflowConfig, TrainConfig};
pub use samplers::{Solver, Trajectory, UpdateRule};
pub use error::{Error, Result};
pub use tensor::Tensor;
