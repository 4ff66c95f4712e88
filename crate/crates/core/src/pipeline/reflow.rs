use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::pairs::{generate_pairs, PairDataset, PairGenConfig};
use super::train::{history_csv, train_flow, Coupling, Init, TrainConfig, TrainOutcome};
use crate::binio::{sha256, write_file};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::models::{GmmSpec, NeuralSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflowConfig {
    pub target: GmmSpec,
    /// Number of rectified flows trained (K); 1 trains only the first.
    pub rounds: usize,
    /// Training of the first flow, on the independent coupling.
    pub first: TrainConfig,
    /// Training of every later flow, on generated pairs.
    pub later: TrainConfig,
    pub pairs: PairGenConfig,
    /// Start each later flow from the previous flow's EMA weights.
    pub init_from_previous: bool,
}

impl Default for ReflowConfig {
    fn default() -> Self {
        Self {
            target: GmmSpec::new(
                vec![0.5, 0.5],
                vec![vec![1.5, 1.5], vec![-1.5, -1.5]],
                vec![0.1, 0.1],
            )
            .expect("valid default target"),
            rounds: 2,
            first: TrainConfig::default(),
            later: TrainConfig::default(),
            pairs: PairGenConfig::default(),
            init_from_previous: true,
        }
    }
}

/// One trained flow. `pairs` holds the couples it was trained on, absent for
/// the first flow.
#[derive(Clone, Debug)]
pub struct Stage {
    pub index: usize,
    pub outcome: TrainOutcome,
    pub pairs: Option<PairDataset>,
}

#[derive(Clone, Debug)]
pub struct ReflowRun {
    pub stages: Vec<Stage>,
    /// Every file written, in write order.
    pub files: Vec<PathBuf>,
}

fn persist(dir: &Path, stage: &Stage, files: &mut Vec<PathBuf>) -> Result<()> {
    let k = stage.index;
    if let Some(pairs) = &stage.pairs {
        let path = dir.join(format!("pairs{k}.rfpr"));
        pairs.save(&path)?;
        files.push(path);
    }
    for (it, snap) in &stage.outcome.snapshots {
        let path = dir.join(format!("stage{k}_iter{it}.rfpp"));
        snap.save(&path)?;
        files.push(path);
    }
    let path = dir.join(format!("stage{k}.rfpp"));
    stage.outcome.checkpoint.save(&path)?;
    files.push(path);
    let path = dir.join(format!("stage{k}_loss.csv"));
    write_file(&path, history_csv(&stage.outcome.history).as_bytes())?;
    files.push(path);
    Ok(())
}

/// Runs `config.rounds` rounds of Reflow, persisting every stage into `out`
/// when given. Stage `k >= 2` sees only the pairs generated by stage `k - 1`
/// and, optionally, its weights.
pub fn reflow(config: &ReflowConfig, init: Init, out: Option<&Path>) -> Result<ReflowRun> {
    if config.rounds == 0 {
        return Err(Error::Config("reflow needs at least one round".into()));
    }
    config.target.validate()?;
    let mut stages: Vec<Stage> = Vec::with_capacity(config.rounds);
    let mut files = Vec::new();
    for k in 1..=config.rounds {
        let wrap = |e: Error| Error::Stage {
            stage: k,
            source: Box::new(e),
        };
        let stage = if k == 1 {
            info!("stage 1: training on the independent coupling");
            let outcome = train_flow(&Coupling::Independent(&config.target), &config.first, init.clone()).map_err(wrap)?;
            Stage {
                index: 1,
                outcome,
                pairs: None,
            }
        } else {
            let prev = &stages[k - 2].outcome;
            info!("stage {k}: generating {} pairs", config.pairs.count);
            let field = prev.field().map_err(wrap)?;
            let pair_cfg = PairGenConfig {
                seed: config.pairs.seed.wrapping_add(k as u64 - 1),
                ..config.pairs.clone()
            };
            let pairs = generate_pairs(&field, &pair_cfg, sha256(&prev.checkpoint.to_bytes())).map_err(wrap)?;
            let init = if config.init_from_previous {
                Init::Checkpoint {
                    checkpoint: Checkpoint::fresh(prev.checkpoint.ema.clone()),
                    parameterization: prev.spec.parameterization,
                }
            } else {
                Init::Fresh
            };
            info!("stage {k}: training on {} pairs", pairs.len());
            let outcome = train_flow(&Coupling::Paired(&pairs), &config.later, init).map_err(wrap)?;
            Stage {
                index: k,
                outcome,
                pairs: Some(pairs),
            }
        };
        if let Some(dir) = out {
            persist(dir, &stage, &mut files).map_err(wrap)?;
        }
        stages.push(stage);
    }
    Ok(ReflowRun { stages, files })
}

/// Continues training `spec`/`checkpoint` on a mixture of stored synthetic
/// couples (probability `p`) and real data with inverted noise.
pub fn finetune_with_real(
    spec: NeuralSpec,
    checkpoint: Checkpoint,
    synthetic: Option<&PairDataset>,
    real: &PairDataset,
    p: f64,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if real.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs at least one real pair".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mixing probability must lie in [0, 1], got {p}")));
    }
    let init = Init::Checkpoint {
        checkpoint,
        parameterization: spec.parameterization,
    };
    let coupling = match synthetic {
        Some(synthetic) => Coupling::Mixed { synthetic, real, p },
        None if p == 0.0 => Coupling::Paired(real),
        None => return Err(Error::Config(format!("p = {p} draws synthetic pairs but none were given"))),
    };
    train_flow(&coupling, config, init)
}
