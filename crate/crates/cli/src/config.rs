//! Run configuration: one TOML file, one section per subcommand.

use std::path::{Path, PathBuf};

use reflow_core::losses::LossConfig;
use reflow_core::models::{GmmSpec, Parameterization};
use reflow_core::pipeline::{EvalConfig, PairGenConfig, ReflowConfig, TrainConfig};
use reflow_core::samplers::{Solver, UpdateRule};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every seed of the section being run.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_target")]
    pub target: GmmSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub reflow: ReflowSection,
    #[serde(default)]
    pub generate_pairs: PairsSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub invert: InvertSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub profile_loss: ProfileSection,
}

fn default_target() -> GmmSpec {
    ReflowConfig::default().target
}

/// A stored checkpoint and how to read its network output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub checkpoint: PathBuf,
    #[serde(default = "v_pred")]
    pub parameterization: Parameterization,
}

fn v_pred() -> Parameterization {
    Parameterization::VPred
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Train on stored pairs instead of the independent coupling.
    pub pairs: Option<PathBuf>,
    /// Continue from a checkpoint instead of a fresh initialization.
    pub init: Option<ModelRef>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflowSection {
    pub rounds: usize,
    pub first: TrainConfig,
    pub later: TrainConfig,
    pub pairs: PairGenConfig,
    pub init_from_previous: bool,
}

impl Default for ReflowSection {
    fn default() -> Self {
        let d = ReflowConfig::default();
        Self {
            rounds: d.rounds,
            first: d.first,
            later: d.later,
            pairs: d.pairs,
            init_from_previous: d.init_from_previous,
        }
    }
}

impl ReflowSection {
    pub fn with_target(&self, target: GmmSpec) -> ReflowConfig {
        ReflowConfig {
            target,
            rounds: self.rounds,
            first: self.first.clone(),
            later: self.later.clone(),
            pairs: self.pairs.clone(),
            init_from_previous: self.init_from_previous,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsSection {
    pub model: Option<ModelRef>,
    pub config: PairGenConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub model: Option<ModelRef>,
    pub count: usize,
    pub nfe: usize,
    pub solver: Solver,
    pub rule: UpdateRule,
    pub seed: u64,
    pub record_trajectories: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            model: None,
            count: 1000,
            nfe: 1,
            solver: Solver::Euler,
            rule: UpdateRule::Default,
            seed: 0,
            record_trajectories: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSection {
    pub model: Option<ModelRef>,
    /// CSV of real samples with a header row; absent means `count` draws
    /// from the target.
    pub data: Option<PathBuf>,
    pub count: usize,
    pub nfe: usize,
    pub solver: Solver,
    pub rule: UpdateRule,
    pub seed: u64,
}

impl Default for InvertSection {
    fn default() -> Self {
        Self {
            model: None,
            data: None,
            count: 10_000,
            nfe: 15,
            solver: Solver::Heun,
            rule: UpdateRule::Default,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub model: Option<ModelRef>,
    /// Pairs for the intersection probe and loss profile.
    pub pairs: Option<PathBuf>,
    /// Recorded trajectories to measure straightness on instead of fresh ones.
    pub trajectories: Option<PathBuf>,
    pub config: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub model: Option<ModelRef>,
    /// Profile on stored pairs; absent means the independent coupling, with
    /// the analytic lower bound.
    pub pairs: Option<PathBuf>,
    pub rows: usize,
    pub bins: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            model: None,
            pairs: None,
            rows: 2000,
            bins: 20,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|source| CliError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.target.validate().map_err(|e| CliError::Config(format!("[target]: {e}")))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Makes relative input paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_model = |m: &mut Option<ModelRef>| {
            if let Some(m) = m {
                fix(&mut m.checkpoint);
            }
        };
        fix_model(&mut self.train.init);
        fix_model(&mut self.generate_pairs.model);
        fix_model(&mut self.sample.model);
        fix_model(&mut self.invert.model);
        fix_model(&mut self.diagnose.model);
        fix_model(&mut self.profile_loss.model);
        for p in [
            &mut self.train.pairs,
            &mut self.invert.data,
            &mut self.diagnose.pairs,
            &mut self.diagnose.trajectories,
            &mut self.profile_loss.pairs,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(out) = &mut self.out_dir {
            fix(out);
        }
    }
}

/// Fetches a section's model reference or reports which one is missing.
pub fn require_model<'a>(model: &'a Option<ModelRef>, section: &str) -> Result<&'a ModelRef> {
    model
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("[{section}] needs model.checkpoint")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.target, default_target());
        assert_eq!(cfg.sample.nfe, 1);
        assert_eq!(cfg.reflow.rounds, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("seeed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train.config]\nbatchsize = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[sample]\nnfe = 1\nsover = \"heun\"").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
            seed = 9
            [target]
            weights = [1.0]
            means = [[0.0, 0.0]]
            variances = [1.0]
            [train.config]
            iterations = 3
            [train.config.adam]
            ema_decay = 0.5
            [sample]
            model = { checkpoint = "a.rfpp" }
            rule = "new"
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.train.config.iterations, 3);
        assert_eq!(cfg.train.config.adam.ema_decay, 0.5);
        assert_eq!(cfg.sample.rule, UpdateRule::New);
        assert_eq!(cfg.sample.model.unwrap().parameterization, Parameterization::VPred);
    }

    #[test]
    fn relative_inputs_follow_the_config_file() {
        let mut cfg: RunConfig = toml::from_str("[sample]\nmodel = { checkpoint = \"m.rfpp\" }").unwrap();
        cfg.resolve_paths(Path::new("/runs/x"));
        assert_eq!(cfg.sample.model.unwrap().checkpoint, Path::new("/runs/x/m.rfpp"));
    }
}
