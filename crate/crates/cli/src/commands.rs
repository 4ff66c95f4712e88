use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use clap::ValueEnum;
use log::info;
use reflow_core::diagnostics::{straightness, CountedValue};
use reflow_core::losses::{loss_profile, LossSpec};
use reflow_core::models::{NeuralField, NeuralSpec, PosteriorMean, VelocityField};
use reflow_core::pipeline::{
    evaluate, evaluation_samples, generate_pairs, history_csv, invert_real_data, record_noise, reflow, train_flow,
    Coupling, Init, PairDataset,
};
use reflow_core::samplers::{integrate, SolverConfig, TimeSchedule, Trajectory};
use reflow_core::diagnostics::profile_csv;
use reflow_core::{Checkpoint, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{require_model, ModelRef, RunConfig};
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Train,
    Reflow,
    GeneratePairs,
    Sample,
    Invert,
    Diagnose,
    ProfileLoss,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Reflow => "reflow",
            Command::GeneratePairs => "generate-pairs",
            Command::Sample => "sample",
            Command::Invert => "invert",
            Command::Diagnose => "diagnose",
            Command::ProfileLoss => "profile-loss",
        }
    }
}

/// What a subcommand produced, for the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub nfe: Option<u64>,
    pub field_evaluations: Option<u64>,
    pub files: Vec<PathBuf>,
}

/// Replaces every seed of the section `command` reads.
pub fn apply_seed(cfg: &mut RunConfig, command: Command, seed: u64) {
    match command {
        Command::Train => cfg.train.config.seed = seed,
        Command::Reflow => {
            cfg.reflow.first.seed = seed;
            cfg.reflow.later.seed = seed.wrapping_add(1);
            cfg.reflow.pairs.seed = seed.wrapping_add(2);
        }
        Command::GeneratePairs => cfg.generate_pairs.config.seed = seed,
        Command::Sample => cfg.sample.seed = seed,
        Command::Invert => cfg.invert.seed = seed,
        Command::Diagnose => cfg.diagnose.config.seed = seed,
        Command::ProfileLoss => cfg.profile_loss.seed = seed,
    }
}

/// The part of the configuration a subcommand depends on.
pub fn effective_config(cfg: &RunConfig, command: Command) -> Result<serde_json::Value> {
    fn pack<T: Serialize>(cfg: &RunConfig, key: &str, section: &T) -> Result<serde_json::Value> {
        let mut map = serde_json::Map::new();
        map.insert("target".into(), to_value(&cfg.target)?);
        map.insert(key.into(), to_value(section)?);
        Ok(serde_json::Value::Object(map))
    }
    match command {
        Command::Train => pack(cfg, "train", &cfg.train),
        Command::Reflow => pack(cfg, "reflow", &cfg.reflow),
        Command::GeneratePairs => pack(cfg, "generate_pairs", &cfg.generate_pairs),
        Command::Sample => pack(cfg, "sample", &cfg.sample),
        Command::Invert => pack(cfg, "invert", &cfg.invert),
        Command::Diagnose => pack(cfg, "diagnose", &cfg.diagnose),
        Command::ProfileLoss => pack(cfg, "profile_loss", &cfg.profile_loss),
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| CliError::Core(e.into()))
}

pub fn run(command: Command, cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let mut outcome = match command {
        Command::Train => train(cfg, dir)?,
        Command::Reflow => run_reflow(cfg, dir)?,
        Command::GeneratePairs => pairs(cfg, dir)?,
        Command::Sample => sample(cfg, dir)?,
        Command::Invert => invert(cfg, dir)?,
        Command::Diagnose => diagnose(cfg, dir)?,
        Command::ProfileLoss => profile(cfg, dir)?,
    };
    outcome.config = effective_config(cfg, command)?;
    Ok(outcome)
}

fn write(path: PathBuf, bytes: &[u8], files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    files.push(path);
    Ok(())
}

struct LoadedModel {
    field: NeuralField,
    checksum: [u8; 32],
    label: String,
}

fn load_model(model: &ModelRef) -> Result<LoadedModel> {
    let bytes = std::fs::read(&model.checkpoint).map_err(|e| CliError::io(&model.checkpoint, e))?;
    let checkpoint = Checkpoint::from_bytes(&bytes)?;
    let data_dim = *checkpoint.ema.widths().last().expect("checkpoints have layers");
    let spec = NeuralSpec {
        data_dim,
        parameterization: model.parameterization,
    };
    Ok(LoadedModel {
        field: NeuralField::new(spec, checkpoint.ema)?,
        checksum: Sha256::digest(&bytes).into(),
        label: model
            .checkpoint
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

fn check_target_dim(cfg: &RunConfig, field: &dyn VelocityField) -> Result<()> {
    if cfg.target.dim() != field.dim() {
        return Err(CliError::Config(format!(
            "target has dimension {} but the model has {}",
            cfg.target.dim(),
            field.dim()
        )));
    }
    Ok(())
}

fn noise_rows(seed: u64, n: usize, d: usize) -> Result<Tensor> {
    Ok(Tensor::new(vec![n, d], (0..n as u64).flat_map(|i| record_noise(seed, i, d)).collect())?)
}

/// Counts calls to the wrapped field; every call is one batched evaluation.
struct Counted<'a> {
    field: &'a dyn VelocityField,
    calls: AtomicU64,
}

impl VelocityField for Counted<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn velocity(&self, z: &Tensor, t: f64) -> reflow_core::Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.field.velocity(z, t)
    }
}

fn csv_bytes(rows: &Tensor) -> Result<Vec<u8>> {
    let rows = rows.as_matrix();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (0..rows.last_dim()).map(|j| format!("x{j}")).collect();
    let csv_err = |e: csv::Error| CliError::Numeric(format!("csv encoding: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Numeric(format!("csv encoding: {e}")))
}

fn read_csv(path: &Path) -> Result<Tensor> {
    let data_err = |reason: String| CliError::Data {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| data_err(e.to_string()))?;
    let d = reader.headers().map_err(|e| data_err(e.to_string()))?.len();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(e.to_string()))?;
        if record.len() != d {
            return Err(data_err(format!("row {} has {} columns, header has {d}", i + 1, record.len())));
        }
        for field in &record {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| data_err(format!("row {}: {e}", i + 1)))?,
            );
        }
    }
    if values.is_empty() {
        return Err(data_err("no rows".into()));
    }
    Ok(Tensor::new(vec![values.len() / d, d], values)?)
}

fn train(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let s = &cfg.train;
    let pairs = s.pairs.as_deref().map(PairDataset::load).transpose()?;
    let coupling = match &pairs {
        Some(p) => Coupling::Paired(p),
        None => Coupling::Independent(&cfg.target),
    };
    let init = match &s.init {
        Some(m) => Init::Checkpoint {
            checkpoint: Checkpoint::load(&m.checkpoint)?,
            parameterization: m.parameterization,
        },
        None => Init::Fresh,
    };
    info!("training for {} iterations", s.config.iterations);
    let out = train_flow(&coupling, &s.config, init)?;
    let mut files = Vec::new();
    for (it, snap) in &out.snapshots {
        write(dir.join(format!("checkpoint_iter{it}.rfpp")), &snap.to_bytes(), &mut files)?;
    }
    write(dir.join("checkpoint.rfpp"), &out.checkpoint.to_bytes(), &mut files)?;
    write(dir.join("loss.csv"), history_csv(&out.history).as_bytes(), &mut files)?;
    Ok(Outcome {
        seeds: BTreeMap::from([("train".to_string(), s.config.seed)]),
        files,
        ..Outcome::default()
    })
}

fn run_reflow(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let config = cfg.reflow.with_target(cfg.target.clone());
    let run = reflow(&config, Init::Fresh, Some(dir))?;
    let mut seeds = BTreeMap::from([
        ("first".to_string(), config.first.seed),
        ("later".to_string(), config.later.seed),
    ]);
    for k in 2..=config.rounds {
        seeds.insert(format!("pairs_stage{k}"), config.pairs.seed.wrapping_add(k as u64 - 1));
    }
    Ok(Outcome {
        seeds,
        nfe: (config.rounds > 1).then(|| config.pairs.solver.nfe(config.pairs.steps) as u64),
        files: run.files,
        ..Outcome::default()
    })
}

fn pairs(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let s = &cfg.generate_pairs;
    let model = load_model(require_model(&s.model, "generate_pairs")?)?;
    let pairs = generate_pairs(&model.field, &s.config, model.checksum)?;
    let mut files = Vec::new();
    write(dir.join("pairs.rfpr"), &pairs.to_bytes(), &mut files)?;
    Ok(Outcome {
        seeds: BTreeMap::from([("pairs".to_string(), s.config.seed)]),
        nfe: Some(pairs.nfe),
        files,
        ..Outcome::default()
    })
}

fn sample(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let s = &cfg.sample;
    let model = load_model(require_model(&s.model, "sample")?)?;
    if s.count == 0 {
        return Err(CliError::Config("[sample] count must be at least 1".into()));
    }
    let steps = s.solver.steps_for_nfe(s.nfe)?;
    let counted = Counted {
        field: &model.field,
        calls: AtomicU64::new(0),
    };
    let z = noise_rows(s.seed, s.count, model.field.dim())?;
    let solver = SolverConfig::generate(s.solver, s.rule);
    let result = integrate(&counted, &z, &TimeSchedule::generation(steps)?, &solver, s.record_trajectories)?;
    let calls = counted.calls.load(Ordering::Relaxed);
    if calls != s.nfe as u64 || result.nfe != s.nfe {
        return Err(CliError::Numeric(format!(
            "expected {} field evaluations, made {calls}",
            s.nfe
        )));
    }
    let mut files = Vec::new();
    write(dir.join("samples.csv"), &csv_bytes(&result.z_end)?, &mut files)?;
    if let Some(traj) = &result.trajectory {
        write(dir.join("trajectories.rftj"), &traj.to_bytes(), &mut files)?;
    }
    Ok(Outcome {
        seeds: BTreeMap::from([("sample".to_string(), s.seed)]),
        nfe: Some(s.nfe as u64),
        field_evaluations: Some(calls),
        files,
        ..Outcome::default()
    })
}

fn invert(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let s = &cfg.invert;
    let model = load_model(require_model(&s.model, "invert")?)?;
    let mut seeds = BTreeMap::new();
    let samples = match &s.data {
        Some(path) => read_csv(path)?,
        None => {
            check_target_dim(cfg, &model.field)?;
            seeds.insert("invert".to_string(), s.seed);
            evaluation_samples(&cfg.target, s.count, s.seed)
        }
    };
    let steps = s.solver.steps_for_nfe(s.nfe)?;
    let inv = invert_real_data(&model.field, &samples, steps, s.solver, s.rule, model.checksum)?;
    let mut files = Vec::new();
    write(dir.join("inverted.rfpr"), &inv.pairs.to_bytes(), &mut files)?;
    let stats = serde_json::to_string_pretty(&inv.stats).map_err(reflow_core::Error::from)?;
    write(dir.join("inversion_noise.json"), stats.as_bytes(), &mut files)?;
    Ok(Outcome {
        seeds,
        nfe: Some(inv.pairs.nfe),
        files,
        ..Outcome::default()
    })
}

fn diagnose(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let s = &cfg.diagnose;
    let model = load_model(require_model(&s.model, "diagnose")?)?;
    check_target_dim(cfg, &model.field)?;
    let pairs = s.pairs.as_deref().map(PairDataset::load).transpose()?;
    let mut eval = evaluate(&model.field, &cfg.target, pairs.as_ref(), &s.config, &model.label)?;
    if let Some(path) = &s.trajectories {
        let traj = Trajectory::load(path)?;
        eval.report.straightness = Some(CountedValue {
            value: straightness(&traj)?,
            count: traj.count(),
        });
    }
    let files = eval.report.write(dir, "report")?;
    Ok(Outcome {
        seeds: eval.report.seeds.clone(),
        files,
        ..Outcome::default()
    })
}

fn profile(cfg: &RunConfig, dir: &Path) -> Result<Outcome> {
    let s = &cfg.profile_loss;
    let model = load_model(require_model(&s.model, "profile_loss")?)?;
    let d = model.field.dim();
    let loss = LossSpec::from_config(&s.loss, d)?;
    let mut seeds = BTreeMap::new();
    let bins = match &s.pairs {
        Some(path) => {
            let pairs = PairDataset::load(path)?;
            let rows: Vec<usize> = (0..pairs.len().min(s.rows)).collect();
            loss_profile(&model.field, &loss, &pairs.x.gather_rows(&rows), &pairs.z.gather_rows(&rows), s.bins, None)?
        }
        None => {
            check_target_dim(cfg, &model.field)?;
            seeds.insert("samples".to_string(), s.seed);
            seeds.insert("noise".to_string(), s.seed.wrapping_add(1));
            let x = evaluation_samples(&cfg.target, s.rows, s.seed);
            let z = noise_rows(s.seed.wrapping_add(1), s.rows, d)?;
            let posterior: &dyn PosteriorMean = &cfg.target;
            loss_profile(&model.field, &loss, &x, &z, s.bins, Some(posterior))?
        }
    };
    let mut files = Vec::new();
    write(dir.join("loss_profile.csv"), profile_csv(&bins).as_bytes(), &mut files)?;
    Ok(Outcome {
        seeds,
        files,
        ..Outcome::default()
    })
}
