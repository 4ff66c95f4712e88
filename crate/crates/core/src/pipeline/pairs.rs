//! `RFPR1` pair files and the integrations that fill them.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "RFPR1"
//! u32         flags: bit 0 = noise omitted, bit 1 = real data with inverted noise
//! u64         dimension d
//! u64         record count n
//! u64         NFE of the integration that produced the records
//! u8          solver id (0 = euler, 1 = heun)
//! u8          update rule id (0 = default, 1 = new)
//! u8 x 32     SHA-256 of the source checkpoint file
//! [u64]       master noise seed                      (noise omitted only)
//! n records:  f64 x d  x, then f64 x d  z            (full)
//!             u64 stream index, then f64 x d  x      (noise omitted)
//! ```

use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::diagnostics::{noise_statistics, NoiseStats};
use crate::error::{Error, Result};
use crate::models::VelocityField;
use crate::samplers::{integrate, Solver, SolverConfig, TimeSchedule, UpdateRule};
use crate::tensor::Tensor;

pub const PAIR_MAGIC: &[u8; 5] = b"RFPR1";
const FLAG_NOISE_OMITTED: u32 = 1;
const FLAG_REAL_INVERTED: u32 = 2;

/// The standard normal draw of record `index` under master `seed`: ChaCha8
/// keyed by the seed, on stream `index`.
pub fn record_noise(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Regeneration key for noise that is not stored explicitly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub indices: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    /// `x` generated from stored noise `z`.
    Synthetic,
    /// Real `x` with noise obtained by inversion.
    RealInverted,
}

/// Stored couples `(x, z)`; row `i` of `x` belongs to row `i` of `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub source: PairSource,
    pub nfe: u64,
    pub solver: Solver,
    pub rule: UpdateRule,
    pub source_checksum: [u8; 32],
    pub x: Tensor,
    pub z: Tensor,
    /// Present when `z` can be regenerated and need not be written.
    pub noise_key: Option<NoiseKey>,
}

impl PairDataset {
    pub fn dim(&self) -> usize {
        self.x.last_dim()
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = (self.len(), self.dim());
        let mut flags = 0;
        if self.noise_key.is_some() {
            flags |= FLAG_NOISE_OMITTED;
        }
        if self.source == PairSource::RealInverted {
            flags |= FLAG_REAL_INVERTED;
        }
        let mut w = ByteWriter::new();
        w.bytes(PAIR_MAGIC);
        w.u32(flags);
        w.u64(d as u64);
        w.u64(n as u64);
        w.u64(self.nfe);
        w.u8(self.solver.id());
        w.u8(self.rule.id());
        w.bytes(&self.source_checksum);
        match &self.noise_key {
            Some(key) => {
                w.u64(key.seed);
                for (i, &index) in key.indices.iter().enumerate() {
                    w.u64(index);
                    w.f64s(self.x.row(i));
                }
            }
            None => {
                for i in 0..n {
                    w.f64s(self.x.row(i));
                    w.f64s(self.z.row(i));
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "pair file");
        r.expect_magic(PAIR_MAGIC)?;
        let flags = r.u32()?;
        if flags & !(FLAG_NOISE_OMITTED | FLAG_REAL_INVERTED) != 0 {
            return Err(Error::Format(format!("pair file has unknown flags {flags:#x}")));
        }
        let d = r.u64()? as usize;
        let n = r.u64()? as usize;
        if d == 0 || n == 0 {
            return Err(Error::Format(format!("pair file header lists d={d}, n={n}")));
        }
        let nfe = r.u64()?;
        let solver = Solver::from_id(r.u8()?)?;
        let rule = UpdateRule::from_id(r.u8()?)?;
        let source_checksum: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
        let source = if flags & FLAG_REAL_INVERTED != 0 {
            PairSource::RealInverted
        } else {
            PairSource::Synthetic
        };
        let (mut xs, mut zs) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
        let noise_key = if flags & FLAG_NOISE_OMITTED != 0 {
            let seed = r.u64()?;
            let mut indices = Vec::with_capacity(n);
            for _ in 0..n {
                let index = r.u64()?;
                indices.push(index);
                xs.extend(r.f64s(d)?);
                zs.extend(record_noise(seed, index, d));
            }
            Some(NoiseKey { seed, indices })
        } else {
            for _ in 0..n {
                xs.extend(r.f64s(d)?);
                zs.extend(r.f64s(d)?);
            }
            None
        };
        r.finish()?;
        Ok(Self {
            source,
            nfe,
            solver,
            rule,
            source_checksum,
            x: Tensor::new(vec![n, d], xs)?,
            z: Tensor::new(vec![n, d], zs)?,
            noise_key,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairGenConfig {
    pub count: usize,
    pub steps: usize,
    pub solver: Solver,
    pub rule: UpdateRule,
    pub seed: u64,
    /// Write noise as stream indices instead of values.
    pub omit_noise: bool,
    /// Records integrated together; affects speed only.
    pub chunk: usize,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        Self {
            count: 100_000,
            steps: 64,
            solver: Solver::Heun,
            rule: UpdateRule::Default,
            seed: 0,
            omit_noise: false,
            chunk: 1024,
        }
    }
}

/// Integrates rows of `start` chunk by chunk, dropping rows whose integration
/// blows up. Returns kept row indices and their endpoints, in input order.
fn integrate_rows(
    field: &dyn VelocityField,
    start: &Tensor,
    schedule: &TimeSchedule,
    solver: &SolverConfig,
    chunk: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (n, d) = (start.rows(), start.last_dim());
    let chunks: Vec<(usize, usize)> = (0..n).step_by(chunk.max(1)).map(|s| (s, (s + chunk.max(1)).min(n))).collect();
    let results = chunks
        .par_iter()
        .map(|&(lo, hi)| -> Result<Vec<(usize, Vec<f64>)>> {
            let idx: Vec<usize> = (lo..hi).collect();
            let block = start.gather_rows(&idx);
            match integrate(field, &block, schedule, solver, false) {
                Ok(out) if out.z_end.is_finite() => {
                    Ok(idx.into_iter().zip(out.z_end.row_iter().map(<[f64]>::to_vec)).collect())
                }
                Ok(_) | Err(Error::Integration { .. }) => {
                    let mut kept = Vec::new();
                    for i in idx {
                        match integrate(field, &start.gather_rows(&[i]), schedule, solver, false) {
                            Ok(out) if out.z_end.is_finite() => kept.push((i, out.z_end.into_data())),
                            Ok(_) | Err(Error::Integration { .. }) => {
                                warn!("record {i}: integration diverged, record skipped")
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    Ok(kept)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut kept = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for (i, row) in results.into_iter().flatten() {
        kept.push(i);
        data.extend(row);
    }
    Ok((kept, data))
}

/// Draws `count` noise vectors from per-record streams, integrates each to
/// data and stores `(endpoint, noise)`.
pub fn generate_pairs(
    field: &dyn VelocityField,
    config: &PairGenConfig,
    source_checksum: [u8; 32],
) -> Result<PairDataset> {
    if config.count == 0 {
        return Err(Error::InvalidInput("pair generation needs n >= 1".into()));
    }
    let d = field.dim();
    let z: Vec<f64> = (0..config.count as u64)
        .into_par_iter()
        .flat_map_iter(|i| record_noise(config.seed, i, d))
        .collect();
    let z = Tensor::new(vec![config.count, d], z)?;
    let solver = SolverConfig::generate(config.solver, config.rule);
    let schedule = TimeSchedule::generation(config.steps)?;
    let (kept, x) = integrate_rows(field, &z, &schedule, &solver, config.chunk)?;
    if kept.is_empty() {
        return Err(Error::InvalidInput("every pair integration diverged".into()));
    }
    if kept.len() < config.count {
        warn!("{} of {} records skipped", config.count - kept.len(), config.count);
    }
    Ok(PairDataset {
        source: PairSource::Synthetic,
        nfe: config.solver.nfe(config.steps) as u64,
        solver: config.solver,
        rule: config.rule,
        source_checksum,
        x: Tensor::new(vec![kept.len(), d], x)?,
        z: z.gather_rows(&kept),
        noise_key: config.omit_noise.then(|| NoiseKey {
            seed: config.seed,
            indices: kept.iter().map(|&i| i as u64).collect(),
        }),
    })
}

/// Inverted pairs together with the quality of their noise.
#[derive(Clone, Debug)]
pub struct InvertedPairs {
    pub pairs: PairDataset,
    pub stats: NoiseStats,
}

/// Integrates real samples backwards to noise and pairs them up.
pub fn invert_real_data(
    field: &dyn VelocityField,
    samples: &Tensor,
    steps: usize,
    solver: Solver,
    rule: UpdateRule,
    source_checksum: [u8; 32],
) -> Result<InvertedPairs> {
    if steps == 0 {
        return Err(Error::InvalidInput("inversion needs at least one step (NFE >= 1)".into()));
    }
    let samples = samples.as_matrix();
    if samples.rows() == 0 {
        return Err(Error::InvalidInput("inversion needs at least one sample".into()));
    }
    let d = field.dim();
    let schedule = TimeSchedule::inversion(steps)?;
    let (kept, z) = integrate_rows(field, &samples, &schedule, &SolverConfig::invert(solver, rule), 1024)?;
    if kept.is_empty() {
        return Err(Error::InvalidInput("every inversion diverged".into()));
    }
    let z = Tensor::new(vec![kept.len(), d], z)?;
    let stats = noise_statistics(&z, 8, 40)?;
    Ok(InvertedPairs {
        pairs: PairDataset {
            source: PairSource::RealInverted,
            nfe: solver.nfe(steps) as u64,
            solver,
            rule,
            source_checksum,
            x: samples.gather_rows(&kept),
            z,
            noise_key: None,
        },
        stats,
    })
}
