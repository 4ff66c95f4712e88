//! One-call evaluation of a trained field against its target mixture.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pairs::{record_noise, PairDataset};
use crate::diagnostics::{
    intersection_probe, noise_statistics, reconstruction_error, sliced_wasserstein, straightness, CountedValue,
    DiagnosticsReport, ReconstructionRow, SlicedWassersteinRow,
};
use crate::error::{Error, Result};
use crate::losses::{loss_profile, LossSpec};
use crate::models::{GmmSpec, VelocityField};
use crate::samplers::{integrate, Solver, SolverConfig, TimeSchedule, Trajectory, UpdateRule};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fresh target samples used for distances, inversion and reconstruction.
    pub samples: usize,
    pub trajectories: usize,
    /// Euler steps of the recorded trajectories.
    pub trajectory_steps: usize,
    /// Euler NFEs at which generated samples are compared to the target.
    pub generation_nfe: Vec<usize>,
    /// Euler NFEs of the inversion/regeneration sweep.
    pub reconstruction_nfe: Vec<usize>,
    pub inversion_steps: usize,
    pub inversion_solver: Solver,
    pub projections: usize,
    pub probe_time: f64,
    pub max_lag: usize,
    pub histogram_bins: usize,
    /// Loss-profile bins; 0 skips the profile.
    pub profile_bins: usize,
    pub profile_rows: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            trajectories: 1000,
            trajectory_steps: 32,
            generation_nfe: vec![1, 2, 4, 8],
            reconstruction_nfe: vec![1, 2, 4, 8],
            inversion_steps: 8,
            inversion_solver: Solver::Heun,
            projections: 64,
            probe_time: 0.5,
            max_lag: 8,
            histogram_bins: 40,
            profile_bins: 20,
            profile_rows: 2000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.trajectories == 0 || self.projections == 0 {
            return Err(Error::Config("samples, trajectories and projections must be positive".into()));
        }
        if self.trajectory_steps < 2 {
            return Err(Error::Config("straightness needs at least 2 trajectory steps".into()));
        }
        if self.generation_nfe.contains(&0) || self.reconstruction_nfe.contains(&0) || self.inversion_steps == 0 {
            return Err(Error::Config("every NFE must be at least 1".into()));
        }
        if !(self.probe_time > 0.0 && self.probe_time < 1.0) {
            return Err(Error::Config(format!("probe_time must lie in (0, 1), got {}", self.probe_time)));
        }
        Ok(())
    }

    fn noise_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    fn projection_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
}

/// The report plus the recorded trajectories it measured.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: DiagnosticsReport,
    pub trajectories: Trajectory,
}

fn noise_rows(seed: u64, n: usize, d: usize) -> Result<Tensor> {
    Tensor::new(vec![n, d], (0..n as u64).flat_map(|i| record_noise(seed, i, d)).collect())
}

fn euler() -> SolverConfig {
    SolverConfig::generate(Solver::Euler, UpdateRule::Default)
}

/// Samples `n` rows from `target` on the evaluation seed.
pub fn evaluation_samples(target: &GmmSpec, n: usize, seed: u64) -> Tensor {
    target.sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Measures `field` against `target`. When `pairs` is given the probe and
/// loss profile use them; otherwise the profile scores the independent
/// coupling and reports the analytic lower bound.
pub fn evaluate(
    field: &dyn VelocityField,
    target: &GmmSpec,
    pairs: Option<&PairDataset>,
    config: &EvalConfig,
    model: &str,
) -> Result<Evaluation> {
    config.validate()?;
    let d = field.dim();
    if target.dim() != d {
        return Err(Error::shape(&[d], &[target.dim()]));
    }
    let real = evaluation_samples(target, config.samples, config.seed);
    let mut report = DiagnosticsReport {
        model: model.to_string(),
        seeds: BTreeMap::from([
            ("samples".to_string(), config.seed),
            ("noise".to_string(), config.noise_seed()),
            ("projections".to_string(), config.projection_seed()),
        ]),
        ..DiagnosticsReport::default()
    };

    let z = noise_rows(config.noise_seed(), config.trajectories, d)?;
    let schedule = TimeSchedule::generation(config.trajectory_steps)?;
    let trajectories = integrate(field, &z, &schedule, &euler(), true)?
        .trajectory
        .expect("recorded");
    report.straightness = Some(CountedValue {
        value: straightness(&trajectories)?,
        count: trajectories.count(),
    });

    let z = noise_rows(config.noise_seed(), config.samples, d)?;
    for &nfe in &config.generation_nfe {
        let x = integrate(field, &z, &TimeSchedule::generation(nfe)?, &euler(), false)?.z_end;
        report.sliced_wasserstein.push(SlicedWassersteinRow {
            label: format!("euler_nfe{nfe}"),
            value: sliced_wasserstein(&x, &real, config.projections, config.projection_seed())?,
            count_a: x.rows(),
            count_b: real.rows(),
            projections: config.projections,
            seed: config.projection_seed(),
        });
    }

    for &nfe in &config.reconstruction_nfe {
        report.reconstruction.push(ReconstructionRow {
            nfe,
            steps: nfe,
            mse: reconstruction_error(field, &real, nfe, euler())?,
            count: real.rows(),
        });
    }

    let inv = SolverConfig::invert(config.inversion_solver, UpdateRule::Default);
    let noise = integrate(field, &real, &TimeSchedule::inversion(config.inversion_steps)?, &inv, false)?.z_end;
    report.noise = Some(noise_statistics(&noise, config.max_lag, config.histogram_bins)?);

    if let Some(pairs) = pairs.filter(|p| p.len() >= 2) {
        let n = pairs.len().min(config.samples);
        let rows: Vec<usize> = (0..n).collect();
        let shifted: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let probe = intersection_probe(
            &pairs.x.gather_rows(&rows),
            &pairs.z.gather_rows(&rows),
            &pairs.x.gather_rows(&shifted),
            config.probe_time,
            config.max_lag,
        )?;
        report.probe = Some(probe.stats);
    }

    if config.profile_bins > 0 {
        let loss = LossSpec::squared_l2();
        report.loss_profile = match pairs {
            Some(p) => {
                let rows: Vec<usize> = (0..p.len().min(config.profile_rows)).collect();
                loss_profile(field, &loss, &p.x.gather_rows(&rows), &p.z.gather_rows(&rows), config.profile_bins, None)?
            }
            None => {
                let n = config.profile_rows.min(config.samples);
                let rows: Vec<usize> = (0..n).collect();
                loss_profile(
                    field,
                    &loss,
                    &real.gather_rows(&rows),
                    &z.gather_rows(&rows),
                    config.profile_bins,
                    Some(target),
                )?
            }
        };
    }
    Ok(Evaluation { report, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EvalConfig {
        EvalConfig {
            samples: 400,
            trajectories: 50,
            trajectory_steps: 8,
            profile_rows: 100,
            profile_bins: 4,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn exact_field_report_is_consistent() {
        let target = GmmSpec::new(vec![0.5, 0.5], vec![vec![1.0, 1.0], vec![-1.0, -1.0]], vec![0.3, 0.3]).unwrap();
        let eval = evaluate(&target, &target, None, &small(), "analytic").unwrap();
        let r = &eval.report;
        assert_eq!(r.straightness.as_ref().unwrap().count, 50);
        assert_eq!(eval.trajectories.count(), 50);
        assert_eq!(r.sliced_wasserstein.len(), 4);
        assert_eq!(r.reconstruction.iter().map(|r| r.nfe).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
        assert!(r.probe.is_none());
        // The exact posterior field has no removable loss.
        for bin in &r.loss_profile {
            assert!(bin.residual().unwrap().abs() < 1e-9 * bin.mean.max(1.0));
        }
        let again = evaluate(&target, &target, None, &small(), "analytic").unwrap();
        assert_eq!(r.to_json().unwrap(), again.report.to_json().unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        let target = GmmSpec::gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let cfg = EvalConfig {
            probe_time: 1.0,
            ..small()
        };
        assert!(matches!(evaluate(&target, &target, None, &cfg, "m"), Err(Error::Config(_))));
        let cfg = EvalConfig {
            generation_nfe: vec![0],
            ..small()
        };
        assert!(evaluate(&target, &target, None, &cfg, "m").is_err());
    }
}
