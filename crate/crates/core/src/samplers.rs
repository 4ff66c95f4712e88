//! ODE integration for generation (`t: 1 -> 0`) and inversion (`t: 0 -> 1`).
//!
//! Trajectory files (`RFTJ1`), little-endian:
//!
//! ```text
//! "RFTJ1"
//! u64                 data dimension d
//! u64                 number of trajectories n
//! u64                 number of recorded states S (schedule length)
//! f64 x S             schedule times
//! f64 x (n*d) x S     states, one [n, d] block per schedule time
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::models::{VelocityField, T_MAX, T_MIN};
use crate::tensor::Tensor;

pub const TRAJECTORY_MAGIC: &[u8; 5] = b"RFTJ1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Euler,
    Heun,
}

impl Solver {
    pub fn id(self) -> u8 {
        match self {
            Solver::Euler => 0,
            Solver::Heun => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Solver::Euler),
            1 => Ok(Solver::Heun),
            other => Err(Error::Format(format!("unknown solver id {other}"))),
        }
    }

    /// Field evaluations used by `steps` steps.
    pub fn nfe(self, steps: usize) -> usize {
        match self {
            Solver::Euler => steps,
            Solver::Heun => (2 * steps).saturating_sub(1),
        }
    }

    /// Steps that spend exactly `nfe` evaluations.
    pub fn steps_for_nfe(self, nfe: usize) -> Result<usize> {
        match self {
            _ if nfe == 0 => Err(Error::InvalidInput("NFE must be at least 1".into())),
            Solver::Euler => Ok(nfe),
            Solver::Heun if nfe % 2 == 1 => Ok(nfe.div_ceil(2)),
            Solver::Heun => Err(Error::InvalidInput(format!(
                "heun spends 2N-1 evaluations for N steps, so NFE {nfe} is unreachable"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    Default,
    /// Interpolate between the current data prediction and the starting point.
    New,
}

impl UpdateRule {
    pub fn id(self) -> u8 {
        match self {
            UpdateRule::Default => 0,
            UpdateRule::New => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(UpdateRule::Default),
            1 => Ok(UpdateRule::New),
            other => Err(Error::Format(format!("unknown update rule id {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Noise to data, decreasing times.
    #[default]
    Generate,
    /// Data to noise, increasing times.
    Invert,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub solver: Solver,
    pub rule: UpdateRule,
    pub direction: Direction,
}

impl SolverConfig {
    pub fn generate(solver: Solver, rule: UpdateRule) -> Self {
        Self {
            solver,
            rule,
            direction: Direction::Generate,
        }
    }

    pub fn invert(solver: Solver, rule: UpdateRule) -> Self {
        Self {
            solver,
            rule,
            direction: Direction::Invert,
        }
    }
}

/// Strictly monotone time grid. Generation grids decrease, inversion grids
/// increase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSchedule {
    times: Vec<f64>,
}

impl TimeSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidInput("a schedule needs at least two times".into()));
        }
        if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Domain(format!("schedule times must lie in [0, 1]: {times:?}")));
        }
        let decreasing = times.windows(2).all(|w| w[1] < w[0]);
        let increasing = times.windows(2).all(|w| w[1] > w[0]);
        if !decreasing && !increasing {
            return Err(Error::InvalidInput(format!("schedule is not strictly monotone: {times:?}")));
        }
        Ok(Self { times })
    }

    /// Default generation grid from `T_MAX` to `T_MIN`: `[T_MAX, 0.8, T_MIN]`
    /// for two steps, uniform spacing otherwise.
    pub fn generation(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput("a schedule needs at least one step".into()));
        }
        if steps == 2 {
            return Self::new(vec![T_MAX, 0.8, T_MIN]);
        }
        Self::new(linspace(T_MAX, T_MIN, steps))
    }

    /// The generation grid reversed.
    pub fn inversion(steps: usize) -> Result<Self> {
        Ok(Self::generation(steps)?.reversed())
    }

    /// Uniform grid over the closed interval, `1 -> 0` or `0 -> 1`.
    pub fn exact(steps: usize, direction: Direction) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput("a schedule needs at least one step".into()));
        }
        let s = Self::new(linspace(1.0, 0.0, steps))?;
        Ok(match direction {
            Direction::Generate => s,
            Direction::Invert => s.reversed(),
        })
    }

    pub fn for_config(steps: usize, direction: Direction) -> Result<Self> {
        match direction {
            Direction::Generate => Self::generation(steps),
            Direction::Invert => Self::inversion(steps),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn direction(&self) -> Direction {
        if self.times[1] < self.times[0] {
            Direction::Generate
        } else {
            Direction::Invert
        }
    }

    pub fn reversed(&self) -> Self {
        Self {
            times: self.times.iter().rev().copied().collect(),
        }
    }
}

fn linspace(from: f64, to: f64, steps: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..=steps)
        .map(|i| from + (to - from) * i as f64 / steps as f64)
        .collect();
    out[steps] = to;
    out
}

/// `z + v(z, t) (t_next - t)`.
pub fn euler_step(field: &dyn VelocityField, z: &Tensor, t: f64, t_next: f64) -> Result<Tensor> {
    let v = field.velocity(z, t)?;
    z.axpy(t_next - t, &v)
}

/// Euler predictor followed by the trapezoidal corrector.
pub fn heun_step(field: &dyn VelocityField, z: &Tensor, t: f64, t_next: f64) -> Result<Tensor> {
    let v = field.velocity(z, t)?;
    let predicted = z.axpy(t_next - t, &v)?;
    let v_next = field.velocity(&predicted, t_next)?;
    let avg = v.zip_map(&v_next, |a, b| 0.5 * (a + b))?;
    z.axpy(t_next - t, &avg)
}

/// `(1 - t_next) x̂ + t_next z_1`.
pub fn new_rule_step(x_hat: &Tensor, z_1: &Tensor, t_next: f64) -> Result<Tensor> {
    x_hat.zip_map(z_1, |x, z| (1.0 - t_next) * x + t_next * z)
}

/// States at every schedule time, the first being the start state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states[0].last_dim()
    }

    pub fn count(&self) -> usize {
        self.states[0].rows()
    }

    /// The recorded states of trajectory `i` as `[S, d]`.
    pub fn path(&self, i: usize) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.states.len() * d);
        for s in &self.states {
            data.extend_from_slice(s.as_matrix().row(i));
        }
        Tensor::from_raw(vec![self.states.len(), d], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(TRAJECTORY_MAGIC);
        w.u64(self.dim() as u64);
        w.u64(self.count() as u64);
        w.u64(self.times.len() as u64);
        w.f64s(&self.times);
        for s in &self.states {
            w.f64s(s.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "trajectory file");
        r.expect_magic(TRAJECTORY_MAGIC)?;
        let d = r.u64()? as usize;
        let n = r.u64()? as usize;
        let s = r.u64()? as usize;
        if d == 0 || n == 0 || s < 2 {
            return Err(Error::Format(format!("trajectory header d={d} n={n} states={s}")));
        }
        let times = r.f64s(s)?;
        let states = (0..s)
            .map(|_| Tensor::new(vec![n, d], r.f64s(n * d)?))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        TimeSchedule::new(times.clone())?;
        Ok(Self { times, states })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct Integration {
    pub z_end: Tensor,
    pub nfe: usize,
    pub trajectory: Option<Trajectory>,
}

/// Runs `config` over `schedule` from `z_start`.
///
/// Heun's corrector is applied on every step except the last one. The new
/// update rule anchors on the starting state: when generating, the next state
/// interpolates the data prediction `z - t v` with the initial noise; when
/// inverting, it interpolates the initial data with the noise prediction
/// `z + (1 - t) v`.
pub fn integrate(
    field: &dyn VelocityField,
    z_start: &Tensor,
    schedule: &TimeSchedule,
    config: &SolverConfig,
    record: bool,
) -> Result<Integration> {
    if schedule.direction() != config.direction {
        return Err(Error::InvalidInput(format!(
            "schedule runs in the {:?} direction but the solver is configured for {:?}",
            schedule.direction(),
            config.direction
        )));
    }
    if z_start.last_dim() != field.dim() {
        return Err(Error::shape(&[field.dim()], &[z_start.last_dim()]));
    }
    let times = schedule.times();
    let last = schedule.steps() - 1;
    let mut z = z_start.clone();
    let mut nfe = 0;
    let mut states = record.then(|| vec![z.clone()]);

    // Point prediction at the far end implied by velocity `v` at `(z, t)`.
    let anchor_target = |z: &Tensor, v: &Tensor, t: f64| -> Result<Tensor> {
        match config.direction {
            Direction::Generate => z.axpy(-t, v),
            Direction::Invert => z.axpy(1.0 - t, v),
        }
    };
    // Interpolation between the start state and the far-end prediction.
    let anchored = |start: &Tensor, target: &Tensor, t_next: f64| -> Result<Tensor> {
        match config.direction {
            Direction::Generate => new_rule_step(target, start, t_next),
            Direction::Invert => new_rule_step(start, target, t_next),
        }
    };
    let advance = |z: &Tensor, v: &Tensor, t: f64, t_next: f64| -> Result<Tensor> {
        match config.rule {
            UpdateRule::Default => z.axpy(t_next - t, v),
            UpdateRule::New => anchored(z_start, &anchor_target(z, v, t)?, t_next),
        }
    };

    for (step, w) in times.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let mut v = field.velocity(&z, t)?;
        nfe += 1;
        if config.solver == Solver::Heun && step < last {
            let predicted = advance(&z, &v, t, t_next)?;
            let v_next = field.velocity(&predicted, t_next)?;
            nfe += 1;
            v = v.zip_map(&v_next, |a, b| 0.5 * (a + b))?;
        }
        z = advance(&z, &v, t, t_next)?;
        if !z.is_finite() {
            return Err(Error::Integration { step });
        }
        if let Some(states) = states.as_mut() {
            states.push(z.clone());
        }
    }
    Ok(Integration {
        z_end: z,
        nfe,
        trajectory: states.map(|states| Trajectory {
            times: times.to_vec(),
            states,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FnField, GmmSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_rows(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn constant(c: Vec<f64>) -> FnField<impl Fn(&Tensor, f64) -> Tensor + Send + Sync> {
        let d = c.len();
        FnField::new(d, move |z: &Tensor, _| {
            let mut out = z.clone();
            for row in out.data_mut().chunks_exact_mut(d) {
                row.copy_from_slice(&c);
            }
            out
        })
    }

    fn generate(solver: Solver, rule: UpdateRule) -> SolverConfig {
        SolverConfig::generate(solver, rule)
    }

    #[test]
    fn default_schedules() {
        assert_eq!(TimeSchedule::generation(2).unwrap().times(), &[0.99999, 0.8, 0.00001]);
        assert_eq!(TimeSchedule::generation(1).unwrap().times(), &[T_MAX, T_MIN]);
        let s = TimeSchedule::generation(4).unwrap();
        assert_eq!(s.steps(), 4);
        assert_eq!(s.times()[0], T_MAX);
        assert_eq!(s.times()[4], T_MIN);
        let gaps: Vec<f64> = s.times().windows(2).map(|w| w[0] - w[1]).collect();
        assert!(gaps.iter().all(|g| (g - gaps[0]).abs() < 1e-15));
        assert_eq!(TimeSchedule::inversion(4).unwrap().direction(), Direction::Invert);
        assert!(TimeSchedule::new(vec![0.9, 0.5, 0.6]).is_err());
        assert!(TimeSchedule::new(vec![0.9]).is_err());
        assert!(TimeSchedule::generation(0).is_err());
    }

    #[test]
    fn nfe_accounting() {
        assert_eq!(Solver::Heun.nfe(4), 7);
        assert_eq!(Solver::Heun.steps_for_nfe(7).unwrap(), 4);
        assert!(Solver::Heun.steps_for_nfe(4).is_err());
        assert!(Solver::Euler.steps_for_nfe(0).is_err());
        let field = constant(vec![1.0, 2.0]);
        let z = normal_rows(0, 3, 2);
        for solver in [Solver::Euler, Solver::Heun] {
            for rule in [UpdateRule::Default, UpdateRule::New] {
                for steps in [1, 2, 5] {
                    let s = TimeSchedule::generation(steps).unwrap();
                    let out = integrate(&field, &z, &s, &generate(solver, rule), false).unwrap();
                    assert_eq!(out.nfe, solver.nfe(steps));
                }
            }
        }
    }

    #[test]
    fn constant_and_zero_fields() {
        let z = Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap();
        let c = constant(vec![1.0, 2.0]);
        let out = euler_step(&c, &z, 1.0, 0.0).unwrap();
        assert_eq!(out.data(), &[-0.5, -3.0]);
        assert_eq!(heun_step(&c, &z, 1.0, 0.0).unwrap(), out);
        let zero = constant(vec![0.0, 0.0]);
        assert_eq!(euler_step(&zero, &z, 0.7, 0.2).unwrap(), z);
    }

    #[test]
    fn heun_is_exact_for_linear_in_time_fields() {
        let field = FnField::new(2, |z: &Tensor, t| z.map(|_| t).zip_map(z, |a, _| a * 3.0).unwrap());
        let z = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let out = heun_step(&field, &z, 1.0, 0.0).unwrap();
        assert!((out.data()[0] - (1.0 - 1.5)).abs() < 1e-15);
    }

    #[test]
    fn new_rule_endpoints() {
        let x_hat = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let z1 = Tensor::vector(vec![-3.0, 4.0]).unwrap();
        assert_eq!(new_rule_step(&x_hat, &z1, 0.0).unwrap(), x_hat);
        assert_eq!(new_rule_step(&x_hat, &z1, 1.0).unwrap(), z1);
    }

    #[test]
    fn rules_coincide_below_three_evaluations_with_exact_endpoints() {
        let spec = GmmSpec::new(vec![0.3, 0.7], vec![vec![1.0, -1.0], vec![-2.0, 0.5]], vec![0.2, 0.4]).unwrap();
        let z = normal_rows(3, 16, 2);
        for steps in [1, 2] {
            let s = TimeSchedule::exact(steps, Direction::Generate).unwrap();
            let a = integrate(&spec, &z, &s, &generate(Solver::Euler, UpdateRule::Default), false).unwrap();
            let b = integrate(&spec, &z, &s, &generate(Solver::Euler, UpdateRule::New), false).unwrap();
            assert!(a.z_end.max_abs_diff(&b.z_end).unwrap() < 1e-12);
        }
        // three steps genuinely differ
        let s = TimeSchedule::exact(3, Direction::Generate).unwrap();
        let a = integrate(&spec, &z, &s, &generate(Solver::Euler, UpdateRule::Default), false).unwrap();
        let b = integrate(&spec, &z, &s, &generate(Solver::Euler, UpdateRule::New), false).unwrap();
        assert!(a.z_end.max_abs_diff(&b.z_end).unwrap() > 1e-6);
    }

    #[test]
    fn one_step_new_rule_is_x_prediction() {
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![vec![1.0, 1.0], vec![-1.0, -1.0]], vec![0.1, 0.1]).unwrap();
        let z = normal_rows(4, 8, 2);
        let s = TimeSchedule::new(vec![T_MAX, 0.0]).unwrap();
        let out = integrate(&spec, &z, &s, &generate(Solver::Euler, UpdateRule::New), false).unwrap();
        let v = spec.velocity(&z, T_MAX).unwrap();
        let expected = z.axpy(-T_MAX, &v).unwrap();
        assert!(out.z_end.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn euler_steps_differ_on_curved_field() {
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![vec![2.0, 0.0], vec![-2.0, 0.0]], vec![0.1, 0.1]).unwrap();
        let z = normal_rows(5, 4, 2);
        let one = integrate(&spec, &z, &TimeSchedule::exact(1, Direction::Generate).unwrap(), &SolverConfig::default(), false).unwrap();
        let two = integrate(&spec, &z, &TimeSchedule::exact(2, Direction::Generate).unwrap(), &SolverConfig::default(), false).unwrap();
        assert!(one.z_end.max_abs_diff(&two.z_end).unwrap() > 1e-3);
    }

    #[test]
    fn gaussian_transport_is_affine() {
        let spec = GmmSpec::gaussian(vec![1.0, -0.5], 0.25).unwrap();
        let z = normal_rows(6, 32, 2);
        let s = TimeSchedule::exact(256, Direction::Generate).unwrap();
        let out = integrate(&spec, &z, &s, &generate(Solver::Heun, UpdateRule::Default), false).unwrap();
        let expected = z.map(|v| 0.5 * v).add(&Tensor::from_rows(&vec![vec![1.0, -0.5]; 32]).unwrap()).unwrap();
        assert!(out.z_end.max_abs_diff(&expected).unwrap() < 1e-4);
    }

    #[test]
    fn identity_transport_round_trips() {
        let spec = GmmSpec::gaussian(vec![0.0; 3], 1.0).unwrap();
        let z = normal_rows(7, 64, 3);
        let round_trip = |solver, steps| {
            let gen = integrate(&spec, &z, &TimeSchedule::generation(steps).unwrap(), &generate(solver, UpdateRule::Default), false).unwrap();
            let inv = integrate(&spec, &gen.z_end, &TimeSchedule::inversion(steps).unwrap(), &SolverConfig::invert(solver, UpdateRule::Default), false).unwrap();
            inv.z_end.max_abs_diff(&z).unwrap()
        };
        // first-order and second-order decay of the round-trip error
        let ratio = round_trip(Solver::Euler, 32) / round_trip(Solver::Euler, 64);
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
        let ratio = round_trip(Solver::Heun, 32) / round_trip(Solver::Heun, 64);
        assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
        assert!(round_trip(Solver::Heun, 128) < 2e-4);
    }

    #[test]
    fn new_rule_does_not_converge_on_curved_paths() {
        // The identity transport bends through radius 1/sqrt(2) at t = 1/2; the
        // anchored update assumes straight paths and drifts away as steps grow.
        let spec = GmmSpec::gaussian(vec![0.0; 2], 1.0).unwrap();
        let z = normal_rows(11, 16, 2);
        let err = |steps| {
            let s = TimeSchedule::generation(steps).unwrap();
            let out = integrate(&spec, &z, &s, &generate(Solver::Euler, UpdateRule::New), false).unwrap();
            out.z_end.max_abs_diff(&z).unwrap()
        };
        assert!(err(64) > err(16));
    }

    #[test]
    fn straight_field_is_step_invariant() {
        // Every path is a straight line towards 0.5 * z_1, so v depends on z only through the endpoint.
        let field = FnField::new(2, |z: &Tensor, t| z.map(|v| v * 0.5 / (1.0 - 0.5 * (1.0 - t))));
        let z = normal_rows(8, 10, 2);
        let run = |steps| {
            integrate(&field, &z, &TimeSchedule::generation(steps).unwrap(), &SolverConfig::default(), false)
                .unwrap()
                .z_end
        };
        assert!(run(1).max_abs_diff(&run(64)).unwrap() < 1e-9);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let field = FnField::new(1, |z: &Tensor, t| z.map(|_| if t <= 0.5 { f64::INFINITY } else { 0.0 }));
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let err = integrate(&field, &z, &TimeSchedule::exact(4, Direction::Generate).unwrap(), &SolverConfig::default(), false)
            .unwrap_err();
        assert!(matches!(err, Error::Integration { step: 2 }), "{err}");
    }

    #[test]
    fn direction_mismatch_is_rejected() {
        let field = constant(vec![0.0]);
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let s = TimeSchedule::inversion(3).unwrap();
        assert!(integrate(&field, &z, &s, &SolverConfig::default(), false).is_err());
    }

    #[test]
    fn trajectory_file_round_trip() {
        let spec = GmmSpec::gaussian(vec![0.0, 1.0], 0.5).unwrap();
        let z = normal_rows(9, 5, 2);
        let out = integrate(&spec, &z, &TimeSchedule::generation(6).unwrap(), &SolverConfig::default(), true).unwrap();
        let traj = out.trajectory.unwrap();
        assert_eq!(traj.states.len(), 7);
        assert_eq!(traj.states[0], z);
        assert_eq!(traj.states[6], out.z_end);
        assert_eq!(traj.path(2).row(0), z.row(2));
        let bytes = traj.to_bytes();
        assert_eq!(&bytes[..5], b"RFTJ1");
        assert_eq!(Trajectory::from_bytes(&bytes).unwrap(), traj);
        assert!(Trajectory::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
