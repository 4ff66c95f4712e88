//! Trajectory and noise diagnostics: straightness, constructed-noise probes,
//! lag autocorrelation, inversion round trips and sliced Wasserstein distance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::binio::write_file;
use crate::error::{Error, Result};
use crate::losses::ProfileBin;
use crate::models::VelocityField;
use crate::samplers::{integrate, Direction, SolverConfig, TimeSchedule, Trajectory};
use crate::tensor::Tensor;

/// Two-sided confidence used for the Gaussian reference bands.
pub const BAND_CONFIDENCE: f64 = 0.99;

/// Normalized squared deviation of one recorded path from its chord.
///
/// `times` and the rows of `path` are matched; the path is mapped to `[0, 1]`
/// with the earlier time at 0, and the integral is taken by the trapezoid rule
/// over the recorded states.
pub fn path_straightness(times: &[f64], path: &Tensor) -> Result<f64> {
    let path = path.as_matrix();
    if times.len() < 3 || path.rows() != times.len() {
        return Err(Error::InvalidInput(format!(
            "straightness needs at least 3 recorded states with times, got {} states and {} times",
            path.rows(),
            times.len()
        )));
    }
    let (lo, hi) = (times[0].min(times[times.len() - 1]), times[0].max(times[times.len() - 1]));
    let (i0, i1) = if times[0] < times[times.len() - 1] {
        (0, times.len() - 1)
    } else {
        (times.len() - 1, 0)
    };
    let (z0, z1) = (path.row(i0), path.row(i1));
    let chord: f64 = z0.iter().zip(z1).map(|(a, b)| (b - a).powi(2)).sum();
    if chord == 0.0 {
        return Err(Error::Domain("path endpoints coincide; straightness is undefined".into()));
    }
    let deviation = |k: usize| -> (f64, f64) {
        let u = (times[k] - lo) / (hi - lo);
        let dev = path
            .row(k)
            .iter()
            .zip(z0.iter().zip(z1))
            .map(|(z, (a, b))| (z - ((1.0 - u) * a + u * b)).powi(2))
            .sum();
        (u, dev)
    };
    let mut integral = 0.0;
    let mut prev = deviation(0);
    for k in 1..times.len() {
        let cur = deviation(k);
        integral += 0.5 * (cur.1 + prev.1) * (cur.0 - prev.0).abs();
        prev = cur;
    }
    Ok(integral / chord)
}

/// Mean [`path_straightness`] over every trajectory of a recorded batch.
pub fn straightness(trajectories: &Trajectory) -> Result<f64> {
    let n = trajectories.count();
    let values = (0..n)
        .into_par_iter()
        .map(|i| path_straightness(&trajectories.times, &trajectories.path(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.iter().sum::<f64>() / n as f64)
}

/// `R_u(l) = (1 / (d - l)) Σ_k u_k u_{k+l}` for `l = 1..=max_lag`.
pub fn autocorrelation(u: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let d = u.len();
    if max_lag == 0 || max_lag >= d {
        return Err(Error::InvalidInput(format!(
            "lags 1..={max_lag} are out of range for a vector of length {d}"
        )));
    }
    Ok((1..=max_lag)
        .map(|l| u[..d - l].iter().zip(&u[l..]).map(|(a, b)| a * b).sum::<f64>() / (d - l) as f64)
        .collect())
}

/// Half-width of the two-sided Gaussian band for `R(l)` averaged over `n`
/// independent standard normal vectors of length `d`.
pub fn autocorrelation_band(d: usize, lag: usize, n: usize, confidence: f64) -> f64 {
    normal_quantile(0.5 + 0.5 * confidence) / (((d - lag) * n) as f64).sqrt()
}

fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

/// Exact reference statistics of `||z||²` for `z ~ N(0, I_d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChiSquareReference {
    pub dof: usize,
    pub mean: f64,
    pub std: f64,
    /// Central annulus holding `confidence` of the mass.
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
}

impl ChiSquareReference {
    pub fn new(dof: usize, confidence: f64) -> Result<Self> {
        let chi = chi_squared(dof)?;
        Ok(Self {
            dof,
            mean: dof as f64,
            std: (2.0 * dof as f64).sqrt(),
            lower: chi.inverse_cdf(0.5 - 0.5 * confidence),
            upper: chi.inverse_cdf(0.5 + 0.5 * confidence),
            confidence,
        })
    }
}

fn chi_squared(dof: usize) -> Result<ChiSquared> {
    ChiSquared::new(dof as f64).map_err(|e| Error::InvalidInput(format!("chi-square with {dof} dof: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Expected count under the chi-square reference.
    pub expected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagStat {
    pub lag: usize,
    pub mean: f64,
    pub band: f64,
}

/// How Gaussian a batch of noise vectors looks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseStats {
    pub count: usize,
    pub dim: usize,
    pub mean_norm_sq: f64,
    pub std_error: f64,
    pub fraction_outside_annulus: f64,
    pub reference: ChiSquareReference,
    pub histogram: Vec<HistogramBin>,
    pub autocorrelation: Vec<LagStat>,
}

impl NoiseStats {
    /// `(mean ||z||² - d) / std(χ²_d)`.
    pub fn norm_shift_in_chi_std(&self) -> f64 {
        (self.mean_norm_sq - self.reference.mean) / self.reference.std
    }

    /// `(mean ||z||² - d) / standard error of the mean`.
    pub fn norm_shift_in_std_errors(&self) -> f64 {
        let se = self.reference.std / (self.count as f64).sqrt();
        (self.mean_norm_sq - self.reference.mean) / se
    }
}

pub fn noise_statistics(z: &Tensor, max_lag: usize, histogram_bins: usize) -> Result<NoiseStats> {
    let z = z.as_matrix();
    let (n, d) = (z.rows(), z.last_dim());
    if n == 0 {
        return Err(Error::InvalidInput("noise statistics need at least one vector".into()));
    }
    let reference = ChiSquareReference::new(d, BAND_CONFIDENCE)?;
    let norms: Vec<f64> = z.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mean = norms.iter().sum::<f64>() / n as f64;
    let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    let outside = norms
        .iter()
        .filter(|&&v| v < reference.lower || v > reference.upper)
        .count();

    let chi = chi_squared(d)?;
    let top = norms.iter().cloned().fold(reference.upper, f64::max);
    let width = top / histogram_bins.max(1) as f64;
    let mut histogram: Vec<HistogramBin> = (0..histogram_bins.max(1))
        .map(|b| {
            let (lo, hi) = (b as f64 * width, (b + 1) as f64 * width);
            HistogramBin {
                lo,
                hi,
                count: 0,
                expected: n as f64 * (chi.cdf(hi) - chi.cdf(lo)),
            }
        })
        .collect();
    let last = histogram.len() - 1;
    for v in &norms {
        histogram[((v / width) as usize).min(last)].count += 1;
    }

    let lags = max_lag.min(d.saturating_sub(1));
    let mut sums = vec![0.0; lags];
    if lags > 0 {
        for row in z.row_iter() {
            for (s, r) in sums.iter_mut().zip(autocorrelation(row, lags)?) {
                *s += r;
            }
        }
    }
    let autocorrelation = sums
        .into_iter()
        .enumerate()
        .map(|(i, s)| LagStat {
            lag: i + 1,
            mean: s / n as f64,
            band: autocorrelation_band(d, i + 1, n, BAND_CONFIDENCE),
        })
        .collect();

    Ok(NoiseStats {
        count: n,
        dim: d,
        mean_norm_sq: mean,
        std_error: (var / n as f64).sqrt(),
        fraction_outside_annulus: outside as f64 / n as f64,
        reference,
        histogram,
        autocorrelation,
    })
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub noise: Tensor,
    /// `E||Δ||²` of the applied offsets.
    pub mean_offset_sq: f64,
    pub stats: NoiseStats,
}

/// Builds `z'' = z' + ((1 - t) / t)(x' - x'')`: the noise that would place the
/// interpolation of pair `(x'', z'')` on top of that of `(x', z')` at time `t`.
pub fn intersection_probe(
    x_a: &Tensor,
    z_a: &Tensor,
    x_b: &Tensor,
    t: f64,
    max_lag: usize,
) -> Result<ProbeResult> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("probe time must lie in (0, 1), got {t}")));
    }
    x_a.ensure_same_shape(z_a)?;
    x_a.ensure_same_shape(x_b)?;
    let c = (1.0 - t) / t;
    let offset = x_a.sub(x_b)?.scale(c);
    let noise = z_a.add(&offset)?;
    let rows = x_a.as_matrix().rows().max(1);
    Ok(ProbeResult {
        mean_offset_sq: offset.norm_squared() / rows as f64,
        stats: noise_statistics(&noise, max_lag, 20)?,
        noise,
    })
}

/// Inverts `samples` with `steps` steps, regenerates them with the same
/// number of steps, and returns the mean squared error per coordinate.
pub fn reconstruction_error(
    field: &dyn VelocityField,
    samples: &Tensor,
    steps: usize,
    solver: SolverConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("reconstruction needs at least one sample".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidInput("reconstruction needs at least one step".into()));
    }
    let inv_cfg = SolverConfig {
        direction: Direction::Invert,
        ..solver
    };
    let gen_cfg = SolverConfig {
        direction: Direction::Generate,
        ..solver
    };
    let noise = integrate(field, samples, &TimeSchedule::inversion(steps)?, &inv_cfg, false)?.z_end;
    let back = integrate(field, &noise, &TimeSchedule::generation(steps)?, &gen_cfg, false)?.z_end;
    back.mse(samples)
}

/// Squared 1-D 2-Wasserstein distance between two empirical distributions,
/// integrating the squared gap of their quantile functions exactly.
fn w2_squared_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Mean over `n_projections` seeded random unit directions of the 1-D
/// 2-Wasserstein distance between the projected sample sets.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f64> {
    let (a, b) = (a.as_matrix(), b.as_matrix());
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidInput("sliced Wasserstein needs non-empty sample sets".into()));
    }
    if a.last_dim() != b.last_dim() {
        return Err(Error::shape(&[a.last_dim()], &[b.last_dim()]));
    }
    if n_projections == 0 {
        return Err(Error::InvalidInput("need at least one projection".into()));
    }
    let d = a.last_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Vec<f64>> = (0..n_projections)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let project = |m: &Tensor, dir: &[f64]| -> Vec<f64> {
        m.row_iter().map(|r| r.iter().zip(dir).map(|(x, w)| x * w).sum()).collect()
    };
    let distances: Vec<f64> = directions
        .par_iter()
        .map(|dir| {
            let (mut pa, mut pb) = (project(&a, dir), project(&b, dir));
            w2_squared_1d(&mut pa, &mut pb).sqrt()
        })
        .collect();
    Ok(distances.iter().sum::<f64>() / n_projections as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountedValue {
    pub value: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionRow {
    pub nfe: usize,
    pub steps: usize,
    pub mse: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicedWassersteinRow {
    pub label: String,
    pub value: f64,
    pub count_a: usize,
    pub count_b: usize,
    pub projections: usize,
    pub seed: u64,
}

/// Everything a diagnose run measured, with the sample count of every entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsReport {
    pub model: String,
    pub seeds: BTreeMap<String, u64>,
    pub straightness: Option<CountedValue>,
    pub noise: Option<NoiseStats>,
    pub probe: Option<NoiseStats>,
    pub reconstruction: Vec<ReconstructionRow>,
    pub sliced_wasserstein: Vec<SlicedWassersteinRow>,
    pub loss_profile: Vec<ProfileBin>,
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV tables keyed by file stem; empty sections are omitted.
    pub fn csv_tables(&self) -> BTreeMap<&'static str, String> {
        let mut out = BTreeMap::new();
        for (name, stats) in [("noise", &self.noise), ("probe", &self.probe)] {
            if let Some(stats) = stats {
                let mut hist = String::from("lo,hi,count,expected\n");
                for b in &stats.histogram {
                    let _ = writeln!(hist, "{},{},{},{}", b.lo, b.hi, b.count, b.expected);
                }
                let mut lags = String::from("lag,mean,band\n");
                for l in &stats.autocorrelation {
                    let _ = writeln!(lags, "{},{},{}", l.lag, l.mean, l.band);
                }
                let (h, a) = match name {
                    "noise" => ("noise_norm_histogram", "noise_autocorrelation"),
                    _ => ("probe_norm_histogram", "probe_autocorrelation"),
                };
                out.insert(h, hist);
                out.insert(a, lags);
            }
        }
        if !self.reconstruction.is_empty() {
            let mut s = String::from("nfe,steps,mse,count\n");
            for r in &self.reconstruction {
                let _ = writeln!(s, "{},{},{},{}", r.nfe, r.steps, r.mse, r.count);
            }
            out.insert("reconstruction", s);
        }
        if !self.sliced_wasserstein.is_empty() {
            let mut s = String::from("label,value,count_a,count_b,projections,seed\n");
            for r in &self.sliced_wasserstein {
                let _ = writeln!(s, "{},{},{},{},{},{}", r.label, r.value, r.count_a, r.count_b, r.projections, r.seed);
            }
            out.insert("sliced_wasserstein", s);
        }
        if !self.loss_profile.is_empty() {
            out.insert("loss_profile", profile_csv(&self.loss_profile));
        }
        out
    }

    /// Writes `<stem>.json` and one `<stem>_<table>.csv` per table into `dir`,
    /// returning the written paths in a fixed order.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        let mut written = Vec::new();
        let json = dir.join(format!("{stem}.json"));
        write_file(&json, self.to_json()?.as_bytes())?;
        written.push(json);
        for (name, table) in self.csv_tables() {
            let path = dir.join(format!("{stem}_{name}.csv"));
            write_file(&path, table.as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn profile_csv(bins: &[ProfileBin]) -> String {
    let mut s = String::from("t_lo,t_hi,t,count,mean,std,lower_bound,residual\n");
    for b in bins {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            b.t_lo,
            b.t_hi,
            b.t,
            b.count,
            b.mean,
            b.std,
            opt(b.lower_bound),
            opt(b.residual())
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GmmSpec;
    use crate::samplers::{Solver, UpdateRule};

    fn normal_rows(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn rotate(path: &Tensor, angle: f64) -> Tensor {
        let (s, c) = angle.sin_cos();
        let rows: Vec<Vec<f64>> = path.row_iter().map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn linear_paths_are_perfectly_straight() {
        let times: Vec<f64> = (0..=10).map(|k| 1.0 - k as f64 / 10.0).collect();
        let rows: Vec<Vec<f64>> = times.iter().map(|t| vec![1.0 + 2.0 * t, -t]).collect();
        assert!(path_straightness(&times, &Tensor::from_rows(&rows).unwrap()).unwrap() < 1e-28);
    }

    #[test]
    fn semicircle_matches_dense_quadrature() {
        // Arc from (0,0) at u=0 to (1,0) at u=1 through (1/2, 1/2).
        let arc = |u: f64| vec![0.5 - 0.5 * (std::f64::consts::PI * u).cos(), 0.5 * (std::f64::consts::PI * u).sin()];
        let n = 4000;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
        let rows: Vec<Vec<f64>> = times.iter().map(|&u| arc(u)).collect();
        let got = path_straightness(&times, &Tensor::from_rows(&rows).unwrap()).unwrap();
        // Simpson's rule on the same integrand, independent of the trapezoid code.
        let m = 20000;
        let f = |u: f64| {
            let p = arc(u);
            (p[0] - u).powi(2) + p[1].powi(2)
        };
        let h = 1.0 / m as f64;
        let simpson: f64 = (0..=m)
            .map(|k| {
                let w = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                w * f(k as f64 * h)
            })
            .sum::<f64>()
            * h
            / 3.0;
        assert!((got - simpson).abs() < 1e-6, "{got} vs {simpson}");
        // Rigid rotation does not change it.
        let rotated = rotate(&Tensor::from_rows(&rows).unwrap(), 0.7);
        assert!((path_straightness(&times, &rotated).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn straightness_rejects_short_paths() {
        let path = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(path_straightness(&[1.0, 0.0], &path).is_err());
    }

    #[test]
    fn straightness_of_a_recorded_batch() {
        let spec = GmmSpec::new(vec![0.5, 0.5], vec![vec![2.0, 2.0], vec![-2.0, -2.0]], vec![0.1, 0.1]).unwrap();
        let z = normal_rows(1, 50, 2);
        let out = integrate(&spec, &z, &TimeSchedule::generation(32).unwrap(), &SolverConfig::default(), true).unwrap();
        let s = straightness(&out.trajectory.unwrap()).unwrap();
        assert!(s > 0.0 && s.is_finite());
    }

    #[test]
    fn autocorrelation_basics() {
        assert_eq!(autocorrelation(&[1.0; 6], 3).unwrap(), vec![1.0; 3]);
        let alt: Vec<f64> = (0..7).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(autocorrelation(&alt, 1).unwrap(), vec![-1.0]);
        assert!(autocorrelation(&[1.0, 2.0], 2).is_err());
        assert!(autocorrelation(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn autocorrelation_matches_naive_double_loop() {
        let u = normal_rows(2, 1, 37);
        let u = u.data();
        let r = autocorrelation(u, 10).unwrap();
        for l in 1..=10 {
            let mut s = 0.0;
            for k in 0..37 {
                for j in 0..37 {
                    if j == k + l {
                        s += u[k] * u[j];
                    }
                }
            }
            assert!((r[l - 1] - s / (37 - l) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_lag_one_stays_in_band() {
        let d = 3072;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inside = (0..1000)
            .filter(|_| {
                let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                autocorrelation(&u, 1).unwrap()[0].abs() < 4.0 / (d as f64).sqrt()
            })
            .count();
        assert!(inside >= 990, "{inside}");
    }

    #[test]
    fn chi_square_reference() {
        let r = ChiSquareReference::new(2, 0.99).unwrap();
        // χ²_2 is exponential with mean 2.
        assert!((r.lower - (-2.0 * 0.995f64.ln())).abs() < 1e-9);
        assert!((r.upper - (-2.0 * 0.005f64.ln())).abs() < 1e-6);
        assert_eq!(r.std, 2.0);
    }

    #[test]
    fn noise_statistics_of_gaussian_noise() {
        let z = normal_rows(4, 20_000, 8);
        let s = noise_statistics(&z, 3, 30).unwrap();
        assert!(s.norm_shift_in_std_errors().abs() < 4.0);
        assert!((s.fraction_outside_annulus - 0.01).abs() < 0.005);
        assert_eq!(s.histogram.iter().map(|b| b.count).sum::<usize>(), 20_000);
        for l in &s.autocorrelation {
            assert!(l.mean.abs() < 1.5 * l.band);
        }
    }

    #[test]
    fn probe_identity_and_offset_scale() {
        let x = normal_rows(5, 10, 4);
        let z = normal_rows(6, 10, 4);
        let p = intersection_probe(&x, &z, &x, 0.3, 2).unwrap();
        assert_eq!(p.noise, z);
        let x2 = normal_rows(7, 10, 4);
        let half = intersection_probe(&x, &z, &x2, 0.5, 2).unwrap();
        let expected = z.add(&x.sub(&x2).unwrap()).unwrap();
        assert!(half.noise.max_abs_diff(&expected).unwrap() < 1e-15);
        assert!(intersection_probe(&x, &z, &x2, 0.0, 2).is_err());
    }

    #[test]
    fn probe_norm_shift_matches_offset_energy() {
        let n = 40_000;
        let (x, x2, z) = (normal_rows(8, n, 3), normal_rows(9, n, 3), normal_rows(10, n, 3));
        let p = intersection_probe(&x, &z, &x2, 0.5, 1).unwrap();
        let expected = 3.0 + p.mean_offset_sq;
        assert!((p.stats.mean_norm_sq - expected).abs() < 4.0 * p.stats.std_error);
    }

    #[test]
    fn reconstruction_of_identity_transport() {
        let spec = GmmSpec::gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let x = normal_rows(11, 100, 2);
        let cfg = SolverConfig::generate(Solver::Heun, UpdateRule::Default);
        let mse = reconstruction_error(&spec, &x, 64, cfg).unwrap();
        assert!(mse < 1e-6, "{mse}");
        assert!(reconstruction_error(&spec, &Tensor::zeros(&[0, 2]), 4, cfg).is_err());
    }

    #[test]
    fn sliced_wasserstein_properties() {
        let a = normal_rows(12, 300, 3);
        let b = normal_rows(13, 200, 3);
        assert_eq!(sliced_wasserstein(&a, &a, 16, 0).unwrap(), 0.0);
        let ab = sliced_wasserstein(&a, &b, 16, 1).unwrap();
        let ba = sliced_wasserstein(&b, &a, 16, 1).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
        assert!(sliced_wasserstein(&a, &normal_rows(1, 3, 2), 4, 0).is_err());
    }

    #[test]
    fn sliced_wasserstein_of_shifted_gaussians() {
        let n = 50_000;
        let a = normal_rows(14, n, 1);
        let b = normal_rows(15, n, 1).map(|v| v + 1.5);
        let w = sliced_wasserstein(&a, &b, 4, 2).unwrap();
        assert!((w - 1.5).abs() < 0.03, "{w}");
    }

    #[test]
    fn exact_1d_w2_with_unequal_counts() {
        // Quantile functions: a = {0, 1}, b = {0, 0, 3}.
        // On [0,1/3]: (0-0)², [1/3,1/2]: (0-0)², [1/2,2/3]: (1-0)², [2/3,1]: (1-3)².
        let w = w2_squared_1d(&mut [1.0, 0.0], &mut [3.0, 0.0, 0.0]);
        assert!((w - (1.0 / 6.0 + 4.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn report_round_trip_and_tables() {
        let z = normal_rows(16, 500, 2);
        let mut report = DiagnosticsReport {
            model: "test".into(),
            noise: Some(noise_statistics(&z, 1, 10).unwrap()),
            ..Default::default()
        };
        report.seeds.insert("sample".into(), 16);
        report.reconstruction.push(ReconstructionRow { nfe: 1, steps: 1, mse: 0.5, count: 500 });
        let json = report.to_json().unwrap();
        let back: DiagnosticsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let tables = report.csv_tables();
        assert_eq!(tables.keys().copied().collect::<Vec<_>>(), vec!["noise_autocorrelation", "noise_norm_histogram", "reconstruction"]);
        assert_eq!(tables["reconstruction"], "nfe,steps,mse,count\n1,1,0.5,500\n");
        let dir = tempfile::tempdir().unwrap();
        let written = report.write(dir.path(), "diag").unwrap();
        assert_eq!(written.len(), 4);
        assert!(written.iter().all(|p| p.exists()));
    }
}
