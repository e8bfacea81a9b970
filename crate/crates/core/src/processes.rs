//! Cox–Ingersoll–Ross process `dY = (N - gamma Y) dt + sqrt(Y) dB`, its
//! exact representation as a sum of squared Ornstein–Uhlenbeck processes,
//! and a marginal dominance check of observed `eta` traces against it.
//!
//! With `n = 4 N` independent components
//! `dZ_i = -(gamma/2) Z_i dt + (1/2) dB_i`, Itô's formula gives
//! `d(sum Z_i^2) = (n/4 - gamma sum Z_i^2) dt + sqrt(sum Z_i^2) dW`, so the
//! sum of squares is a CIR process with drift constant `n/4`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::stats::{bootstrap_quantile_se, linear_fit, mean, quantile_sorted};

const BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CirParams {
    pub gamma: f64,
    pub n_tilde: f64,
    pub y0: f64,
    /// Simulation step.
    pub h: f64,
    pub horizon: f64,
}

impl CirParams {
    pub fn new(gamma: f64, n_tilde: f64, y0: f64, h: f64, horizon: f64) -> Result<Self> {
        let p = Self { gamma, n_tilde, y0, h, horizon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gamma.is_finite()
            && self.n_tilde >= 0.0
            && self.n_tilde.is_finite()
            && self.y0 >= 0.0
            && self.y0.is_finite()
            && self.h > 0.0
            && self.horizon >= 0.0
            && self.horizon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid CIR parameters {self:?}")))
        }
    }

    /// Number of simulation steps, `round(horizon / h)`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.h).round() as usize
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|j| j as f64 * self.h).collect()
    }

    /// `E[Y_t] = y0 e^{-gamma t} + (N/gamma)(1 - e^{-gamma t})`.
    pub fn mean_at(&self, t: f64) -> f64 {
        let e = (-self.gamma * t).exp();
        self.y0 * e + self.n_tilde / self.gamma * (1.0 - e)
    }

    pub fn variance_at(&self, t: f64) -> f64 {
        let e = (-self.gamma * t).exp();
        self.y0 * (e - e * e) / self.gamma + self.n_tilde / (2.0 * self.gamma * self.gamma) * (1.0 - e).powi(2)
    }

    /// The stationary law is Gamma with shape `2N` and rate `2 gamma`.
    pub fn stationary_mean(&self) -> f64 {
        self.n_tilde / self.gamma
    }

    /// Number of OU components in the squared representation, `4N`.
    pub fn ou_components(&self) -> Result<usize> {
        let n = 4.0 * self.n_tilde;
        if n < 0.5 || (n - n.round()).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "squared-OU representation needs 4 N to be a positive integer, got N = {}",
                self.n_tilde
            )));
        }
        Ok(n.round() as usize)
    }

    fn warnings(&self) -> Vec<String> {
        if self.h > 0.1 / self.gamma {
            vec![format!("step h = {} exceeds 0.1/gamma = {}; Euler bias may be visible", self.h, 0.1 / self.gamma)]
        } else {
            Vec::new()
        }
    }
}

/// Simulated paths: `values[(path, j)]` is the value at `times[j]`.
#[derive(Clone, Debug)]
pub struct PathSet {
    pub times: Vec<f64>,
    pub values: DMatrix<f64>,
    pub warnings: Vec<String>,
}

impl PathSet {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    pub fn paths(&self) -> usize {
        self.values.nrows()
    }
}

/// Where to report a path: grid indices plus interpolation weights.
struct Schedule {
    /// `(lo, hi, w)`: value is `(1 - w) Y[lo] + w Y[hi]`.
    points: Vec<(usize, usize, f64)>,
    interpolated: bool,
}

impl Schedule {
    fn full(steps: usize) -> Self {
        Self { points: (0..=steps).map(|j| (j, j, 0.0)).collect(), interpolated: false }
    }

    fn at(times: &[f64], h: f64, steps: usize) -> Self {
        let mut interpolated = false;
        let points = times
            .iter()
            .map(|&t| {
                let pos = (t / h).clamp(0.0, steps as f64);
                let near = pos.round();
                if (pos - near).abs() <= 1e-9 * near.max(1.0) {
                    let j = near as usize;
                    (j, j, 0.0)
                } else {
                    interpolated = true;
                    let lo = pos.floor() as usize;
                    (lo, (lo + 1).min(steps), pos - lo as f64)
                }
            })
            .collect();
        Self { points, interpolated }
    }

    fn last(&self) -> usize {
        self.points.iter().map(|p| p.1).max().unwrap_or(0)
    }
}

/// Evaluate `run` once per path in parallel blocks. Block `b` draws from
/// stream `(base, b)` with `base` taken from `rng`, so results do not depend
/// on the thread count.
fn per_path<R, F>(rng: &mut RngStream, paths: usize, run: F) -> Vec<R>
where
    R: Send,
    F: Fn(&mut RngStream) -> R + Sync,
{
    let base = rng.next_u64();
    let blocks: Vec<Vec<R>> = (0..paths.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut r = RngStream::new(base, b as u64);
            let count = BLOCK.min(paths - b * BLOCK);
            (0..count).map(|_| run(&mut r)).collect()
        })
        .collect();
    blocks.into_iter().flatten().collect()
}

/// Run a scalar Markov recursion along each path and report it on `schedule`.
fn simulate<S, F>(
    rng: &mut RngStream,
    paths: usize,
    schedule: &Schedule,
    init: impl Fn() -> S + Sync,
    step: F,
    read: impl Fn(&S) -> f64 + Sync,
) -> DMatrix<f64>
where
    F: Fn(&mut S, &mut RngStream) + Sync,
{
    let last = schedule.last();
    let rows = per_path(rng, paths, |r| {
        let mut state = init();
        let mut grid = Vec::with_capacity(last + 1);
        grid.push(read(&state));
        for _ in 0..last {
            step(&mut state, r);
            grid.push(read(&state));
        }
        schedule.points.iter().map(|&(lo, hi, w)| (1.0 - w) * grid[lo] + w * grid[hi]).collect::<Vec<f64>>()
    });
    let mut out = DMatrix::zeros(paths, schedule.points.len());
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

fn cir_step(p: &CirParams, y: &mut f64, r: &mut RngStream) {
    let pos = y.max(0.0);
    *y += (p.n_tilde - p.gamma * pos) * p.h + pos.sqrt() * p.h.sqrt() * r.standard_normal();
}

fn cir_paths(params: &CirParams, rng: &mut RngStream, paths: usize, schedule: &Schedule) -> DMatrix<f64> {
    let p = *params;
    simulate(rng, paths, schedule, || p.y0, |y, r| cir_step(&p, y, r), |y| y.max(0.0))
}

/// Full-truncation Euler–Maruyama: drift and diffusion see `max(Y, 0)`,
/// and reported values are clipped at 0.
pub fn cir_simulate(params: &CirParams, rng: &mut RngStream, paths: usize) -> Result<PathSet> {
    params.validate()?;
    let schedule = Schedule::full(params.steps());
    Ok(PathSet { times: params.times(), values: cir_paths(params, rng, paths, &schedule), warnings: params.warnings() })
}

/// CIR paths reported at arbitrary times in `[0, horizon]`; off-grid times
/// are linearly interpolated and a warning is attached.
pub fn cir_simulate_at(params: &CirParams, rng: &mut RngStream, paths: usize, times: &[f64]) -> Result<PathSet> {
    params.validate()?;
    let schedule = Schedule::at(times, params.h, params.steps());
    let mut warnings = params.warnings();
    if schedule.interpolated {
        warnings.push("requested times are off the simulation grid; values interpolated".into());
    }
    Ok(PathSet { times: times.to_vec(), values: cir_paths(params, rng, paths, &schedule), warnings })
}

/// Sum of `4N` squared OU components, sampled with the exact Gaussian
/// transition on the grid `j h`. Components start at `sqrt(y0 / 4N)`.
pub fn ou_squares_simulate(params: &CirParams, rng: &mut RngStream, paths: usize) -> Result<PathSet> {
    params.validate()?;
    let n = params.ou_components()?;
    let decay = (-params.gamma * params.h / 2.0).exp();
    let sd = (0.25 * (1.0 - (-params.gamma * params.h).exp()) / params.gamma).sqrt();
    let z0 = (params.y0 / n as f64).sqrt();
    let schedule = Schedule::full(params.steps());
    let values = simulate(
        rng,
        paths,
        &schedule,
        || vec![z0; n],
        |z: &mut Vec<f64>, r: &mut RngStream| {
            for zi in z.iter_mut() {
                *zi = *zi * decay + sd * r.standard_normal();
            }
        },
        |z| z.iter().map(|v| v * v).sum(),
    );
    Ok(PathSet { times: params.times(), values, warnings: Vec::new() })
}

/// Empirical and analytic sup-envelopes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// `(1 - epsilon)` quantile of `sup_{t <= horizon} Y_t`.
    pub empirical: f64,
    /// `4 sqrt(y0^2 + N log(1/epsilon) / gamma)`.
    pub analytic: f64,
    pub paths: usize,
}

pub fn analytic_envelope(params: &CirParams, epsilon: f64) -> f64 {
    4.0 * (params.y0 * params.y0 + params.n_tilde * (1.0 / epsilon).ln() / params.gamma).sqrt()
}

pub fn cir_envelope_quantile(params: &CirParams, epsilon: f64, rng: &mut RngStream, paths: usize) -> Result<Envelope> {
    params.validate()?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let p = *params;
    let steps = p.steps();
    let mut sups = per_path(rng, paths, |r| {
        let mut y = p.y0;
        let mut sup = y;
        for _ in 0..steps {
            cir_step(&p, &mut y, r);
            sup = sup.max(y);
        }
        sup
    });
    sups.sort_by(f64::total_cmp);
    Ok(Envelope {
        empirical: quantile_sorted(&sups, 1.0 - epsilon),
        analytic: analytic_envelope(params, epsilon),
        paths,
    })
}

/// Drift regression `dY / dt ~ N - gamma Y` pooled over series sampled at
/// spacing `dt`. Returns `(gamma_hat, n_tilde_hat)`.
pub fn fit_cir(series: &[Vec<f64>], dt: f64) -> Result<(f64, f64)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in series {
        for w in s.windows(2) {
            x.push(w[0]);
            y.push((w[1] - w[0]) / dt);
        }
    }
    if x.len() < 3 {
        return Err(Error::Domain("need at least three increments to fit".into()));
    }
    let (a, b) = linear_fit(&x, &y);
    Ok((-b, a))
}

/// Observed series on a common time grid: `paths[i][j]` at `times[j]`.
#[derive(Clone, Debug)]
pub struct Observed {
    pub times: Vec<f64>,
    pub paths: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct DominanceOptions {
    pub cir_paths: usize,
    /// Consecutive time points pooled into one comparison window.
    pub window: usize,
    pub bootstrap: usize,
    /// Width of the error band in combined standard errors.
    pub band_sigmas: f64,
}

impl Default for DominanceOptions {
    fn default() -> Self {
        Self { cir_paths: 2000, window: 50, bootstrap: 200, band_sigmas: 3.0 }
    }
}

pub const QUANTILE_LEVELS: [f64; 3] = [0.5, 0.9, 0.99];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DominanceReport {
    /// Window start times.
    pub times: Vec<f64>,
    pub observed: Vec<[f64; 3]>,
    pub cir: Vec<[f64; 3]>,
    pub band: Vec<[f64; 3]>,
    pub flagged: Vec<bool>,
    pub flagged_fraction: f64,
    /// The CIR reference had to be interpolated onto the observed times.
    pub resampled: bool,
}

/// Marginal dominance: in each window, the 50/90/99% quantiles of the
/// pooled observed values are compared with those of a CIR simulation at
/// the same times. A window is flagged when some observed quantile exceeds
/// the CIR one by more than `band_sigmas` combined bootstrap errors. The
/// bootstrap resamples whole paths: values of one path inside a window are
/// strongly correlated.
pub fn dominance_compare(
    observed: &Observed,
    params: &CirParams,
    opts: &DominanceOptions,
    rng: &mut RngStream,
) -> Result<DominanceReport> {
    if observed.paths.is_empty() || observed.times.is_empty() {
        return Err(Error::Domain("no observed series".into()));
    }
    if observed.paths.iter().any(|p| p.len() != observed.times.len()) {
        return Err(Error::Size("observed series lengths differ from the time grid".into()));
    }
    let sims = cir_simulate_at(params, rng, opts.cir_paths, &observed.times)?;
    let resampled = sims.warnings.iter().any(|w| w.contains("interpolated"));
    let win = opts.window.max(1);
    let mut report = DominanceReport {
        times: Vec::new(),
        observed: Vec::new(),
        cir: Vec::new(),
        band: Vec::new(),
        flagged: Vec::new(),
        flagged_fraction: 0.0,
        resampled,
    };
    let mut boot = rng.split(rng.stream_id() ^ 0x5eed);
    for start in (0..observed.times.len()).step_by(win) {
        let end = (start + win).min(observed.times.len());
        let obs_paths: Vec<Vec<f64>> = observed.paths.iter().map(|p| p[start..end].to_vec()).collect();
        let cir_paths: Vec<Vec<f64>> =
            (0..sims.paths()).map(|i| (start..end).map(|j| sims.values[(i, j)]).collect()).collect();
        let mut obs: Vec<f64> = obs_paths.concat();
        let mut cir: Vec<f64> = cir_paths.concat();
        obs.sort_by(f64::total_cmp);
        cir.sort_by(f64::total_cmp);
        let qo = QUANTILE_LEVELS.map(|p| quantile_sorted(&obs, p));
        let qc = QUANTILE_LEVELS.map(|p| quantile_sorted(&cir, p));
        let se_o = bootstrap_quantile_se(&obs_paths, &QUANTILE_LEVELS, opts.bootstrap, &mut boot);
        let se_c = bootstrap_quantile_se(&cir_paths, &QUANTILE_LEVELS, opts.bootstrap, &mut boot);
        let band = [0, 1, 2].map(|i| opts.band_sigmas * (se_o[i].powi(2) + se_c[i].powi(2)).sqrt());
        let flag = (0..3).any(|i| qo[i] - qc[i] > band[i]);
        report.times.push(observed.times[start]);
        report.observed.push(qo);
        report.cir.push(qc);
        report.band.push(band);
        report.flagged.push(flag);
    }
    let n = report.flagged.len() as f64;
    report.flagged_fraction = report.flagged.iter().filter(|f| **f).count() as f64 / n;
    Ok(report)
}

/// Per-time `q50, q90, q99, mean` over paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub time: f64,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
    pub mean: f64,
}

pub fn quantile_table(paths: &PathSet) -> Vec<QuantileRow> {
    (0..paths.times.len())
        .map(|j| {
            let mut col = paths.column(j);
            col.sort_by(f64::total_cmp);
            QuantileRow {
                time: paths.times[j],
                q50: quantile_sorted(&col, 0.5),
                q90: quantile_sorted(&col, 0.9),
                q99: quantile_sorted(&col, 0.99),
                mean: mean(&col),
            }
        })
        .collect()
}

pub fn write_quantile_csv<W: Write>(rows: &[QuantileRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_statistic, variance};
    use statrs::distribution::{ContinuousCDF, Gamma};

    #[test]
    fn zero_drift_from_zero_stays_at_zero() {
        let p = CirParams::new(1.0, 0.0, 0.0, 0.01, 1.0).unwrap();
        let s = cir_simulate(&p, &mut RngStream::new(1, 0), 50).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn simulated_paths_are_nonnegative_and_deterministic() {
        let p = CirParams::new(2.0, 0.3, 0.1, 0.01, 2.0).unwrap();
        let a = cir_simulate(&p, &mut RngStream::new(2, 0), 300).unwrap();
        let b = cir_simulate(&p, &mut RngStream::new(2, 0), 300).unwrap();
        assert!(a.values.iter().all(|v| *v >= 0.0));
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn coarse_step_warns() {
        let p = CirParams::new(10.0, 1.0, 0.0, 0.05, 1.0).unwrap();
        let s = cir_simulate(&p, &mut RngStream::new(3, 0), 4).unwrap();
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn stationary_mean_for_fast_reversion() {
        let p = CirParams::new(50.0, 5.0, 3.0, 1e-4, 1.0).unwrap();
        assert!((p.mean_at(1.0) - 0.1).abs() < 1e-12);
        let s = cir_simulate(&p, &mut RngStream::new(4, 0), 2000).unwrap();
        let last = s.column(s.times.len() - 1);
        let se = (variance(&last) / last.len() as f64).sqrt();
        assert!((mean(&last) - 0.1).abs() < 4.0 * se);
    }

    #[test]
    fn ou_representation_needs_integral_components() {
        let p = CirParams::new(1.0, 0.3, 0.0, 0.1, 1.0).unwrap();
        assert!(matches!(ou_squares_simulate(&p, &mut RngStream::new(0, 0), 1), Err(Error::Domain(_))));
    }

    #[test]
    fn ou_squares_marginal_is_gamma() {
        // Y_t is a sum of 4N squared N(0, v) variables, v = (1 - e^{-gamma t}) / (4 gamma)
        let p = CirParams::new(1.5, 2.0, 0.0, 0.05, 1.0).unwrap();
        let s = ou_squares_simulate(&p, &mut RngStream::new(5, 0), 10_000).unwrap();
        let v = (1.0 - (-1.5f64).exp()) / 6.0;
        let law = Gamma::new(4.0, 1.0 / (2.0 * v)).unwrap();
        let ks = ks_statistic(&s.column(s.times.len() - 1), |x| law.cdf(x));
        assert!(ks < 0.02, "ks = {ks}");
    }

    #[test]
    fn stationary_ou_component_variance() {
        let p = CirParams::new(2.0, 0.25, 0.0, 0.5, 20.0).unwrap();
        let s = ou_squares_simulate(&p, &mut RngStream::new(6, 0), 20_000).unwrap();
        // one component: Y = Z^2, E[Y] = Var[Z] = 1/(4 gamma)
        let last = s.column(s.times.len() - 1);
        let se = (variance(&last) / last.len() as f64).sqrt();
        assert!((mean(&last) - 1.0 / 8.0).abs() < 3.0 * se);
    }

    #[test]
    fn envelope_limits() {
        let p = CirParams::new(2.0, 0.0, 1.5, 0.01, 1.0).unwrap();
        assert!((analytic_envelope(&p, 1.0 - 1e-12) - 6.0).abs() < 1e-6);
        let q = CirParams::new(2.0, 1.0, 0.0, 0.01, 1.0).unwrap();
        let q2 = CirParams { n_tilde: 2.0, ..q };
        let r = analytic_envelope(&q2, 0.01) / analytic_envelope(&q, 0.01);
        assert!(r < 2f64.sqrt() + 1e-12);
    }

    #[test]
    fn drift_fit_recovers_parameters() {
        let p = CirParams::new(2.0, 1.0, 0.5, 1e-3, 20.0).unwrap();
        let s = cir_simulate(&p, &mut RngStream::new(7, 0), 40).unwrap();
        let series: Vec<Vec<f64>> = s.values.row_iter().map(|r| r.iter().copied().collect()).collect();
        let (g, n) = fit_cir(&series, p.h).unwrap();
        assert!((g - 2.0).abs() < 0.2, "gamma_hat = {g}");
        assert!((n - 1.0).abs() < 0.1, "n_hat = {n}");
    }

    #[test]
    fn interpolation_is_flagged() {
        let p = CirParams::new(1.0, 1.0, 0.0, 0.1, 1.0).unwrap();
        let on = cir_simulate_at(&p, &mut RngStream::new(8, 0), 3, &[0.0, 0.5, 1.0]).unwrap();
        assert!(on.warnings.is_empty());
        let off = cir_simulate_at(&p, &mut RngStream::new(8, 0), 3, &[0.0, 0.55]).unwrap();
        assert_eq!(off.warnings.len(), 1);
    }

    #[test]
    fn quantile_csv_header() {
        let p = CirParams::new(2.0, 4.0, 1.0, 0.01, 0.05).unwrap();
        let s = cir_simulate(&p, &mut RngStream::new(9, 0), 20).unwrap();
        let mut buf = Vec::new();
        write_quantile_csv(&quantile_table(&s), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,q50,q90,q99,mean\n"));
        assert_eq!(text.lines().count(), 1 + s.times.len());
    }
}
