//! Empirical checks on trajectories: nearness to the starting orbit, branch
//! flips, uniformity of the orbit angle, gradient correlation in the tube,
//! constancy of `f` and of the normal determinant along level sets, and
//! integrated autocorrelation times.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frob_inner, random_rotation};
use crate::manifold::{normal_determinant, project_to_orbit, tangent_basis, OrbitSpec};
use crate::operators::{Instance, MeasurementOperator};
use crate::processes::fit_cir;
use crate::rng::{gaussian_matrix, RngStream};
use crate::sampler::{Record, Trajectory};
use crate::stats::{ks_statistic, mean, quantile, variance};

/// Under `dX = -beta grad f dt + sqrt(2) dB`, `eta` has quadratic variation
/// `8 eta dt`, so `eta / 8` has the CIR diffusion coefficient `sqrt(Y)`.
pub const ETA_TO_CIR: f64 = 0.125;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nearness {
    pub fraction_inside: f64,
    pub max_eta: f64,
    /// Changes of the nearer branch between consecutive records.
    pub flips: usize,
}

pub fn nearness_check(records: &[Record], radius: f64) -> Result<Nearness> {
    if records.is_empty() {
        return Err(Error::Domain("empty trajectory".into()));
    }
    let inside = records.iter().filter(|r| r.eta.sqrt() <= radius).count();
    let max_eta = records.iter().map(|r| r.eta).fold(0.0, f64::max);
    let flips = records.windows(2).filter(|w| w[0].branch != w[1].branch).count();
    Ok(Nearness { fraction_inside: inside as f64 / records.len() as f64, max_eta, flips })
}

/// KS distance between the angles and `Uniform[0, 2 pi)`.
pub fn ks_uniform_angle(angles: &[f64]) -> Result<f64> {
    if angles.len() < 1000 {
        return Err(Error::Domain(format!("need at least 1000 angle samples, got {}", angles.len())));
    }
    Ok(ks_statistic(angles, |a| (a / TAU).clamp(0.0, 1.0)))
}

/// [`ks_uniform_angle`] on the recorded orbit angles; only defined for `k = 2`.
pub fn orbit_uniformity(records: &[Record]) -> Result<f64> {
    let angles: Vec<f64> = records.iter().filter_map(|r| r.angle).collect();
    if angles.len() != records.len() || records.is_empty() {
        return Err(Error::Unsupported("orbit-angle uniformity is only implemented for k = 2".into()));
    }
    ks_uniform_angle(&angles)
}

/// Fitted lower bound `<grad f(X), X - Pi(X)> >= c1 sigma_min^2 eta - c2 T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCorrelation {
    pub c1: f64,
    pub c2: f64,
    /// Variant noise scale `T` multiplying `c2`.
    pub noise_scale: f64,
    /// Violations of the fitted bound on the held-out half.
    pub violation_fraction: f64,
    /// `min <grad f, X - Pi(X)> / eta` over all points.
    pub min_ratio: f64,
    pub points: usize,
}

/// Noise scale of the correlation bound for each operator.
pub fn noise_scale(inst: &Instance) -> f64 {
    let d = inst.dims.d() as f64;
    let k = inst.dims.k() as f64;
    let kappa2 = inst.spectrum.condition_number().powi(2);
    let b2 = inst.beta * inst.beta;
    match &inst.operator {
        MeasurementOperator::Factorization { .. } => k * k * kappa2 * d / b2,
        MeasurementOperator::Sensing { matrices } => d * k * kappa2 * (matrices.len() as f64).ln().max(1.0) / b2,
        MeasurementOperator::Completion { p, .. } => d * kappa2 * k.powi(3) * d.ln().max(1.0) / (p * b2),
    }
}

/// Fit `LHS ~ a eta - b` by least squares on the even-indexed points, move
/// the offset down to the `epsilon` quantile of the fit residuals, and count
/// violations on the odd-indexed points.
pub fn grad_correlation_check(
    inst: &Instance,
    spec: &OrbitSpec,
    samples: &[DMatrix<f64>],
    epsilon: f64,
) -> Result<GradCorrelation> {
    if samples.len() < 4 {
        return Err(Error::Domain("need at least four tube points".into()));
    }
    let mut lhs = Vec::with_capacity(samples.len());
    let mut etas = Vec::with_capacity(samples.len());
    for x in samples {
        let p = project_to_orbit(spec, x)?;
        let e = p.eta();
        if e == 0.0 {
            return Err(Error::Domain("tube point lies on the orbit".into()));
        }
        lhs.push(frob_inner(&inst.gradient(x)?, &(x - &p.pi_x)));
        etas.push(e);
    }
    let fit: Vec<usize> = (0..samples.len()).step_by(2).collect();
    let test: Vec<usize> = (1..samples.len()).step_by(2).collect();
    let fx: Vec<f64> = fit.iter().map(|&i| etas[i]).collect();
    let fy: Vec<f64> = fit.iter().map(|&i| lhs[i]).collect();
    // slope through the origin keeps the fit well posed when eta barely varies
    let a = fx.iter().zip(&fy).map(|(x, y)| x * y).sum::<f64>() / fx.iter().map(|x| x * x).sum::<f64>();
    let residuals: Vec<f64> = fx.iter().zip(&fy).map(|(x, y)| y - a * x).collect();
    let offset = quantile(&residuals, epsilon);
    let t = noise_scale(inst);
    let s2 = spec.sigma_min().powi(2);
    let c1 = a / s2;
    let c2 = -offset / t;
    let violations = test.iter().filter(|&&i| lhs[i] < c1 * s2 * etas[i] - c2 * t).count();
    let min_ratio = lhs.iter().zip(&etas).map(|(l, e)| l / e).fold(f64::INFINITY, f64::min);
    Ok(GradCorrelation {
        c1,
        c2,
        noise_scale: t,
        violation_fraction: violations as f64 / test.len() as f64,
        min_ratio,
        points: samples.len(),
    })
}

/// Integrated autocorrelation time in the convention `1/2 + sum_{t>=1} rho_t`
/// (0.5 for white noise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iact {
    /// `max(raw, 0.5)`.
    pub tau: f64,
    pub raw: f64,
    pub note: Option<String>,
}

fn autocorrelation(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = xs
        .iter()
        .map(|x| Complex::new(x - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    buf[..n].iter().map(|c| c.re / c0).collect()
}

/// Geyer's initial positive sequence: sum the pair sums
/// `rho_{2m} + rho_{2m+1}` while they stay positive.
pub fn iact(series: &[f64]) -> Result<Iact> {
    if series.len() < 1000 {
        return Err(Error::Domain(format!("IACT needs at least 1000 samples, got {}", series.len())));
    }
    let m = mean(series);
    let spread = series.iter().map(|x| (x - m).abs()).fold(0.0, f64::max);
    if spread <= 1e-300_f64.max(m.abs() * 1e-15) {
        return Ok(Iact { tau: 0.5, raw: 0.5, note: Some("constant series".into()) });
    }
    let rho = autocorrelation(series);
    let mut sum = 0.0;
    let mut k = 0;
    while 2 * k + 1 < rho.len() {
        let pair = rho[2 * k] + rho[2 * k + 1];
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 1;
    }
    let raw = sum - 0.5;
    if raw < 0.5 {
        return Ok(Iact {
            tau: 0.5,
            raw,
            note: Some(format!("raw IACT {raw:.3} is below 0.5 (negative correlation)")),
        });
    }
    let note = (2 * k + 1 >= rho.len()).then(|| "autocorrelation never turned negative".to_string());
    Ok(Iact { tau: raw, raw, note })
}

/// Largest coefficient of variation of `f` over `{X U}` for `rotations`
/// random `U` per point.
pub fn f_constancy_cv(inst: &Instance, points: &[DMatrix<f64>], rotations: usize, rng: &mut RngStream) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in points {
        let mut vals = vec![inst.loss(x)?];
        for _ in 0..rotations {
            let u = random_rotation(rng, x.ncols());
            vals.push(inst.loss(&(x * u))?);
        }
        let m = mean(&vals);
        if m > 0.0 {
            worst = worst.max(variance(&vals).sqrt() / m);
        }
    }
    Ok(worst)
}

/// Coefficient of variation and mean of the numeric normal determinant.
pub fn det_constancy(spec: &OrbitSpec, points: &[DMatrix<f64>]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Domain("need at least two points".into()));
    }
    let vals = points.iter().map(|x| normal_determinant(spec, x).map(|d| d.value)).collect::<Result<Vec<f64>>>()?;
    let m = mean(&vals);
    Ok((variance(&vals).sqrt() / m, m))
}

/// Points `X0 U + r N` with `U` a random rotation and `N` a random unit
/// normal direction at `X0 U`, one per entry of `radii`.
pub fn sample_tube_points(spec: &OrbitSpec, radii: &[f64], rng: &mut RngStream) -> Result<Vec<DMatrix<f64>>> {
    let (d, k) = (spec.d(), spec.k());
    let sign = spec.branch().sign();
    radii
        .iter()
        .map(|&r| {
            let mut u = random_rotation(rng, k);
            if sign < 0.0 {
                u.column_mut(0).neg_mut();
            }
            let on = spec.x0() * u;
            let tangent = tangent_basis(spec, &on)?;
            let mut z = gaussian_matrix(rng, d, k, 1.0);
            for t in &tangent {
                z -= t * frob_inner(t, &z);
            }
            Ok(&on + z.normalize() * r)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CirFit {
    pub gamma_hat: f64,
    pub n_tilde_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub nearness_fraction: f64,
    pub max_eta: f64,
    pub tube_radius_used: f64,
    pub branch_flips: usize,
    pub ks_uniform_angle: Option<f64>,
    pub f_constancy_cv: Option<f64>,
    pub det_constancy_cv: Option<f64>,
    pub grad_corr_violations: Option<f64>,
    pub iact_eta: Option<f64>,
    pub iact_angle: Option<f64>,
    pub cir_fit: Option<CirFit>,
    pub notes: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReportSettings {
    pub radius: f64,
    pub epsilon: f64,
    /// Tube points regenerated for the geometric checks.
    pub grad_points: usize,
    pub det_points: usize,
    pub rotations: usize,
    pub seed: u64,
}

/// All selected diagnostics over a set of trajectories. Failures of single
/// components are recorded in `notes` instead of aborting.
pub fn assemble_report(
    inst: &Instance,
    spec: &OrbitSpec,
    trajectories: &[Trajectory],
    settings: &ReportSettings,
) -> DiagnosticsReport {
    let mut notes = Vec::new();
    let mut report = DiagnosticsReport {
        nearness_fraction: 0.0,
        max_eta: 0.0,
        tube_radius_used: settings.radius,
        branch_flips: 0,
        ks_uniform_angle: None,
        f_constancy_cv: None,
        det_constancy_cv: None,
        grad_corr_violations: None,
        iact_eta: None,
        iact_angle: None,
        cir_fit: None,
        notes: Vec::new(),
    };
    for t in trajectories {
        if let Some(e) = &t.diverged {
            notes.push(format!("chain {}: {e}", t.chain));
        }
    }
    let all: Vec<Record> = trajectories.iter().flat_map(|t| t.records.iter().cloned()).collect();
    let mut flips = 0;
    let mut inside = 0.0;
    for t in trajectories {
        match nearness_check(&t.records, settings.radius) {
            Ok(n) => {
                flips += n.flips;
                inside += n.fraction_inside * t.records.len() as f64;
                report.max_eta = report.max_eta.max(n.max_eta);
            }
            Err(e) => notes.push(format!("chain {} nearness: {e}", t.chain)),
        }
    }
    report.branch_flips = flips;
    if !all.is_empty() {
        report.nearness_fraction = inside / all.len() as f64;
    }
    if inst.dims.k() == 2 {
        match orbit_uniformity(&all) {
            Ok(ks) => report.ks_uniform_angle = Some(ks),
            Err(e) => notes.push(format!("orbit uniformity: {e}")),
        }
    }

    let mut per_eta = Vec::new();
    let mut per_angle = Vec::new();
    for t in trajectories {
        match iact(&t.etas()) {
            Ok(v) => per_eta.push(v.tau),
            Err(e) => notes.push(format!("chain {} IACT(eta): {e}", t.chain)),
        }
        if inst.dims.k() == 2 && !t.records.is_empty() {
            let a = t.angles();
            let c: Vec<f64> = a.iter().map(|x| x.cos()).collect();
            let s: Vec<f64> = a.iter().map(|x| x.sin()).collect();
            match (iact(&c), iact(&s)) {
                (Ok(x), Ok(y)) => per_angle.push(x.tau.max(y.tau)),
                (Err(e), _) | (_, Err(e)) => notes.push(format!("chain {} IACT(angle): {e}", t.chain)),
            }
        }
    }
    if !per_eta.is_empty() {
        report.iact_eta = Some(mean(&per_eta));
    }
    if !per_angle.is_empty() {
        report.iact_angle = Some(mean(&per_angle));
    }

    let series: Vec<Vec<f64>> = trajectories
        .iter()
        .filter(|t| t.records.len() > 2)
        .map(|t| t.records.iter().map(|r| r.eta * ETA_TO_CIR).collect())
        .collect();
    let dt = trajectories.iter().find(|t| t.records.len() > 1).map(|t| t.records[1].time - t.records[0].time);
    match dt.map(|dt| fit_cir(&series, dt)) {
        Some(Ok((g, n))) => report.cir_fit = Some(CirFit { gamma_hat: g, n_tilde_hat: n }),
        Some(Err(e)) => notes.push(format!("CIR fit: {e}")),
        None => notes.push("CIR fit: not enough records".into()),
    }

    // geometric checks on regenerated tube points with radii drawn from
    // the recorded distances
    let mut rng = RngStream::new(settings.seed, 0);
    let cap = 0.9 * spec.tube_radius();
    let mut radii_pool: Vec<f64> =
        all.iter().map(|r| r.eta.sqrt()).filter(|r| *r > 0.0 && r.is_finite()).map(|r| r.min(cap)).collect();
    if radii_pool.is_empty() {
        radii_pool.push(0.1 * spec.tube_radius());
    }
    let pick = |n: usize, rng: &mut RngStream| -> Vec<f64> {
        (0..n).map(|_| radii_pool[(rng.uniform() * radii_pool.len() as f64) as usize % radii_pool.len()]).collect()
    };
    let grad_radii = pick(settings.grad_points, &mut rng);
    match sample_tube_points(spec, &grad_radii, &mut rng)
        .and_then(|p| grad_correlation_check(inst, spec, &p, settings.epsilon))
    {
        Ok(g) => report.grad_corr_violations = Some(g.violation_fraction),
        Err(e) => notes.push(format!("gradient correlation: {e}")),
    }
    let det_radii = pick(settings.det_points, &mut rng);
    match sample_tube_points(spec, &det_radii, &mut rng).and_then(|p| {
        let (cv, _) = det_constancy(spec, &p)?;
        let f = f_constancy_cv(inst, &p, settings.rotations, &mut rng)?;
        Ok((cv, f))
    }) {
        Ok((cv, f)) => {
            report.det_constancy_cv = Some(cv);
            report.f_constancy_cv = Some(f);
        }
        Err(e) => notes.push(format!("level-set constancy: {e}")),
    }
    report.notes = notes;
    report
}
