//! Unadjusted Langevin chains, gradient-descent initialization and
//! multi-chain orchestration.
//!
//! One step is the Euler–Maruyama update
//!
//! ```text
//! X <- X - h beta grad f(X) + sqrt(2h) xi,   xi ~ N(0, I)
//! ```
//!
//! whose continuous-time limit has stationary density proportional to
//! `exp(-beta f)`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::frob_inner;
use crate::manifold::{normal_coordinates, orbit_angle, project_nearest, Branch, OrbitSpec};
use crate::operators::Instance;
use crate::rng::{gaussian_matrix, RngStream};

/// Anything with a loss and a gradient on a fixed matrix shape.
pub trait Potential: Sync {
    fn value(&self, x: &DMatrix<f64>) -> Result<f64>;
    fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// Iterates with a larger Frobenius norm count as diverged.
    fn divergence_bound(&self) -> f64 {
        f64::INFINITY
    }
}

impl Potential for Instance {
    fn value(&self, x: &DMatrix<f64>) -> Result<f64> {
        self.loss(x)
    }

    fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Instance::gradient(self, x)
    }

    fn divergence_bound(&self) -> f64 {
        1e6 * self.x_star.norm()
    }
}

/// `f(x) = |x|_F^2`, whose Gibbs law at inverse temperature `beta` is
/// Gaussian with variance `1/(2 beta)` per coordinate.
#[derive(Clone, Copy, Debug, Default)]
pub struct Quadratic;

impl Potential for Quadratic {
    fn value(&self, x: &DMatrix<f64>) -> Result<f64> {
        Ok(x.norm_squared())
    }

    fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(x * 2.0)
    }
}

/// Noise source for [`langevin_step_with`]. `Zero` turns the chain into
/// gradient descent with rate `h beta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Gaussian,
    Zero,
}

#[derive(Clone, Debug)]
pub struct ChainState {
    pub x: DMatrix<f64>,
    pub step_index: u64,
    pub rng: RngStream,
}

impl ChainState {
    pub fn new(x: DMatrix<f64>, rng: RngStream) -> Self {
        Self { x, step_index: 0, rng }
    }
}

pub fn langevin_step<P: Potential + ?Sized>(pot: &P, cfg: &RunConfig, state: ChainState) -> Result<ChainState> {
    langevin_step_with(pot, cfg.beta, cfg.h, state, NoiseMode::Gaussian)
}

pub fn langevin_step_with<P: Potential + ?Sized>(
    pot: &P,
    beta: f64,
    h: f64,
    mut state: ChainState,
    noise: NoiseMode,
) -> Result<ChainState> {
    let grad = pot.gradient(&state.x)?;
    let mut next = &state.x - grad * (h * beta);
    if noise == NoiseMode::Gaussian {
        let (r, c) = next.shape();
        next += gaussian_matrix(&mut state.rng, r, c, (2.0 * h).sqrt());
    }
    state.step_index += 1;
    let norm = next.norm();
    if !norm.is_finite() || norm > pot.divergence_bound() {
        return Err(Error::DivergedChain { step: state.step_index, norm });
    }
    state.x = next;
    Ok(state)
}

/// Outcome of [`init_gradient_descent`].
#[derive(Clone, Debug)]
pub struct InitOutcome {
    pub x: DMatrix<f64>,
    pub iterations: usize,
    pub perturbations: usize,
    pub grad_norm: f64,
}

/// Perturbed gradient descent from a small random start.
pub fn init_gradient_descent(inst: &Instance, rng: &mut RngStream, tol: f64, max_iters: usize) -> Result<InitOutcome> {
    let (d, k) = (inst.dims.d(), inst.dims.k());
    let b_norm = inst.b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = 1e-2 * (b_norm.sqrt() / (d * k) as f64).max(1e-6);
    let start = gaussian_matrix(rng, d, k, scale);
    init_gradient_descent_from(inst, start, rng, tol, max_iters)
}

/// Gradient descent with Armijo backtracking. At every stationary point
/// (`|grad f| <= tol`) the Hessian is formed by finite differences; if it
/// has a clearly negative eigenvalue an isotropic Gaussian kick of norm
/// `tol` is applied and descent continues, otherwise the point is returned.
pub fn init_gradient_descent_from(
    inst: &Instance,
    start: DMatrix<f64>,
    rng: &mut RngStream,
    tol: f64,
    max_iters: usize,
) -> Result<InitOutcome> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let mut x = start;
    let (mut f, mut g) = inst.loss_and_gradient(&x)?;
    let mut step = 1.0;
    let mut perturbations = 0;
    for iter in 0..=max_iters {
        let gn = g.norm();
        if !gn.is_finite() {
            break;
        }
        if gn <= tol {
            if min_hessian_eigenvalue(inst, &x)? >= 0.0 {
                return Ok(InitOutcome { x, iterations: iter, perturbations, grad_norm: gn });
            }
            let kick = gaussian_matrix(rng, x.nrows(), x.ncols(), 1.0);
            x += &kick * (tol / kick.norm());
            (f, g) = inst.loss_and_gradient(&x)?;
            perturbations += 1;
            continue;
        }
        if iter == max_iters {
            break;
        }
        step *= 2.0;
        // near a critical point the required decrease drops below the rounding
        // error of f; there the change is estimated by the trapezoid rule
        // -(step/2)(|g|^2 + <g_c, g>), exact for quadratics, and the same
        // Armijo constant reduces to <g_c, g> >= 0
        let slack = 64.0 * f64::EPSILON * f.abs();
        loop {
            let cand = &x - &g * step;
            let (fc, gc) = inst.loss_and_gradient(&cand)?;
            let flat = (fc - f).abs() <= slack;
            let accept = if flat { frob_inner(&gc, &g) >= 0.0 } else { fc <= f - 0.5 * step * gn * gn };
            if accept || step < 1e-300 {
                x = cand;
                (f, g) = (fc, gc);
                break;
            }
            step *= 0.5;
        }
    }
    let near = crate::manifold::eta(&OrbitSpec::new(inst.x_star.clone(), Branch::One)?, &x)
        .unwrap_or(f64::NAN)
        .min(crate::manifold::eta(&OrbitSpec::new(inst.x_star.clone(), Branch::Two)?, &x).unwrap_or(f64::NAN));
    Err(Error::InitFailed { iters: max_iters, grad_norm: g.norm(), eta: near })
}

/// Smallest Hessian eigenvalue, or 0 when it is negative only at the level
/// of finite-difference noise.
fn min_hessian_eigenvalue(inst: &Instance, x: &DMatrix<f64>) -> Result<f64> {
    let (d, k) = x.shape();
    let n = d * k;
    let eps = 1e-5 * x.norm().max(1.0);
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        xp[j] += eps;
        let mut xm = x.clone();
        xm[j] -= eps;
        let col = (inst.gradient(&xp)? - inst.gradient(&xm)?) / (2.0 * eps);
        for i in 0..n {
            hess[(i, j)] = col[i];
        }
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let lo = eig.min();
    let hi = eig.amax();
    Ok(if lo < -1e-6 * hi.max(f64::MIN_POSITIVE) { lo } else { 0.0 })
}

/// One retained step of a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: u64,
    pub time: f64,
    /// Squared distance to the starting branch.
    pub eta: f64,
    pub f: f64,
    /// Nearer branch (1 or 2).
    pub branch: u8,
    /// `atan2(U_21, U_11)` of the starting-branch projection, `k = 2` only.
    pub angle: Option<f64>,
    pub s_norm: f64,
    pub y_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub chain: usize,
    pub records: Vec<Record>,
    /// Iterates at the retained steps when requested.
    pub states: Vec<DMatrix<f64>>,
    /// Set when the chain diverged; `records` then stops early.
    pub diverged: Option<Error>,
}

impl Trajectory {
    pub fn etas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.eta).collect()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.angle).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ChainOptions {
    pub record_states: bool,
    pub noise: NoiseMode,
}

/// Observables of `x` relative to the branch of `spec`.
pub fn observe(inst: &Instance, spec: &OrbitSpec, step: u64, h: f64, x: &DMatrix<f64>) -> Result<Record> {
    let (proj, coords) = normal_coordinates(spec, x)?;
    let nearest = project_nearest(spec, x)?;
    Ok(Record {
        step,
        time: step as f64 * h,
        eta: proj.eta(),
        f: inst.loss(x)?,
        branch: nearest.branch.index(),
        angle: orbit_angle(&proj.u),
        s_norm: coords.s_norm(spec),
        y_norm: coords.y_norm(),
    })
}

/// Advance a chain `steps` times, calling `visit` after every step.
pub fn drive<P, F>(
    pot: &P,
    beta: f64,
    h: f64,
    mut state: ChainState,
    steps: u64,
    noise: NoiseMode,
    mut visit: F,
) -> Result<ChainState>
where
    P: Potential + ?Sized,
    F: FnMut(&ChainState) -> Result<()>,
{
    for _ in 0..steps {
        state = langevin_step_with(pot, beta, h, state, noise)?;
        visit(&state)?;
    }
    Ok(state)
}

pub fn run_chains(inst: &Instance, cfg: &RunConfig, x0: &DMatrix<f64>) -> Result<Vec<Trajectory>> {
    run_chains_with(inst, cfg, x0, ChainOptions::default())
}

/// Run `cfg.chains` chains from `x0` in parallel. Chain `c` draws from
/// stream `(cfg.seed, c)`; a step is retained when it is past burn-in and
/// `(step - burnin - 1)` is a multiple of `thin`. Observables are measured
/// against the branch of `x0`.
pub fn run_chains_with(
    inst: &Instance,
    cfg: &RunConfig,
    x0: &DMatrix<f64>,
    opts: ChainOptions,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    if x0.shape() != (inst.dims.d(), inst.dims.k()) {
        return Err(Error::Size(format!("start point has shape {:?}", x0.shape())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("start point is not finite".into()));
    }
    let spec = OrbitSpec::new(x0.clone(), Branch::One)?;
    (0..cfg.chains).into_par_iter().map(|c| run_one(inst, cfg, &spec, c, opts)).collect()
}

fn run_one(inst: &Instance, cfg: &RunConfig, spec: &OrbitSpec, chain: usize, opts: ChainOptions) -> Result<Trajectory> {
    let mut records = Vec::with_capacity(cfg.retained() as usize);
    let mut states = Vec::new();
    let state = ChainState::new(spec.x0().clone(), RngStream::new(cfg.seed, chain as u64));
    let outcome = drive(inst, cfg.beta, cfg.h, state, cfg.steps, opts.noise, |s| {
        let t = s.step_index;
        if t > cfg.burnin && (t - cfg.burnin - 1).is_multiple_of(cfg.thin) {
            records.push(observe(inst, spec, t, cfg.h, &s.x)?);
            if opts.record_states {
                states.push(s.x.clone());
            }
        }
        Ok(())
    });
    let diverged = match outcome {
        Ok(_) => None,
        Err(e @ Error::DivergedChain { .. }) => Some(e),
        Err(e) => return Err(e),
    };
    Ok(Trajectory { chain, records, states, diverged })
}

pub const TRAJECTORY_HEADER: &str = "step,time,eta,f,branch,angle,s_norm,y_norm";

pub fn write_trajectory_csv<W: Write>(records: &[Record], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    if records.is_empty() {
        wtr.write_record(TRAJECTORY_HEADER.split(',')).map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Vec<Record>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != TRAJECTORY_HEADER {
        return Err(Error::Parse(format!("unexpected trajectory header `{header}`")));
    }
    rdr.deserialize().map(|r| r.map_err(|e| Error::Parse(e.to_string()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Dims, SpectrumSpec};
    use crate::operators::{generate_instance, GenerateOptions, Variant};

    fn instance(seed: u64, noiseless: bool) -> Instance {
        let dims = Dims::new(6, 2).unwrap();
        let spec = SpectrumSpec::new(vec![1.5, 1.0]).unwrap();
        let opts = GenerateOptions { noiseless, ..Default::default() };
        generate_instance(dims, &spec, Variant::Factorization, 1e4, &mut RngStream::new(seed, 0), opts).unwrap()
    }

    #[test]
    fn zero_noise_step_is_gradient_descent() {
        let inst = instance(1, false);
        let x = gaussian_matrix(&mut RngStream::new(2, 0), 6, 2, 0.5);
        let state = ChainState::new(x.clone(), RngStream::new(3, 0));
        let next = langevin_step_with(&inst, 2.0, 1e-3, state, NoiseMode::Zero).unwrap();
        let expected = &x - inst.gradient(&x).unwrap() * 2e-3;
        assert_eq!(next.x, expected);
        assert_eq!(next.step_index, 1);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let inst = instance(4, false);
        let cfg = RunConfig::new(1e4, 1e-5, 200, 2, 9).unwrap();
        let a = run_chains(&inst, &cfg, &inst.x_star).unwrap();
        let b = run_chains(&inst, &cfg, &inst.x_star).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.records, tb.records);
        }
        assert_ne!(a[0].records, a[1].records);
        assert_eq!(a[0].records.len() as u64, cfg.retained());
        assert_eq!(a[0].records[0].step, cfg.burnin + 1);
    }

    #[test]
    fn divergence_is_flagged_not_fatal() {
        let inst = instance(5, false);
        let cfg = RunConfig::new(1e4, 1.0, 100, 2, 1).unwrap();
        let traj = run_chains(&inst, &cfg, &inst.x_star).unwrap();
        for t in &traj {
            assert!(matches!(t.diverged, Some(Error::DivergedChain { .. })));
        }
    }

    #[test]
    fn init_from_the_truth_returns_immediately() {
        let inst = instance(6, true);
        let out = init_gradient_descent_from(&inst, inst.x_star.clone(), &mut RngStream::new(0, 0), 1e-8, 100).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.perturbations, 0);
        assert_eq!(out.x, inst.x_star);
    }

    #[test]
    fn init_escapes_the_origin() {
        let inst = instance(7, true);
        let out =
            init_gradient_descent_from(&inst, DMatrix::zeros(6, 2), &mut RngStream::new(1, 0), 1e-9, 100_000).unwrap();
        assert!(out.perturbations >= 1);
        assert!(out.grad_norm <= 1e-9);
        let s1 = OrbitSpec::new(inst.x_star.clone(), Branch::One).unwrap();
        let e = project_nearest(&s1, &out.x).unwrap().eta();
        assert!(e < 1e-8 * inst.x_star.norm_squared());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let inst = instance(8, false);
        let cfg = RunConfig::new(1e4, 1e-5, 100, 1, 3).unwrap();
        let traj = run_chains(&inst, &cfg, &inst.x_star).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj[0].records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(TRAJECTORY_HEADER));
        let back = read_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(back, traj[0].records);

        let mut empty = Vec::new();
        write_trajectory_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim(), TRAJECTORY_HEADER);
    }

    #[test]
    fn angle_column_is_empty_unless_k_is_two() {
        let dims = Dims::new(5, 3).unwrap();
        let spec = SpectrumSpec::uniform(3, 1.0).unwrap();
        let inst = generate_instance(
            dims,
            &spec,
            Variant::Factorization,
            1e4,
            &mut RngStream::new(1, 0),
            GenerateOptions::default(),
        )
        .unwrap();
        let cfg = RunConfig::new(1e4, 1e-6, 20, 1, 3).unwrap();
        let traj = run_chains(&inst, &cfg, &inst.x_star).unwrap();
        assert!(traj[0].records.iter().all(|r| r.angle.is_none()));
        let mut buf = Vec::new();
        write_trajectory_csv(&traj[0].records, &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap().lines().nth(1).unwrap().to_string();
        assert_eq!(line.split(',').nth(5), Some(""));
    }
}
