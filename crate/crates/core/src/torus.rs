//! Toy problem in `R^3`: the optima form the unit circle in the `z = 0`
//! plane and `f(x) = dist(x, circle)^2 = (rho - 1)^2 + z^2`. Level sets of
//! the normal coordinates `F(x) = (s, v)` are circles of constant `s, v`,
//! and the chart is
//!
//! ```text
//! T(s, u, v) = ((1 + s cos v) cos u, (1 + s cos v) sin u, s sin v).
//! ```

use std::f64::consts::{PI, TAU};
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifold::{restricted_determinant, FD_RELATIVE_STEP};
use crate::rng::RngStream;

pub type Point = [f64; 3];

fn radial(x: &Point) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("point is not finite".into()));
    }
    let rho = x[0].hypot(x[1]);
    if rho < 1e-14 {
        return Err(Error::DegenerateProjection { smallest: rho });
    }
    Ok(rho)
}

pub fn torus_loss(x: &Point) -> Result<f64> {
    let rho = radial(x)?;
    Ok((rho - 1.0).powi(2) + x[2] * x[2])
}

pub fn torus_gradient(x: &Point) -> Result<Point> {
    let rho = radial(x)?;
    let c = 2.0 * (rho - 1.0) / rho;
    Ok([c * x[0], c * x[1], 2.0 * x[2]])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusCoords {
    pub s: f64,
    pub u: f64,
    pub v: f64,
}

pub fn torus_coords(x: &Point) -> Result<TorusCoords> {
    let rho = radial(x)?;
    let (a, z) = (rho - 1.0, x[2]);
    let s = a.hypot(z);
    let u = x[1].atan2(x[0]).rem_euclid(TAU);
    let v = if s == 0.0 { 0.0 } else { z.atan2(a).rem_euclid(TAU) };
    Ok(TorusCoords { s, u, v })
}

pub fn torus_point(c: &TorusCoords) -> Point {
    let r = 1.0 + c.s * c.v.cos();
    [r * c.u.cos(), r * c.u.sin(), c.s * c.v.sin()]
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

/// Numeric `|det|` of `dF` on the complement of its kernel for
/// `F = (s, v)`, by central differences. Analytically `1/s`.
pub fn torus_normal_determinant(x: &Point) -> Result<f64> {
    let c = torus_coords(x)?;
    if c.s <= 0.0 {
        return Err(Error::Domain("normal determinant is singular at s = 0".into()));
    }
    let norm = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    let step = FD_RELATIVE_STEP * norm;
    let mut jac = DMatrix::zeros(2, 3);
    for j in 0..3 {
        let mut p = *x;
        p[j] += step;
        let mut m = *x;
        m[j] -= step;
        let (cp, cm) = (torus_coords(&p)?, torus_coords(&m)?);
        jac[(0, j)] = (cp.s - cm.s) / (2.0 * step);
        jac[(1, j)] = wrap(cp.v - cm.v) / (2.0 * step);
    }
    Ok(restricted_determinant(&jac).value)
}

/// Test functions for [`torus_decomposition_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    One,
    CosU,
    SSquared,
    CosV,
}

impl TestFunction {
    pub const ALL: [TestFunction; 4] = [Self::One, Self::CosU, Self::SSquared, Self::CosV];

    pub fn eval(self, c: &TorusCoords) -> f64 {
        match self {
            Self::One => 1.0,
            Self::CosU => c.u.cos(),
            Self::SSquared => c.s * c.s,
            Self::CosV => c.v.cos(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::One => "one",
            Self::CosU => "cos_u",
            Self::SSquared => "s2",
            Self::CosV => "cos_v",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown test function `{s}`")))
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Golub–Welsch).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        let m = i.max(j) as f64;
        if i.abs_diff(j) == 1 {
            m / (4.0 * m * m - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn map_nodes(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    x.iter().zip(&w).map(|(xi, wi)| (a + half * (xi + 1.0), half * wi)).collect()
}

/// Both sides of the level-set decomposition identity for `chi` under the
/// density `exp(-beta f)` restricted to the solid torus `s <= s_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCheck {
    /// Direct average in cylindrical coordinates `(rho, phi, z)`.
    pub lhs: f64,
    /// Iterated average: outer `(s, v)` weighted by `exp(-beta s^2) / det`,
    /// inner average along the level circle.
    pub rhs: f64,
    /// Both quadratures agreed with their half-resolution versions.
    pub converged: bool,
}

/// Quadrature resolution used by [`torus_decomposition_check`].
pub const QUAD_NODES: usize = 48;
const CONVERGENCE_TOL: f64 = 1e-9;

fn lhs_average(beta: f64, chi: TestFunction, s_max: f64, n: usize) -> f64 {
    // polar substitution about the core circle in the (rho, z) half-plane,
    // rho = 1 + r cos a, z = r sin a, so d rho dz = r dr da; test functions
    // such as cos v are then smooth in the integration variables
    let radius = map_nodes(n, 0.0, s_max);
    let na = 2 * n;
    let nphi = 2 * n;
    let (mut num, mut den) = (0.0, 0.0);
    for &(r, wr) in &radius {
        for ja in 0..na {
            let a = TAU * ja as f64 / na as f64;
            let rho = 1.0 + r * a.cos();
            let z = r * a.sin();
            let d2 = (rho - 1.0).powi(2) + z * z;
            let w0 = wr * r * TAU / na as f64 * rho * (-beta * d2).exp();
            for j in 0..nphi {
                let phi = TAU * j as f64 / nphi as f64;
                let w = w0 * TAU / nphi as f64;
                let c = torus_coords(&[rho * phi.cos(), rho * phi.sin(), z]).expect("off axis");
                num += w * chi.eval(&c);
                den += w;
            }
        }
    }
    num / den
}

fn rhs_average(beta: f64, chi: TestFunction, s_max: f64, n: usize) -> f64 {
    let s_nodes = map_nodes(n, 0.0, s_max);
    let nv = 2 * n;
    let nu = 2 * n;
    let (mut num, mut den) = (0.0, 0.0);
    for &(s, ws) in &s_nodes {
        // q(s, v) ~ exp(-beta s^2) / det(dF) times level-circle length
        let outer = ws * (-beta * s * s).exp() * s;
        for jv in 0..nv {
            let v = TAU * jv as f64 / nv as f64;
            let length_element = 1.0 + s * v.cos();
            let mut inner = 0.0;
            for ju in 0..nu {
                let u = TAU * ju as f64 / nu as f64;
                inner += chi.eval(&TorusCoords { s, u, v });
            }
            inner /= nu as f64;
            let w = outer * TAU / nv as f64 * length_element * TAU;
            num += w * inner;
            den += w;
        }
    }
    num / den
}

pub fn torus_decomposition_check(beta: f64, chi: TestFunction, s_max: f64) -> Result<DecompositionCheck> {
    if !(s_max > 0.0 && s_max < 1.0) {
        return Err(Error::InvalidParameter(format!("s_max must lie in (0, 1), got {s_max}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let lhs = lhs_average(beta, chi, s_max, QUAD_NODES);
    let rhs = rhs_average(beta, chi, s_max, QUAD_NODES);
    let lhs_half = lhs_average(beta, chi, s_max, QUAD_NODES / 2);
    let rhs_half = rhs_average(beta, chi, s_max, QUAD_NODES / 2);
    // averages of bounded test functions: absolute tolerance near zero
    let scale = lhs.abs().max(1.0);
    let converged =
        (lhs - lhs_half).abs() <= CONVERGENCE_TOL * scale && (rhs - rhs_half).abs() <= CONVERGENCE_TOL * scale;
    Ok(DecompositionCheck { lhs, rhs, converged })
}

/// `E[s^2]` under the density `s exp(-beta s^2)` on `[0, s_max]`.
pub fn expected_s_squared(beta: f64, s_max: f64) -> f64 {
    let a2 = s_max * s_max;
    let e = (-beta * a2).exp();
    1.0 / beta - a2 * e / (1.0 - e)
}

/// Post-burn-in samples of a torus Langevin chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusSample {
    pub chain: usize,
    pub step: u64,
    pub s: f64,
    pub u: f64,
    pub v: f64,
}

/// Langevin chains on [`torus_loss`], started at `(1, 0, 0)`; chain `c`
/// uses stream `(cfg.seed, c)` and retention follows the sampler's rule.
pub fn torus_chains(cfg: &RunConfig) -> Result<Vec<TorusSample>> {
    cfg.validate()?;
    let per_chain: Vec<Result<Vec<TorusSample>>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngStream::new(cfg.seed, c as u64);
            let mut x: Point = [1.0, 0.0, 0.0];
            let noise = (2.0 * cfg.h).sqrt();
            let rate = cfg.h * cfg.beta;
            let mut out = Vec::with_capacity(cfg.retained() as usize);
            for step in 1..=cfg.steps {
                let g = torus_gradient(&x)?;
                for i in 0..3 {
                    x[i] += -rate * g[i] + noise * rng.standard_normal();
                }
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::DivergedChain { step, norm: f64::NAN });
                }
                if step > cfg.burnin && (step - cfg.burnin - 1).is_multiple_of(cfg.thin) {
                    let tc = torus_coords(&x)?;
                    out.push(TorusSample { chain: c, step, s: tc.s, u: tc.u, v: tc.v });
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_chain {
        all.extend(r?);
    }
    Ok(all)
}

pub fn write_samples_csv<W: Write>(samples: &[TorusSample], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in samples {
        wtr.serialize(s).map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}
