//! Geometry of the optima orbits `E_1, E_2 = {X0 U : U in O(k), det U = +-1}`.
//!
//! Projection is the branch-constrained orthogonal Procrustes solution. Tube
//! points are parametrized by normal coordinates `(S, Y, U)` through
//!
//! ```text
//! X = X0 U + X0 (X0^T X0)^{-1} S U + Y U,   S symmetric,  X0^T Y = 0,
//! ```
//!
//! and the level-set map `F(X) = (S, Y)` has a normal determinant that is
//! computed numerically here and cross-checked against its closed form.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{
    frob_inner, gram_schmidt, orthonormal_complement, skew_basis, sorted_svd, symmetric_basis, symmetric_coords,
    unit_matrix,
};

/// Connected component of the orbit: `det U = +1` or `det U = -1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    One,
    Two,
}

impl Branch {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            _ => Err(Error::InvalidParameter(format!("branch must be 1 or 2, got {i}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }

    /// Required sign of `det U`.
    pub fn sign(self) -> f64 {
        match self {
            Self::One => 1.0,
            Self::Two => -1.0,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Self::One => Self::Two,
            Self::Two => Self::One,
        }
    }

    fn of_determinant(det: f64) -> Self {
        if det >= 0.0 {
            Self::One
        } else {
            Self::Two
        }
    }
}

/// Relative threshold below which a singular value counts as zero.
const DEGENERACY_TOL: f64 = 1e-12;

/// A reference point `X0` (full column rank) and the branch to project on.
#[derive(Clone, Debug)]
pub struct OrbitSpec {
    x0: DMatrix<f64>,
    branch: Branch,
    /// `X0 (X0^T X0)^{-1}`.
    x0_gram_inv: DMatrix<f64>,
    /// Orthonormal basis of `colspan(X0)^perp`, `d x (d-k)`.
    complement: DMatrix<f64>,
    /// Eigenvalues of `X0^T X0` (squared singular values of `X0`).
    gram_eigenvalues: Vec<f64>,
    tube_radius: f64,
}

impl OrbitSpec {
    pub fn new(x0: DMatrix<f64>, branch: Branch) -> Result<Self> {
        let (d, k) = x0.shape();
        if k == 0 || k > d {
            return Err(Error::Size(format!("reference point has shape {d} x {k}")));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("reference point is not finite".into()));
        }
        let sv = sorted_svd(&x0).singular_values;
        if sv[k - 1] <= DEGENERACY_TOL * sv[0] {
            return Err(Error::InvalidParameter("reference point must have full column rank".into()));
        }
        let gram = x0.transpose() * &x0;
        let gram_inv = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("X0^T X0 is not positive definite".into()))?
            .inverse();
        let x0_gram_inv = &x0 * gram_inv;
        let complement = orthonormal_complement(&x0);
        let gram_eigenvalues: Vec<f64> = sv.iter().map(|s| s * s).collect();
        let sigma_min = sv[k - 1];
        Ok(Self { x0, branch, x0_gram_inv, complement, gram_eigenvalues, tube_radius: 2.0 * sigma_min / k as f64 })
    }

    /// Override the tube radius used by [`decompose`].
    pub fn with_tube_radius(mut self, radius: f64) -> Self {
        self.tube_radius = radius;
        self
    }

    /// The same reference point, projecting onto the other branch.
    pub fn with_branch(&self, branch: Branch) -> Self {
        let mut s = self.clone();
        s.branch = branch;
        s
    }

    pub fn x0(&self) -> &DMatrix<f64> {
        &self.x0
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn d(&self) -> usize {
        self.x0.nrows()
    }

    pub fn k(&self) -> usize {
        self.x0.ncols()
    }

    pub fn sigma_min(&self) -> f64 {
        self.gram_eigenvalues.last().unwrap().sqrt()
    }

    pub fn sigma_max(&self) -> f64 {
        self.gram_eigenvalues[0].sqrt()
    }

    pub fn tube_radius(&self) -> f64 {
        self.tube_radius
    }

    /// `X0 (X0^T X0)^{-1}`.
    pub fn x0_gram_inv(&self) -> &DMatrix<f64> {
        &self.x0_gram_inv
    }

    /// Orthonormal basis of the complement of `colspan(X0)`.
    pub fn complement(&self) -> &DMatrix<f64> {
        &self.complement
    }

    fn check_shape(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != self.x0.shape() {
            return Err(Error::Size(format!("expected {:?}, got {:?}", self.x0.shape(), x.shape())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("input is not finite".into()));
        }
        Ok(())
    }
}

/// Nearest point of an orbit branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    pub pi_x: DMatrix<f64>,
    /// `pi_x = X0 u`, with `det u` matching `branch`.
    pub u: DMatrix<f64>,
    pub branch: Branch,
    pub distance: f64,
}

impl ProjectionResult {
    pub fn eta(&self) -> f64 {
        self.distance * self.distance
    }
}

/// Procrustes core: the maximizer of `Tr(O^T M)` over `O(k)` with
/// `det O` equal to `sign`, or `None` for the unconstrained maximizer.
fn procrustes(m: &DMatrix<f64>, sign: Option<f64>) -> Result<DMatrix<f64>> {
    let k = m.nrows();
    let svd = sorted_svd(m);
    let s = &svd.singular_values;
    let top = s[0];
    if !(top > 0.0) || s[k - 1] <= DEGENERACY_TOL * top {
        return Err(Error::DegenerateProjection { smallest: s[k - 1] });
    }
    let mut w = svd.u;
    let o = &w * &svd.v_t;
    let Some(sign) = sign else {
        return Ok(o);
    };
    if o.determinant() * sign > 0.0 {
        return Ok(o);
    }
    if k >= 2 && s[k - 2] - s[k - 1] <= DEGENERACY_TOL * top {
        return Err(Error::DegenerateProjection { smallest: s[k - 1] });
    }
    // flip the direction paired with the smallest singular value
    w.column_mut(k - 1).neg_mut();
    Ok(w * svd.v_t)
}

fn finish(spec: &OrbitSpec, x: &DMatrix<f64>, u: DMatrix<f64>) -> ProjectionResult {
    let pi_x = &spec.x0 * &u;
    let distance = (x - &pi_x).norm();
    let branch = Branch::of_determinant(u.determinant());
    ProjectionResult { pi_x, u, branch, distance }
}

/// Project `x` onto the branch requested by `spec`.
///
/// Splitting `X = X0 R + V` with `V` orthogonal to `colspan(X0)`, the
/// optimum is `X0 O` with `O` the orthogonal Procrustes solution for
/// `M = X0^T X = X0^T X0 R`; when `det O` has the wrong sign the singular
/// direction with the smallest singular value is flipped.
pub fn project_to_orbit(spec: &OrbitSpec, x: &DMatrix<f64>) -> Result<ProjectionResult> {
    spec.check_shape(x)?;
    let m = spec.x0.transpose() * x;
    let u = procrustes(&m, Some(spec.branch.sign()))?;
    Ok(finish(spec, x, u))
}

/// Project onto whichever branch is nearer (unconstrained over `O(k)`).
pub fn project_nearest(spec: &OrbitSpec, x: &DMatrix<f64>) -> Result<ProjectionResult> {
    spec.check_shape(x)?;
    let m = spec.x0.transpose() * x;
    let u = procrustes(&m, None)?;
    Ok(finish(spec, x, u))
}

/// Squared distance to the branch, `|X - Pi(X)|_F^2`.
pub fn eta(spec: &OrbitSpec, x: &DMatrix<f64>) -> Result<f64> {
    Ok(project_to_orbit(spec, x)?.eta())
}

fn check_on_orbit(spec: &OrbitSpec, x: &DMatrix<f64>) -> Result<()> {
    let p = project_nearest(spec, x)?;
    let e = p.eta();
    if e > 1e-16 * x.norm_squared() {
        return Err(Error::OffManifold { eta: e });
    }
    Ok(())
}

/// Orthonormal basis of `T_X = {X R : R skew}` at an orbit point.
pub fn tangent_basis(spec: &OrbitSpec, x_on_orbit: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    check_on_orbit(spec, x_on_orbit)?;
    let raw: Vec<DMatrix<f64>> = skew_basis(spec.k()).iter().map(|a| x_on_orbit * a).collect();
    Ok(gram_schmidt(&raw, 1e-10))
}

/// Orthonormal basis of `N_X = {X (X^T X)^{-1} S + Y : S symmetric, Y^T X = 0}`.
pub fn normal_basis(spec: &OrbitSpec, x_on_orbit: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    check_on_orbit(spec, x_on_orbit)?;
    let (d, k) = x_on_orbit.shape();
    let gram_inv =
        (x_on_orbit.transpose() * x_on_orbit).try_inverse().ok_or(Error::DegenerateProjection { smallest: 0.0 })?;
    let xg = x_on_orbit * gram_inv;
    let comp = orthonormal_complement(x_on_orbit);
    let mut raw: Vec<DMatrix<f64>> = symmetric_basis(k).iter().map(|s| &xg * s).collect();
    for i in 0..(d - k) {
        for j in 0..k {
            raw.push(comp.column(i) * unit_matrix(1, k, 0, j));
        }
    }
    Ok(gram_schmidt(&raw, 1e-10))
}

/// Normal coordinates of a tube point.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalCoordinates {
    /// Symmetric `k x k`.
    pub s: DMatrix<f64>,
    /// `d x k` with `X0^T y = 0`.
    pub y: DMatrix<f64>,
    /// Along-orbit coordinate.
    pub u: DMatrix<f64>,
}

impl NormalCoordinates {
    /// `|X0 (X0^T X0)^{-1} S|_F`.
    pub fn s_norm(&self, spec: &OrbitSpec) -> f64 {
        (spec.x0_gram_inv() * &self.s).norm()
    }

    pub fn y_norm(&self) -> f64 {
        self.y.norm()
    }

    /// `(S, Y)` flattened in orthonormal coordinates: symmetric-basis
    /// coefficients of `S`, then `complement^T Y` column-major.
    pub fn level_coordinates(&self, spec: &OrbitSpec) -> Vec<f64> {
        let mut out = symmetric_coords(&self.s);
        let z = spec.complement().transpose() * &self.y;
        out.extend(z.iter());
        out
    }
}

/// Inverse of [`recompose`] on the tube.
pub fn decompose(spec: &OrbitSpec, x: &DMatrix<f64>) -> Result<NormalCoordinates> {
    let (proj, coords) = normal_coordinates(spec, x)?;
    if proj.distance > spec.tube_radius {
        return Err(Error::TubeExceeded { distance: proj.distance, radius: spec.tube_radius });
    }
    Ok(coords)
}

/// Projection plus `(S, Y, U)` without the tube-membership check. Outside
/// the tube the coordinates still satisfy the reconstruction identity but
/// are no longer guaranteed unique.
pub fn normal_coordinates(spec: &OrbitSpec, x: &DMatrix<f64>) -> Result<(ProjectionResult, NormalCoordinates)> {
    let proj = project_to_orbit(spec, x)?;
    let u = proj.u.clone();
    let delta_rot = (x - &proj.pi_x) * u.transpose();
    let s_raw = spec.x0.transpose() * &delta_rot;
    let y = &delta_rot - &spec.x0_gram_inv * &s_raw;
    let s = (&s_raw + s_raw.transpose()) * 0.5;
    Ok((proj, NormalCoordinates { s, y, u }))
}

/// `X0 U + X0 (X0^T X0)^{-1} S U + Y U`.
pub fn recompose(spec: &OrbitSpec, coords: &NormalCoordinates) -> DMatrix<f64> {
    let level = &spec.x0 + &spec.x0_gram_inv * &coords.s + &coords.y;
    level * &coords.u
}

/// Numeric normal determinant with conditioning metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalDeterminant {
    pub value: f64,
    /// Ratio of the largest to smallest nonzero singular value of `dF`.
    pub condition: f64,
    pub near_singular: bool,
}

/// Relative finite-difference step for numeric Jacobians.
pub const FD_RELATIVE_STEP: f64 = 1e-5;

/// `|det|` of `dF` restricted to the orthogonal complement of its kernel,
/// for `F(X) = (S, Y)` in orthonormal coordinates. `dF` is built by central
/// differences along the standard basis of `R^{d x k}`.
pub fn normal_determinant(spec: &OrbitSpec, x: &DMatrix<f64>) -> Result<NormalDeterminant> {
    decompose(spec, x)?;
    let (d, k) = x.shape();
    let rows = spec.complement.ncols() * k + k * (k + 1) / 2;
    let step = FD_RELATIVE_STEP * x.norm().max(f64::MIN_POSITIVE);
    let mut jac = DMatrix::zeros(rows, d * k);
    for col in 0..d * k {
        let (i, j) = (col % d, col / d);
        let mut plus = x.clone();
        plus[(i, j)] += step;
        let mut minus = x.clone();
        minus[(i, j)] -= step;
        let fp = decompose(spec, &plus)?.level_coordinates(spec);
        let fm = decompose(spec, &minus)?.level_coordinates(spec);
        for r in 0..rows {
            jac[(r, col)] = (fp[r] - fm[r]) / (2.0 * step);
        }
    }
    Ok(restricted_determinant(&jac))
}

/// Product of the singular values of a wide full-row-rank Jacobian, i.e.
/// `|det|` of its restriction to the complement of the kernel.
pub fn restricted_determinant(jac: &DMatrix<f64>) -> NormalDeterminant {
    let sv = sorted_svd(jac).singular_values;
    let n = jac.nrows().min(jac.ncols());
    let value: f64 = sv.iter().take(n).product();
    let smallest = sv[n - 1];
    let condition = if smallest > 0.0 { sv[0] / smallest } else { f64::INFINITY };
    NormalDeterminant { value, condition, near_singular: condition > 1e8 }
}

/// Closed form of the normal determinant on the orbit:
/// `1 / sqrt(prod_i 1/l_i * prod_{i<j} (1/l_i + 1/l_j)/2)` with `l_i` the
/// eigenvalues of `X0^T X0`. The `Y` block is an isometry and contributes 1.
pub fn normal_determinant_closed_form(spec: &OrbitSpec) -> f64 {
    let l = &spec.gram_eigenvalues;
    let mut det = 1.0;
    for i in 0..l.len() {
        det *= 1.0 / l[i];
        for j in (i + 1)..l.len() {
            det *= 0.5 * (1.0 / l[i] + 1.0 / l[j]);
        }
    }
    1.0 / det.sqrt()
}

/// `sqrt(det(I_k kron (X0^T X0)^{-1}))`, the volume factor of `S -> X0 (X0^T X0)^{-1} S`
/// over all `k x k` matrices. Equals [`normal_determinant_closed_form`]
/// when `X0` has orthonormal columns.
pub fn kron_volume_factor(spec: &OrbitSpec) -> f64 {
    let k = spec.k() as f64;
    spec.gram_eigenvalues.iter().map(|l| l.powf(-k / 2.0)).product()
}

/// Lower bound `2 sigma_min(X0) / k` on the distance between the branches.
pub fn separation_lower_bound(spec: &OrbitSpec) -> f64 {
    2.0 * spec.sigma_min() / spec.k() as f64
}

/// Scale `2 sigma_min / (k D)` below which rescaling a point at distance at
/// most `D` along its normal ray keeps its projection.
pub fn tubular_radius(spec: &OrbitSpec, working_distance: f64) -> f64 {
    2.0 * spec.sigma_min() / (spec.k() as f64 * working_distance)
}

/// Orbit angle `atan2(U_21, U_11)` in `[0, 2 pi)`; defined for `k = 2`.
pub fn orbit_angle(u: &DMatrix<f64>) -> Option<f64> {
    if u.shape() != (2, 2) {
        return None;
    }
    Some(u[(1, 0)].atan2(u[(0, 0)]).rem_euclid(std::f64::consts::TAU))
}

/// `|<a, b>|` helper for basis checks.
pub fn abs_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    frob_inner(a, b).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_reflection, random_rotation};
    use crate::rng::{gaussian_matrix, RngStream};

    fn spec(d: usize, k: usize, seed: u64) -> OrbitSpec {
        let x0 = gaussian_matrix(&mut RngStream::new(seed, 0), d, k, 1.0);
        OrbitSpec::new(x0, Branch::One).unwrap()
    }

    fn rotation2(theta: f64) -> DMatrix<f64> {
        let (s, c) = theta.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
    }

    #[test]
    fn on_orbit_points_project_to_themselves() {
        let sp = spec(5, 3, 1);
        let u = random_rotation(&mut RngStream::new(2, 0), 3);
        let x = sp.x0() * &u;
        let p = project_to_orbit(&sp, &x).unwrap();
        assert!(p.distance < 1e-12);
        assert!((&p.u - &u).norm() < 1e-10);
        assert_eq!(p.branch, Branch::One);
        assert!((p.u.transpose() * &p.u - DMatrix::identity(3, 3)).norm() < 1e-10);
    }

    #[test]
    fn rank_one_sign_orbit() {
        let x0 = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let sp = OrbitSpec::new(x0.clone(), Branch::Two).unwrap();
        let p = project_to_orbit(&sp, &(-&x0)).unwrap();
        assert!(p.distance < 1e-15);
        assert_eq!(p.u[(0, 0)], -1.0);
        let p1 = project_to_orbit(&sp.with_branch(Branch::One), &(-&x0)).unwrap();
        assert!((p1.distance - 2.0 * x0.norm()).abs() < 1e-12);
    }

    #[test]
    fn branch_two_returns_a_reflection() {
        let sp = spec(4, 2, 3).with_branch(Branch::Two);
        let x = gaussian_matrix(&mut RngStream::new(4, 0), 4, 2, 1.0);
        let p = project_to_orbit(&sp, &x).unwrap();
        assert!((p.u.determinant() + 1.0).abs() < 1e-10);
        assert_eq!(p.branch, Branch::Two);
    }

    #[test]
    fn procrustes_matches_a_fine_angle_grid() {
        let sp = spec(3, 2, 5);
        let x = gaussian_matrix(&mut RngStream::new(6, 0), 3, 2, 1.0);
        let p = project_to_orbit(&sp, &x).unwrap();
        let n = 100_000;
        let best = (0..n)
            .map(|i| {
                let th = std::f64::consts::TAU * i as f64 / n as f64;
                (sp.x0() * rotation2(th) - &x).norm()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(p.distance <= best + 1e-12);
        assert!(best - p.distance < 1e-5);
    }

    #[test]
    fn degenerate_projection_is_reported() {
        let x0 = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let sp = OrbitSpec::new(x0, Branch::One).unwrap();
        // orthogonal to colspan(X0): M = 0
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(project_to_orbit(&sp, &x), Err(Error::DegenerateProjection { .. })));
    }

    #[test]
    fn normal_ray_is_exact() {
        let sp = spec(6, 2, 7);
        let basis = normal_basis(&sp, sp.x0()).unwrap();
        let dir = &basis[4];
        for t in [1e-3, 1e-2, 5e-2] {
            let x = sp.x0() + dir * t;
            let e = eta(&sp, &x).unwrap();
            assert!((e - t * t).abs() < 1e-8, "t={t}: eta={e}");
        }
    }

    #[test]
    fn eta_scales_quadratically_along_the_ray() {
        let sp = spec(5, 2, 8);
        let x = sp.x0() + gaussian_matrix(&mut RngStream::new(9, 0), 5, 2, 0.05);
        let p = project_to_orbit(&sp, &x).unwrap();
        for c in [0.1, 0.5, 0.9] {
            let xc = &p.pi_x + (&x - &p.pi_x) * c;
            let pc = project_to_orbit(&sp, &xc).unwrap();
            assert!((pc.eta() - c * c * p.eta()).abs() < 1e-12);
            assert!((&pc.pi_x - &p.pi_x).norm() < 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let sp = spec(5, 3, 10);
        let x = gaussian_matrix(&mut RngStream::new(11, 0), 5, 3, 1.0);
        let p = project_to_orbit(&sp, &x).unwrap();
        let q = project_to_orbit(&sp, &p.pi_x).unwrap();
        assert!(q.distance < 1e-12 * p.pi_x.norm());
        assert!((&q.pi_x - &p.pi_x).norm() < 1e-12);
    }

    #[test]
    fn tangent_basis_shapes() {
        let x0 = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let sp = OrbitSpec::new(x0.clone(), Branch::One).unwrap();
        assert!(tangent_basis(&sp, &x0).unwrap().is_empty());

        let sp2 = OrbitSpec::new(DMatrix::identity(2, 2), Branch::One).unwrap();
        let t = tangent_basis(&sp2, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(t.len(), 1);
        let gen = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]) / 2f64.sqrt();
        assert!(abs_inner(&t[0], &gen) > 1.0 - 1e-12);
    }

    #[test]
    fn tangent_and_normal_bases_are_orthonormal_and_complete() {
        let sp = spec(5, 3, 12);
        let x = sp.x0() * random_rotation(&mut RngStream::new(13, 0), 3);
        let t = tangent_basis(&sp, &x).unwrap();
        let n = normal_basis(&sp, &x).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(n.len(), 15 - 3);
        let all: Vec<_> = t.iter().chain(n.iter()).collect();
        for (i, a) in all.iter().enumerate() {
            assert!((a.norm() - 1.0).abs() < 1e-12);
            for b in &all[i + 1..] {
                assert!(abs_inner(a, b) < 1e-12);
            }
        }
        let z = gaussian_matrix(&mut RngStream::new(14, 0), 5, 3, 1.0);
        let mut rebuilt = DMatrix::zeros(5, 3);
        for b in &all {
            rebuilt += *b * frob_inner(b, &z);
        }
        assert!((rebuilt - z).norm() < 1e-10);
    }

    #[test]
    fn rank_one_normal_space_is_everything() {
        let x0 = DMatrix::from_column_slice(2, 1, &[0.6, 0.8]);
        let sp = OrbitSpec::new(x0.clone(), Branch::One).unwrap();
        assert_eq!(normal_basis(&sp, &x0).unwrap().len(), 2);
    }

    #[test]
    fn off_manifold_basis_request_fails() {
        let sp = spec(4, 2, 15);
        let x = sp.x0() + DMatrix::from_element(4, 2, 0.1);
        assert!(matches!(tangent_basis(&sp, &x), Err(Error::OffManifold { .. })));
        assert!(matches!(normal_basis(&sp, &x), Err(Error::OffManifold { .. })));
    }

    #[test]
    fn decompose_on_orbit_and_constructive_inverse() {
        let sp = spec(6, 2, 16);
        let u = rotation2(0.7);
        let c = decompose(&sp, &(sp.x0() * &u)).unwrap();
        assert!(c.s.norm() < 1e-12 && c.y.norm() < 1e-12);
        assert!((&c.u - &u).norm() < 1e-10);

        let mut rng = RngStream::new(17, 0);
        let a = gaussian_matrix(&mut rng, 2, 2, 0.01);
        let s0 = &a + a.transpose();
        let raw = gaussian_matrix(&mut rng, 6, 2, 0.01);
        let y0 = sp.complement() * (sp.complement().transpose() * raw);
        let x = sp.x0() + sp.x0_gram_inv() * &s0 + &y0;
        let c = decompose(&sp, &x).unwrap();
        assert!((&c.s - &s0).norm() < 1e-9);
        assert!((&c.y - &y0).norm() < 1e-9);
        assert!((&c.u - DMatrix::identity(2, 2)).norm() < 1e-9);
    }

    #[test]
    fn coordinate_invariants_and_norm_identity() {
        let sp = spec(8, 3, 18);
        let x = sp.x0() * random_rotation(&mut RngStream::new(19, 0), 3)
            + gaussian_matrix(&mut RngStream::new(20, 0), 8, 3, 0.02);
        let c = decompose(&sp, &x).unwrap();
        assert!((&c.s - c.s.transpose()).norm() < 1e-10);
        assert!((sp.x0().transpose() * &c.y).norm() < 1e-10 * c.y.norm() * sp.x0().norm());
        let e = eta(&sp, &x).unwrap();
        assert!((c.s_norm(&sp).powi(2) + c.y_norm().powi(2) - e).abs() < 1e-12);
    }

    #[test]
    fn recompose_identities() {
        let sp = spec(5, 2, 21);
        let id = NormalCoordinates { s: DMatrix::zeros(2, 2), y: DMatrix::zeros(5, 2), u: DMatrix::identity(2, 2) };
        assert_eq!(recompose(&sp, &id), sp.x0().clone());

        let mut rng = RngStream::new(22, 0);
        let a = gaussian_matrix(&mut rng, 2, 2, 0.1);
        let raw = gaussian_matrix(&mut rng, 5, 2, 0.1);
        let c = NormalCoordinates {
            s: &a + a.transpose(),
            y: sp.complement() * (sp.complement().transpose() * raw),
            u: rotation2(1.1),
        };
        let base = sp.x0() * &c.u;
        let scaled = NormalCoordinates { s: &c.s * 0.3, y: &c.y * 0.3, u: c.u.clone() };
        let lhs = recompose(&sp, &scaled) - &base;
        let rhs = (recompose(&sp, &c) - &base) * 0.3;
        assert!((lhs - rhs).norm() < 1e-14);

        let flip = NormalCoordinates { u: -&c.u, ..c.clone() };
        assert!((recompose(&sp, &flip) - recompose(&sp, &c)).norm() > 1.0);
    }

    #[test]
    fn decompose_outside_the_tube_fails() {
        let sp = spec(5, 2, 23).with_tube_radius(0.01);
        let x = sp.x0() + gaussian_matrix(&mut RngStream::new(24, 0), 5, 2, 0.1);
        assert!(matches!(decompose(&sp, &x), Err(Error::TubeExceeded { .. })));
    }

    #[test]
    fn numeric_normal_determinant_matches_closed_form_near_the_orbit() {
        for (k, seed) in [(1, 30), (2, 31), (3, 32)] {
            let sp = spec(6, k, seed);
            let x = sp.x0() * random_rotation(&mut RngStream::new(seed, 1), k)
                + gaussian_matrix(&mut RngStream::new(seed, 2), 6, k, 1e-4);
            let nd = normal_determinant(&sp, &x).unwrap();
            let cf = normal_determinant_closed_form(&sp);
            assert!((nd.value - cf).abs() / cf < 1e-6, "k={k}: {} vs {cf}", nd.value);
            assert!(!nd.near_singular);
        }
    }

    #[test]
    fn rank_one_determinant_is_exact_everywhere() {
        let x0 = DMatrix::from_column_slice(4, 1, &[1.0, 0.5, -2.0, 0.3]);
        let sp = OrbitSpec::new(x0.clone(), Branch::One).unwrap();
        let cf = normal_determinant_closed_form(&sp);
        assert!((cf - x0.norm()).abs() < 1e-12);
        for seed in 0..5 {
            let x = &x0 + gaussian_matrix(&mut RngStream::new(seed, 0), 4, 1, 0.3);
            let nd = normal_determinant(&sp, &x).unwrap();
            assert!((nd.value - cf).abs() / cf < 1e-8);
        }
    }

    #[test]
    fn kron_factor_agrees_only_for_orthonormal_columns() {
        let q = crate::linalg::haar_orthonormal(&mut RngStream::new(40, 0), 5, 2);
        let sp = OrbitSpec::new(q, Branch::One).unwrap();
        assert!((kron_volume_factor(&sp) - normal_determinant_closed_form(&sp)).abs() < 1e-12);
        let sp2 = OrbitSpec::new(sp.x0() * 2.0, Branch::One).unwrap();
        assert!((normal_determinant_closed_form(&sp2) - 8.0).abs() < 1e-9);
        assert!((kron_volume_factor(&sp2) - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn separation_bound_holds_and_is_tight_for_k1() {
        let x0 = DMatrix::from_column_slice(3, 1, &[0.0, 3.0, 4.0]);
        let sp = OrbitSpec::new(x0.clone(), Branch::One).unwrap();
        assert!((separation_lower_bound(&sp) - 10.0).abs() < 1e-12);
        assert!(((&x0 - (-&x0)).norm() - 10.0).abs() < 1e-12);

        let sp2 = spec(4, 2, 41);
        let bound = separation_lower_bound(&sp2);
        let mut rng = RngStream::new(42, 0);
        for _ in 0..2000 {
            let u = random_rotation(&mut rng, 2);
            let v = random_reflection(&mut rng, 2);
            assert!((sp2.x0() * (u - v)).norm() >= bound);
        }
        let scaled = OrbitSpec::new(sp2.x0() * 3.0, Branch::One).unwrap();
        assert!((separation_lower_bound(&scaled) - 3.0 * bound).abs() < 1e-12);
    }

    #[test]
    fn tube_radius_ray_test() {
        let sp = spec(5, 2, 43);
        assert!((tubular_radius(&sp, 1.0) - 2.0 * sp.sigma_min() / 2.0).abs() < 1e-15);
        let x = sp.x0() * rotation2(0.4);
        let basis = normal_basis(&sp, &x).unwrap();
        let r = 0.9 * tubular_radius(&sp, 1.0);
        for n in &basis {
            let p = project_to_orbit(&sp, &(&x + n * r)).unwrap();
            assert!((&p.pi_x - &x).norm() < 1e-9);
        }
    }

    #[test]
    fn rank_one_nearest_branch_flips_at_the_midpoint() {
        let sigma = 2.0;
        let x0 = DMatrix::from_column_slice(2, 1, &[sigma, 0.0]);
        let sp = OrbitSpec::new(x0.clone(), Branch::One).unwrap();
        let inward = DMatrix::from_column_slice(2, 1, &[-1.0, 0.0]);
        let before = project_nearest(&sp, &(&x0 + &inward * (sigma - 1e-9))).unwrap();
        let after = project_nearest(&sp, &(&x0 + &inward * (sigma + 1e-9))).unwrap();
        assert_eq!(before.branch, Branch::One);
        assert_eq!(after.branch, Branch::Two);
        assert!(sigma < tubular_radius(&sp, 1.0));
    }

    #[test]
    fn orbit_angle_of_rotations() {
        let a = orbit_angle(&rotation2(1.25)).unwrap();
        assert!((a - 1.25).abs() < 1e-15);
        let b = orbit_angle(&rotation2(-0.5)).unwrap();
        assert!((b - (std::f64::consts::TAU - 0.5)).abs() < 1e-12);
        assert!(orbit_angle(&DMatrix::identity(3, 3)).is_none());
    }
}
