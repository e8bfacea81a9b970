//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::rng::{gaussian_matrix, RngStream};

/// Frobenius inner product `Tr(A^T B)`.
pub fn frob_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Thin SVD with singular values sorted in decreasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn sorted_svd(m: &DMatrix<f64>) -> SortedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u_sorted = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt_sorted = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    let s_sorted = DVector::from_iterator(order.len(), order.iter().map(|&i| s[i]));
    SortedSvd { u: u_sorted, singular_values: s_sorted, v_t: vt_sorted }
}

/// A Haar-distributed `rows x cols` matrix with orthonormal columns, from the
/// QR decomposition of a Gaussian matrix with the sign of `diag(R)` fixed.
pub fn haar_orthonormal(rng: &mut RngStream, rows: usize, cols: usize) -> DMatrix<f64> {
    assert!(cols <= rows);
    let g = gaussian_matrix(rng, rows, cols, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// A uniformly random rotation in `SO(k)` (`det = +1`).
pub fn random_rotation(rng: &mut RngStream, k: usize) -> DMatrix<f64> {
    let mut q = haar_orthonormal(rng, k, k);
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// A uniformly random orthogonal matrix with `det = -1`.
pub fn random_reflection(rng: &mut RngStream, k: usize) -> DMatrix<f64> {
    let mut q = random_rotation(rng, k);
    q.column_mut(0).neg_mut();
    q
}

/// Orthonormal basis (as columns) of the orthogonal complement of
/// `colspan(x)`. Assumes `x` has full column rank.
pub fn orthonormal_complement(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = x.shape();
    let mut aug = DMatrix::zeros(d, k + d);
    aug.view_mut((0, 0), (d, k)).copy_from(x);
    aug.view_mut((0, k), (d, d)).fill_with_identity();
    let q = aug.qr().q();
    q.columns(k, d - k).into_owned()
}

/// Modified Gram-Schmidt with reorthogonalization over matrices viewed as
/// vectors. Inputs whose residual norm drops below `tol` times their
/// original norm are discarded.
pub fn gram_schmidt(vectors: &[DMatrix<f64>], tol: f64) -> Vec<DMatrix<f64>> {
    let mut basis: Vec<DMatrix<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = frob_inner(b, &w);
                w -= b * c;
            }
        }
        let n = w.norm();
        if n > tol * norm0 {
            basis.push(w / n);
        }
    }
    basis
}

/// `e_i e_j^T` of shape `rows x cols`.
pub fn unit_matrix(rows: usize, cols: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    m[(i, j)] = 1.0;
    m
}

/// Orthonormal basis of the symmetric `k x k` matrices:
/// `e_i e_i^T` and `(e_i e_j^T + e_j e_i^T)/sqrt(2)` for `i < j`.
pub fn symmetric_basis(k: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in i..k {
            let mut m = DMatrix::zeros(k, k);
            if i == j {
                m[(i, i)] = 1.0;
            } else {
                let c = std::f64::consts::FRAC_1_SQRT_2;
                m[(i, j)] = c;
                m[(j, i)] = c;
            }
            out.push(m);
        }
    }
    out
}

/// Orthonormal basis of the skew-symmetric `k x k` matrices,
/// `(e_i e_j^T - e_j e_i^T)/sqrt(2)` for `i < j`.
pub fn skew_basis(k: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            let mut m = DMatrix::zeros(k, k);
            let c = std::f64::consts::FRAC_1_SQRT_2;
            m[(i, j)] = c;
            m[(j, i)] = -c;
            out.push(m);
        }
    }
    out
}

/// Coordinates of a symmetric matrix in [`symmetric_basis`].
pub fn symmetric_coords(s: &DMatrix<f64>) -> Vec<f64> {
    let k = s.nrows();
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in i..k {
            if i == j {
                out.push(s[(i, i)]);
            } else {
                out.push(std::f64::consts::SQRT_2 * 0.5 * (s[(i, j)] + s[(j, i)]));
            }
        }
    }
    out
}

/// Row-major flattening.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_columns_are_orthonormal() {
        let mut rng = RngStream::new(3, 0);
        let q = haar_orthonormal(&mut rng, 7, 3);
        let g = q.transpose() * &q;
        assert!((g - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn rotations_and_reflections_have_the_right_determinant() {
        let mut rng = RngStream::new(4, 0);
        for k in 1..5 {
            assert!((random_rotation(&mut rng, k).determinant() - 1.0).abs() < 1e-12);
            assert!((random_reflection(&mut rng, k).determinant() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn complement_is_orthogonal_to_column_space() {
        let mut rng = RngStream::new(5, 0);
        let x = gaussian_matrix(&mut rng, 6, 2, 1.0);
        let y0 = orthonormal_complement(&x);
        assert_eq!(y0.shape(), (6, 4));
        assert!((x.transpose() * &y0).norm() < 1e-12);
        assert!((y0.transpose() * &y0 - DMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn sorted_svd_reconstructs() {
        let mut rng = RngStream::new(6, 0);
        let m = gaussian_matrix(&mut rng, 4, 3, 1.0);
        let svd = sorted_svd(&m);
        let s = &svd.singular_values;
        assert!(s[0] >= s[1] && s[1] >= s[2]);
        let rebuilt = &svd.u * DMatrix::from_diagonal(s) * &svd.v_t;
        assert!((rebuilt - m).norm() < 1e-12);
    }

    #[test]
    fn symmetric_coordinates_invert_the_basis() {
        let k = 3;
        let basis = symmetric_basis(k);
        let coeffs = [0.3, -1.0, 2.0, 0.5, 0.25, -0.7];
        let mut s = DMatrix::zeros(k, k);
        for (c, b) in coeffs.iter().zip(&basis) {
            s += b * *c;
        }
        let back = symmetric_coords(&s);
        for (a, b) in back.iter().zip(coeffs.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn row_major_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(to_row_major(&m), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(from_row_major(2, 3, &to_row_major(&m)), m);
    }
}
