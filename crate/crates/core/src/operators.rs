//! Measurement operators, the loss `f(X) = |A(X X^T) - b|^2` and its
//! gradient, and generation of noisy posterior instances.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{Dims, SpectrumSpec};
use crate::error::{Error, Result};
use crate::linalg::{from_row_major, haar_orthonormal, sorted_svd, to_row_major};
use crate::rng::{gaussian_matrix, RngStream};

/// A linear map from `d x d` matrices to observation vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementOperator {
    /// Identity measurements: `A(M) = vec(M)` (column-major, length `d^2`).
    Factorization { d: usize },
    /// `A(M)_i = Tr(A_i^T M)` for dense `d x d` matrices `A_i`.
    Sensing { matrices: Vec<DMatrix<f64>> },
    /// Observed entries of `M` on `mask`, sorted row-major.
    Completion { d: usize, mask: Vec<(usize, usize)>, p: f64 },
}

impl MeasurementOperator {
    pub fn completion(d: usize, mut mask: Vec<(usize, usize)>, p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidParameter(format!("p must lie in (0, 1], got {p}")));
        }
        if let Some(&(i, j)) = mask.iter().find(|(i, j)| *i >= d || *j >= d) {
            return Err(Error::Size(format!("mask entry ({i}, {j}) outside {d} x {d}")));
        }
        mask.sort_unstable();
        mask.dedup();
        Ok(Self::Completion { d, mask, p })
    }

    pub fn sensing(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = matrices.first() else {
            return Err(Error::InvalidParameter("sensing needs L >= 1 matrices".into()));
        };
        let d = first.nrows();
        if matrices.iter().any(|a| a.shape() != (d, d)) {
            return Err(Error::Size("sensing matrices must all be d x d".into()));
        }
        Ok(Self::Sensing { matrices })
    }

    pub fn d(&self) -> usize {
        match self {
            Self::Factorization { d } | Self::Completion { d, .. } => *d,
            Self::Sensing { matrices } => matrices[0].nrows(),
        }
    }

    /// Length of the observation vector.
    pub fn output_len(&self) -> usize {
        match self {
            Self::Factorization { d } => d * d,
            Self::Sensing { matrices } => matrices.len(),
            Self::Completion { mask, .. } => mask.len(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Factorization { .. } => "factorization",
            Self::Sensing { .. } => "sensing",
            Self::Completion { .. } => "completion",
        }
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> Result<Vec<f64>> {
        let d = self.d();
        if m.shape() != (d, d) {
            return Err(Error::Size(format!("operator expects a {d} x {d} matrix, got {:?}", m.shape())));
        }
        Ok(match self {
            Self::Factorization { .. } => m.as_slice().to_vec(),
            Self::Sensing { matrices } => matrices.iter().map(|a| a.dot(m)).collect(),
            Self::Completion { mask, .. } => mask.iter().map(|&(i, j)| m[(i, j)]).collect(),
        })
    }

    /// The adjoint map, `<A(M), v> = <M, A*(v)>`.
    pub fn adjoint(&self, v: &[f64]) -> Result<DMatrix<f64>> {
        if v.len() != self.output_len() {
            return Err(Error::Size(format!("adjoint expects length {}, got {}", self.output_len(), v.len())));
        }
        let d = self.d();
        Ok(match self {
            Self::Factorization { .. } => DMatrix::from_column_slice(d, d, v),
            Self::Sensing { matrices } => {
                let mut out = DMatrix::zeros(d, d);
                for (a, &vi) in matrices.iter().zip(v) {
                    out += a * vi;
                }
                out
            }
            Self::Completion { mask, .. } => {
                let mut out = DMatrix::zeros(d, d);
                for (&(i, j), &vi) in mask.iter().zip(v) {
                    out[(i, j)] += vi;
                }
                out
            }
        })
    }
}

/// Operator family and its generation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Factorization,
    /// `l` Gaussian sensing matrices with variance `1/l` per entry.
    Sensing {
        l: usize,
    },
    /// Entries observed independently with probability `p`.
    Completion {
        p: f64,
    },
}

/// Knobs for [`generate_instance`] beyond the model itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    /// Skip the observation noise (the `beta -> infinity` path).
    pub noiseless: bool,
    /// Redraw an empty completion mask instead of failing.
    pub retry_empty_mask: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { noiseless: false, retry_empty_mask: true }
    }
}

/// A sampling problem: ground truth, operator, observations, temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub dims: Dims,
    pub spectrum: SpectrumSpec,
    pub x_star: DMatrix<f64>,
    pub operator: MeasurementOperator,
    pub b: Vec<f64>,
    pub beta: f64,
    pub seed: u64,
    /// `(d/k) max_i |e_i^T U|^2` for the left singular vectors of `M*`;
    /// only computed for completion.
    pub incoherence_mu: Option<f64>,
}

impl Instance {
    /// Assemble an instance from parts, checking shapes.
    pub fn from_parts(x_star: DMatrix<f64>, operator: MeasurementOperator, b: Vec<f64>, beta: f64) -> Result<Self> {
        let dims = Dims::new(x_star.nrows(), x_star.ncols())?;
        if operator.d() != dims.d() {
            return Err(Error::Size("operator and x_star disagree on d".into()));
        }
        if b.len() != operator.output_len() {
            return Err(Error::Size(format!("b has length {}, operator produces {}", b.len(), operator.output_len())));
        }
        let sv = sorted_svd(&x_star).singular_values;
        let spectrum = SpectrumSpec::new(sv.iter().copied().collect())?;
        let incoherence_mu = match operator {
            MeasurementOperator::Completion { .. } => Some(incoherence(&x_star)),
            _ => None,
        };
        Ok(Self { dims, spectrum, x_star, operator, b, beta, seed: 0, incoherence_mu })
    }

    fn check_shape(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != (self.dims.d(), self.dims.k()) {
            return Err(Error::Size(format!(
                "expected a {} x {} factor, got {:?}",
                self.dims.d(),
                self.dims.k(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// `A(X X^T) - b`.
    pub fn residual(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_shape(x)?;
        let mut r = self.operator.apply(&(x * x.transpose()))?;
        for (ri, bi) in r.iter_mut().zip(&self.b) {
            *ri -= bi;
        }
        Ok(r)
    }

    pub fn loss(&self, x: &DMatrix<f64>) -> Result<f64> {
        Ok(self.residual(x)?.iter().map(|r| r * r).sum())
    }

    /// `grad f(X) = 2 (G + G^T) X` with `G = A*(A(X X^T) - b)`.
    pub fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let r = self.residual(x)?;
        let g = self.operator.adjoint(&r)?;
        let sym = &g + g.transpose();
        Ok(sym * x * 2.0)
    }

    /// Loss and gradient sharing one residual evaluation.
    pub fn loss_and_gradient(&self, x: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let r = self.residual(x)?;
        let f = r.iter().map(|v| v * v).sum();
        let g = self.operator.adjoint(&r)?;
        let sym = &g + g.transpose();
        Ok((f, sym * x * 2.0))
    }
}

/// `(d/k) max_i |e_i^T U|^2` for the left singular vectors `U` of `x x^T`.
pub fn incoherence(x: &DMatrix<f64>) -> f64 {
    let (d, k) = x.shape();
    let u = sorted_svd(x).u;
    let max_row = (0..d).map(|i| u.row(i).norm_squared()).fold(0.0, f64::max);
    d as f64 / k as f64 * max_row
}

/// Draw an instance: `X* = U diag(sigma) V^T` with Haar `U`, `V`, the
/// requested operator, and `b = A(X* X*^T) + n`, `n ~ N(0, 1/beta)`.
pub fn generate_instance(
    dims: Dims,
    spectrum: &SpectrumSpec,
    variant: Variant,
    beta: f64,
    rng: &mut RngStream,
    opts: GenerateOptions,
) -> Result<Instance> {
    if spectrum.rank() != dims.k() {
        return Err(Error::Size(format!("spectrum has {} values, k = {}", spectrum.rank(), dims.k())));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let (d, k) = (dims.d(), dims.k());
    let u = haar_orthonormal(rng, d, k);
    let v = haar_orthonormal(rng, k, k);
    let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(spectrum.values()));
    let x_star = &u * sigma * v.transpose();

    let operator = match variant {
        Variant::Factorization => MeasurementOperator::Factorization { d },
        Variant::Sensing { l } => {
            if l == 0 {
                return Err(Error::InvalidParameter("sensing needs L >= 1".into()));
            }
            let sd = (1.0 / l as f64).sqrt();
            let matrices = (0..l).map(|_| gaussian_matrix(rng, d, d, sd)).collect();
            MeasurementOperator::sensing(matrices)?
        }
        Variant::Completion { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidParameter(format!("p must lie in (0, 1], got {p}")));
            }
            let mut attempt = 0;
            let mask = loop {
                let mask: Vec<(usize, usize)> =
                    (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).filter(|_| rng.uniform() < p).collect();
                if !mask.is_empty() {
                    break mask;
                }
                attempt += 1;
                if !opts.retry_empty_mask || attempt >= 1000 {
                    return Err(Error::EmptyMask);
                }
            };
            MeasurementOperator::completion(d, mask, p)?
        }
    };

    let mut b = operator.apply(&(&x_star * x_star.transpose()))?;
    if !opts.noiseless {
        let sd = (1.0 / beta).sqrt();
        for bi in b.iter_mut() {
            *bi += sd * rng.standard_normal();
        }
    }
    let incoherence_mu = match variant {
        Variant::Completion { .. } => Some(incoherence(&x_star)),
        _ => None,
    };
    Ok(Instance { dims, spectrum: spectrum.clone(), x_star, operator, b, beta, seed: rng.seed(), incoherence_mu })
}

// On-disk layout of an instance.

#[derive(Serialize, Deserialize)]
#[serde(tag = "variant", content = "variant_params", rename_all = "lowercase")]
enum VariantRepr {
    Factorization {},
    Sensing {
        #[serde(rename = "L")]
        l: usize,
        /// Row-major `d x d` matrices.
        matrices: Vec<Vec<f64>>,
    },
    Completion {
        p: f64,
        mask: Vec<(usize, usize)>,
    },
}

#[derive(Serialize, Deserialize)]
struct InstanceRepr {
    dims: Dims,
    spectrum: SpectrumSpec,
    #[serde(flatten)]
    variant: VariantRepr,
    x_star: Vec<f64>,
    b: Vec<f64>,
    beta: f64,
    seed: u64,
    incoherence_mu: Option<f64>,
}

impl Serialize for Instance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let variant = match &self.operator {
            MeasurementOperator::Factorization { .. } => VariantRepr::Factorization {},
            MeasurementOperator::Sensing { matrices } => {
                VariantRepr::Sensing { l: matrices.len(), matrices: matrices.iter().map(to_row_major).collect() }
            }
            MeasurementOperator::Completion { mask, p, .. } => VariantRepr::Completion { p: *p, mask: mask.clone() },
        };
        InstanceRepr {
            dims: self.dims,
            spectrum: self.spectrum.clone(),
            variant,
            x_star: to_row_major(&self.x_star),
            b: self.b.clone(),
            beta: self.beta,
            seed: self.seed,
            incoherence_mu: self.incoherence_mu,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Instance {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = InstanceRepr::deserialize(de)?;
        let (d, k) = (r.dims.d(), r.dims.k());
        if r.x_star.len() != d * k {
            return Err(D::Error::custom("x_star has the wrong length"));
        }
        if r.spectrum.rank() != k {
            return Err(D::Error::custom("spectrum length differs from k"));
        }
        let operator = match r.variant {
            VariantRepr::Factorization {} => MeasurementOperator::Factorization { d },
            VariantRepr::Sensing { l, matrices } => {
                if matrices.len() != l || matrices.iter().any(|m| m.len() != d * d) {
                    return Err(D::Error::custom("sensing matrices have the wrong shape"));
                }
                MeasurementOperator::sensing(matrices.iter().map(|m| from_row_major(d, d, m)).collect())
                    .map_err(D::Error::custom)?
            }
            VariantRepr::Completion { p, mask } => {
                MeasurementOperator::completion(d, mask, p).map_err(D::Error::custom)?
            }
        };
        if r.b.len() != operator.output_len() {
            return Err(D::Error::custom("b has the wrong length"));
        }
        Ok(Instance {
            dims: r.dims,
            spectrum: r.spectrum,
            x_star: from_row_major(d, k, &r.x_star),
            operator,
            b: r.b,
            beta: r.beta,
            seed: r.seed,
            incoherence_mu: r.incoherence_mu,
        })
    }
}
