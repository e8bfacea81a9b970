//! Dimensions, spectra and run configuration shared by all modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a factor `X` in `R^{d x k}`.
///
/// The ambient dimension `N = d k` and the orbit dimension `m = k(k-1)/2`
/// are always derived, never stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DimsRepr", into = "DimsRepr")]
pub struct Dims {
    d: usize,
    k: usize,
}

impl Dims {
    pub fn new(d: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Size("rank k must be at least 1".into()));
        }
        if k > d {
            return Err(Error::Size(format!("rank k = {k} exceeds d = {d}")));
        }
        Ok(Self { d, k })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Ambient dimension `d k`.
    pub fn ambient(&self) -> usize {
        self.d * self.k
    }

    /// Dimension of the orbit `SO(k)`: `k(k-1)/2`.
    pub fn orbit(&self) -> usize {
        self.k * (self.k - 1) / 2
    }

    /// Dimension of the normal space, `N - m`.
    pub fn normal(&self) -> usize {
        self.ambient() - self.orbit()
    }
}

#[derive(Serialize, Deserialize)]
struct DimsRepr {
    d: usize,
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    m: usize,
}

impl From<Dims> for DimsRepr {
    fn from(d: Dims) -> Self {
        Self { d: d.d, k: d.k, n: d.ambient(), m: d.orbit() }
    }
}

impl TryFrom<DimsRepr> for Dims {
    type Error = Error;

    fn try_from(r: DimsRepr) -> Result<Self> {
        let dims = Dims::new(r.d, r.k)?;
        if dims.ambient() != r.n || dims.orbit() != r.m {
            return Err(Error::Parse(format!("inconsistent dims: d={}, k={}, N={}, m={}", r.d, r.k, r.n, r.m)));
        }
        Ok(dims)
    }
}

/// Singular values of the ground-truth factor, strictly positive and
/// nonincreasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SpectrumSpec {
    singular_values: Vec<f64>,
}

impl SpectrumSpec {
    pub fn new(singular_values: Vec<f64>) -> Result<Self> {
        if singular_values.is_empty() {
            return Err(Error::InvalidParameter("spectrum must be nonempty".into()));
        }
        if singular_values.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParameter("singular values must be positive and finite".into()));
        }
        if singular_values.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidParameter("singular values must be nonincreasing".into()));
        }
        Ok(Self { singular_values })
    }

    /// `k` values spaced geometrically from `sigma_max` down to `sigma_min`.
    pub fn geometric(k: usize, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Size("rank k must be at least 1".into()));
        }
        if !(sigma_min > 0.0 && sigma_max >= sigma_min) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < sigma_min <= sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        let values = if k == 1 {
            vec![sigma_max]
        } else {
            let ratio = (sigma_min / sigma_max).ln();
            (0..k)
                .map(|i| if i + 1 == k { sigma_min } else { sigma_max * (ratio * i as f64 / (k - 1) as f64).exp() })
                .collect()
        };
        Self::new(values)
    }

    pub fn uniform(k: usize, sigma: f64) -> Result<Self> {
        Self::new(vec![sigma; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self.singular_values.last().unwrap()
    }

    pub fn condition_number(&self) -> f64 {
        self.sigma_max() / self.sigma_min()
    }
}

impl TryFrom<Vec<f64>> for SpectrumSpec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SpectrumSpec> for Vec<f64> {
    fn from(s: SpectrumSpec) -> Self {
        s.singular_values
    }
}

/// Parameters of a Langevin run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Inverse temperature.
    pub beta: f64,
    /// Step size in time units.
    pub h: f64,
    pub steps: u64,
    pub burnin: u64,
    pub thin: u64,
    pub chains: usize,
    pub seed: u64,
    /// Failure probability used for high-probability cutoffs.
    pub epsilon: f64,
}

impl RunConfig {
    /// A configuration with the default burn-in (`steps / 10`) and
    /// thinning (10).
    pub fn new(beta: f64, h: f64, steps: u64, chains: usize, seed: u64) -> Result<Self> {
        let cfg = Self { beta, h, steps, burnin: steps / 10, thin: 10, chains, seed, epsilon: 0.01 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("step size h must be positive, got {}", self.h));
        }
        if self.steps == 0 || self.burnin >= self.steps {
            return bad(format!("need burnin < steps, got burnin = {}, steps = {}", self.burnin, self.steps));
        }
        if self.thin == 0 {
            return bad("thin must be at least 1".into());
        }
        if self.chains == 0 {
            return bad("chains must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        Ok(())
    }

    /// Number of records a full chain retains after burn-in and thinning.
    pub fn retained(&self) -> u64 {
        (self.steps - self.burnin).div_ceil(self.thin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_dimensions() {
        let d = Dims::new(10, 3).unwrap();
        assert_eq!(d.ambient(), 30);
        assert_eq!(d.orbit(), 3);
        assert_eq!(d.normal(), 27);
        assert_eq!(Dims::new(4, 1).unwrap().orbit(), 0);
    }

    #[test]
    fn rank_above_rows_is_a_size_error() {
        assert!(matches!(Dims::new(3, 5), Err(Error::Size(_))));
        assert!(matches!(Dims::new(3, 0), Err(Error::Size(_))));
    }

    #[test]
    fn inconsistent_serialized_dims_are_rejected() {
        let ok: Dims = serde_json::from_str(r#"{"d":5,"k":2,"N":10,"m":1}"#).unwrap();
        assert_eq!(ok, Dims::new(5, 2).unwrap());
        assert!(serde_json::from_str::<Dims>(r#"{"d":5,"k":2,"N":11,"m":1}"#).is_err());
    }

    #[test]
    fn spectrum_validation() {
        let s = SpectrumSpec::geometric(3, 0.5, 2.0).unwrap();
        assert_eq!(s.sigma_max(), 2.0);
        assert_eq!(s.sigma_min(), 0.5);
        assert!((s.values()[1] - 1.0).abs() < 1e-12);
        assert!((s.condition_number() - 4.0).abs() < 1e-12);
        assert!(SpectrumSpec::new(vec![1.0, 2.0]).is_err());
        assert!(SpectrumSpec::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn run_config_rejects_bad_values() {
        assert!(RunConfig::new(1.0, 0.0, 100, 1, 0).is_err());
        assert!(RunConfig::new(-1.0, 0.1, 100, 1, 0).is_err());
        assert!(RunConfig::new(1.0, 0.1, 100, 0, 0).is_err());
        let mut cfg = RunConfig::new(1.0, 0.1, 100, 1, 0).unwrap();
        assert_eq!(cfg.burnin, 10);
        assert_eq!(cfg.thin, 10);
        assert_eq!(cfg.retained(), 9);
        cfg.burnin = 100;
        assert!(cfg.validate().is_err());
    }
}
