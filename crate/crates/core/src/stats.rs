//! Descriptive statistics used by the diagnostics and tests.

use crate::rng::RngStream;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Linear-interpolation quantile (R type 7) of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Kolmogorov–Smirnov distance between the empirical law of `xs` and `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Standard error of the mean from `batches` non-overlapping batch means.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * size..(b + 1) * size])).collect();
    (variance(&means) / batches as f64).sqrt()
}

/// Bootstrap standard errors of several quantiles of the pooled `groups`,
/// resampling whole groups so that dependence inside a group is kept.
pub fn bootstrap_quantile_se(groups: &[Vec<f64>], ps: &[f64], reps: usize, rng: &mut RngStream) -> Vec<f64> {
    let n = groups.len();
    let mut draws = vec![Vec::with_capacity(reps); ps.len()];
    let mut buf = Vec::with_capacity(groups.iter().map(Vec::len).sum());
    for _ in 0..reps {
        buf.clear();
        for _ in 0..n {
            buf.extend_from_slice(&groups[(rng.uniform() * n as f64) as usize % n]);
        }
        buf.sort_by(f64::total_cmp);
        for (j, &p) in ps.iter().enumerate() {
            draws[j].push(quantile_sorted(&buf, p));
        }
    }
    draws.iter().map(|d| variance(d).sqrt()).collect()
}

/// Ordinary least squares fit `y ~ a + b x`, returning `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mx = mean(x);
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}
