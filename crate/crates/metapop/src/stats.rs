//! Small statistical toolbox shared by experiments and tests: moments
//! with standard errors, chi-square goodness of fit, discrete total
//! variation, and a percentile bootstrap.

use crate::rng::RngStream;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

/// Sample mean and its standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let (mean, _) = mean_and_se(xs);
    let n = xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Upper tail probability of a chi-square statistic.
pub fn chi_square_pvalue(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    (1.0 - dist.cdf(stat)).clamp(0.0, 1.0)
}

/// Pearson goodness-of-fit test of observed counts against expected
/// counts (same total). Cells are merged greedily from the right until
/// every expected count is at least 5; `extra_constraints` lowers the
/// degrees of freedom further (e.g. 1 when a parameter was estimated from
/// the same data). Returns `(statistic, dof, p-value)`.
pub fn chi_square_gof(observed: &[f64], expected: &[f64], extra_constraints: usize) -> (f64, usize, f64) {
    assert_eq!(observed.len(), expected.len());
    let mut obs: Vec<f64> = Vec::new();
    let mut exp: Vec<f64> = Vec::new();
    for (&o, &e) in observed.iter().zip(expected) {
        obs.push(o);
        exp.push(e);
    }
    // merge small expected cells into their left neighbor, from the right
    let mut k = exp.len();
    while k > 1 {
        k -= 1;
        if exp[k] < 5.0 {
            exp[k - 1] += exp[k];
            obs[k - 1] += obs[k];
            exp.remove(k);
            obs.remove(k);
        }
    }
    // a deficient leading cell merges rightward
    while exp.len() > 1 && exp[0] < 5.0 {
        exp[1] += exp[0];
        obs[1] += obs[0];
        exp.remove(0);
        obs.remove(0);
    }
    let cells = exp.len();
    if cells <= 1 + extra_constraints {
        return (0.0, 0, 1.0);
    }
    let stat: f64 = obs
        .iter()
        .zip(&exp)
        .map(|(o, e)| if *e > 0.0 { (o - e).powi(2) / e } else { 0.0 })
        .sum();
    let df = cells - 1 - extra_constraints;
    (stat, df, chi_square_pvalue(stat, df))
}

/// Poisson probability mass, numerically stable for large means.
pub fn poisson_pmf(k: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (k as f64 * lambda.ln() - lambda - ln_gamma(k as f64 + 1.0)).exp()
}

/// Total variation distance between two discrete distributions given as
/// aligned probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Percentile bootstrap confidence interval for a statistic of exchangeable
/// replicas: `stat` receives a resampled multiset of replica indices.
pub fn bootstrap_ci<F: FnMut(&[usize]) -> f64>(
    n: usize,
    rounds: usize,
    level: f64,
    rng: &mut RngStream,
    mut stat: F,
) -> (f64, f64) {
    assert!(n > 0 && rounds > 1);
    let mut values: Vec<f64> = Vec::with_capacity(rounds);
    let mut idx = vec![0usize; n];
    for _ in 0..rounds {
        for slot in idx.iter_mut() {
            *slot = rng.gen_index(n);
        }
        values.push(stat(&idx));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo_q = (1.0 - level) / 2.0;
    let hi_q = 1.0 - lo_q;
    let pick = |q: f64| {
        let pos = (q * (rounds as f64 - 1.0)).round() as usize;
        values[pos.min(rounds - 1)]
    };
    (pick(lo_q), pick(hi_q))
}

/// Median of a sample (of a copy; the input stays untouched).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Interquartile range endpoints (25th and 75th percentile, linear
/// interpolation).
pub fn quartiles(xs: &[f64]) -> (f64, f64) {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let pos = p * (v.len() as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        v[lo] * (1.0 - w) + v[hi] * w
    };
    (q(0.25), q(0.75))
}
