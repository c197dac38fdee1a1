use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Result};

pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Outcome of a two-sample comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mean_a: f64,
    pub mean_b: f64,
    pub n: usize,
    pub p: f64,
    /// Fewer events than the analysis considers reliable.
    #[serde(default)]
    pub low_power: bool,
}

impl Comparison {
    /// `a > b` with two-sided `p < alpha`.
    pub fn greater(&self, alpha: f64) -> bool {
        self.mean_a > self.mean_b && self.p < alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and standard error of the mean. Zero spread for fewer than two values.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let (m, sd) = crate::training::mean_std(xs);
    let se = if xs.len() > 1 { sd / (xs.len() as f64).sqrt() } else { 0.0 };
    (m, se)
}

// the tolerance keeps exact ties counted despite summation order
fn extreme(stat: f64, observed: f64) -> bool {
    stat.abs() >= observed.abs() - 1e-12 * (1.0 + observed.abs())
}

fn p_value(count: usize, n_resamples: usize) -> f64 {
    (1 + count) as f64 / (1 + n_resamples) as f64
}

/// Two-sided permutation test on the difference of means of two
/// independent samples.
pub fn permutation_test(a: &[f64], b: &[f64], n_resamples: usize, seed: u64) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(cfg_err!("permutation test needs two values per sample, got {} and {}", a.len(), b.len()));
    }
    let observed = mean(a) - mean(b);
    let mut pool: Vec<f64> = a.iter().chain(b).copied().collect();
    let total: f64 = pool.iter().sum();
    let na = a.len();
    let nb = b.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    for _ in 0..n_resamples {
        // partial Fisher-Yates: only the first `na` slots are needed
        let mut sa = 0.0;
        for i in 0..na {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            sa += pool[i];
        }
        let stat = sa / na as f64 - (total - sa) / nb;
        if extreme(stat, observed) {
            count += 1;
        }
    }
    Ok(p_value(count, n_resamples))
}

/// Two-sided paired permutation test: random sign flips of the differences.
pub fn paired_permutation_test(a: &[f64], b: &[f64], n_resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(cfg_err!("paired samples differ in length: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(cfg_err!("paired test needs at least two pairs, got {}", a.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = mean(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0;
    for _ in 0..n_resamples {
        let s: f64 = d.iter().map(|x| if rng.gen::<bool>() { *x } else { -*x }).sum();
        if extreme(s / d.len() as f64, observed) {
            count += 1;
        }
    }
    Ok(p_value(count, n_resamples))
}

fn raw_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation with a two-sided permutation p-value. A constant
/// input has no defined correlation and reports `r = 0, p = 1`.
pub fn pearson_r(x: &[f64], y: &[f64], n_resamples: usize, seed: u64) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(cfg_err!("correlation inputs differ in length: {} vs {}", x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(cfg_err!("correlation needs at least two points, got {}", n));
    }
    let Some(r) = raw_pearson(x, y) else {
        return Ok(Correlation { r: 0.0, p: 1.0, n });
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = y.to_vec();
    let mut count = 0;
    for _ in 0..n_resamples {
        for i in (1..n).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        if extreme(raw_pearson(x, &shuffled).unwrap_or(0.0), r) {
            count += 1;
        }
    }
    Ok(Correlation {
        r,
        p: p_value(count, n_resamples),
        n,
    })
}

/// Unpaired comparison record, or `None` when a sample is too small to test.
pub fn compare(a: &[f64], b: &[f64], n_resamples: usize, seed: u64, min_events: usize) -> Option<Comparison> {
    let p = permutation_test(a, b, n_resamples, seed).ok()?;
    Some(Comparison {
        mean_a: mean(a),
        mean_b: mean(b),
        n: a.len().min(b.len()),
        p,
        low_power: a.len().min(b.len()) < min_events,
    })
}

/// Paired comparison record, or `None` with fewer than two pairs.
pub fn compare_paired(a: &[f64], b: &[f64], n_resamples: usize, seed: u64, min_events: usize) -> Option<Comparison> {
    let p = paired_permutation_test(a, b, n_resamples, seed).ok()?;
    Some(Comparison {
        mean_a: mean(a),
        mean_b: mean(b),
        n: a.len(),
        p,
        low_power: a.len() < min_events,
    })
}
