//! Small statistical helpers shared by the engines.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Beta, Binomial, ContinuousCDF, DiscreteCDF, Normal};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = CompensatedSum::default();
    for x in xs {
        s.add(x);
    }
    s.value()
}

/// Two-sided standard-normal quantile: `Φ⁻¹(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// z such that a two-sided test at level `alpha` split over `m` cells has
/// family-wise level `alpha`.
pub fn bonferroni_z(alpha: f64, m: usize) -> f64 {
    normal_quantile(1.0 - alpha / (2.0 * m.max(1) as f64))
}

/// Two-sided tail mass beyond `z` sigma, e.g. 0.0027 for `z = 3`.
pub fn two_sided_tail(z: f64) -> f64 {
    2.0 * (1.0 - Normal::standard().cdf(z))
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt()) / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Exact (Clopper-Pearson) interval at two-sided level `alpha`.
pub fn clopper_pearson(successes: u64, trials: u64, alpha: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let (s, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(s, n - s + 1.0).expect("shape").inverse_cdf(alpha / 2.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(s + 1.0, n - s).expect("shape").inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// Whether `successes` out of `trials` is consistent with success probability
/// `p` under the exact two-sided binomial test at level `alpha` (equal tails).
pub fn binomial_consistent(successes: u64, trials: u64, p: f64, alpha: f64) -> bool {
    if trials == 0 {
        return true;
    }
    let b = Binomial::new(p.clamp(0.0, 1.0), trials).expect("binomial");
    let lower_tail = b.cdf(successes);
    let upper_tail = if successes == 0 { 1.0 } else { b.sf(successes - 1) };
    lower_tail > alpha / 2.0 && upper_tail > alpha / 2.0
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = compensated_sum(xs.iter().copied()) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = compensated_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares coefficients for `rows · c ≈ y`.
pub fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let m = rows.len();
    let k = rows.first()?.len();
    if m < k {
        return None;
    }
    let a = DMatrix::from_fn(m, k, |i, j| rows[i][j]);
    let b = DVector::from_column_slice(y);
    let c = a.svd(true, true).solve(&b, 1e-14).ok()?;
    Some(c.iter().copied().collect())
}

/// `log Σ exp(x_i) w_i` for nonnegative weights, shifted by the max exponent.
pub fn log_sum_exp_weighted<I: IntoIterator<Item = (f64, f64)>>(terms: I) -> f64 {
    let terms: Vec<(f64, f64)> = terms.into_iter().filter(|&(_, w)| w > 0.0).collect();
    let m = terms
        .iter()
        .map(|&(x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + compensated_sum(terms.iter().map(|&(x, w)| w * (x - m).exp())).ln()
}
