//! Large deviations of `|Y_n|/n`: `Λ_n` grids, the limit `Λ`, its
//! Legendre-Fenchel transform `I`, property checks and the speed solvers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::FreeProduct;
use crate::rng::{par_map, replica_rng};
use crate::stats::{self, CompensatedSum};
use crate::walk::{self, StepLaw, WalkError, Walker};

/// Drops in `I` smaller than this do not count against monotonicity.
pub const MONOTONE_DROP_TOL: f64 = 1e-5;
/// Grid points further apart than this must show a strict increase of `I`.
pub const STRICT_GAP: f64 = 0.05;
pub const CONVEXITY_TOL: f64 = 1e-6;
pub const ZERO_AT_DRIFT_TOL: f64 = 5e-3;
pub const I0_REL_TOL: f64 = 0.15;
pub const BISECTION_TOL: f64 = 1e-6;
/// A Monte Carlo `Λ_n(t)` cell is used only if its effective sample size is
/// at least this fraction of the replica count.
pub const DEFAULT_ESS_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LdpError {
    #[error("t = {t}: only {got} distinct n values are usable, need at least 3")]
    InsufficientN { t: f64, got: usize },
    #[error("t grid must be strictly increasing with at least 3 points")]
    BadTGrid,
    #[error("monte carlo Λ_n needs at least 1000 replicas, got {0}")]
    TooFewReplicas(usize),
    #[error("speed solver: {0}")]
    Solver(String),
    #[error(transparent)]
    Walk(#[from] WalkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMethod {
    Exact,
    Mc,
}

/// How to evaluate a single `Λ_n(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSource {
    Exact {
        cap: usize,
    },
    Mc {
        replicas: usize,
        seed: u64,
        threads: Option<usize>,
    },
}

/// `(1/n) log Σ_l p_l e^{tl}` for a length distribution.
pub fn lambda_from_length_pmf(pmf: &[f64], t: f64, n: usize) -> f64 {
    if t == 0.0 || n == 0 {
        return 0.0;
    }
    stats::log_sum_exp_weighted(pmf.iter().enumerate().map(|(l, &p)| (t * l as f64, p))) / n as f64
}

/// Histogram of sampled lengths: `counts[l]` replicas ended at length `l`.
pub fn length_counts(lengths: &[u32]) -> Vec<u64> {
    let m = lengths.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut c = vec![0u64; m];
    for &l in lengths {
        c[l as usize] += 1;
    }
    c
}

/// Monte Carlo `Λ_n(t)` from a length histogram: value, delta-method
/// standard error and effective sample size of the exponential weights.
pub fn lambda_from_counts(counts: &[u64], t: f64, n: usize) -> (f64, f64, f64) {
    let r: u64 = counts.iter().sum();
    if t == 0.0 || n == 0 || r == 0 {
        return (0.0, 0.0, r as f64);
    }
    let shift = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(l, _)| t * l as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut s = CompensatedSum::default();
    let mut s2 = CompensatedSum::default();
    for (l, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let w = (t * l as f64 - shift).exp();
        s.add(c as f64 * w);
        s2.add(c as f64 * w * w);
    }
    let (s, s2) = (s.value(), s2.value());
    let rf = r as f64;
    let mean = s / rf;
    let var = (s2 / rf - mean * mean).max(0.0) * rf / (rf - 1.0).max(1.0);
    let value = (shift + mean.ln()) / n as f64;
    let se = (var / rf).sqrt() / mean / n as f64;
    (value, se, s * s / s2)
}

/// `Λ_n(t)` with its standard error (zero for the exact method).
pub fn lambda_n(
    g: &FreeProduct,
    law: &StepLaw,
    t: f64,
    n: usize,
    source: LambdaSource,
) -> Result<(f64, f64), LdpError> {
    match source {
        LambdaSource::Exact { cap } => {
            let d = walk::exact_distribution(g, law, n, cap)?;
            Ok((lambda_from_length_pmf(&d.length_distribution(g), t, n), 0.0))
        }
        LambdaSource::Mc {
            replicas,
            seed,
            threads,
        } => {
            if replicas < 1000 {
                return Err(LdpError::TooFewReplicas(replicas));
            }
            let lens = sample_lengths(g, law, &[n], replicas, seed, threads);
            let (v, se, _) = lambda_from_counts(&length_counts(&lens[0]), t, n);
            Ok((v, se))
        }
    }
}

/// `|Y_n|` for each requested `n`, one walk per replica.
pub fn sample_lengths(
    g: &FreeProduct,
    law: &StepLaw,
    ns: &[usize],
    replicas: usize,
    seed: u64,
    threads: Option<usize>,
) -> Vec<Vec<u32>> {
    let n_max = ns.iter().copied().max().unwrap_or(0);
    let per_rep = par_map(replicas, threads, |i| {
        let mut rng = replica_rng(seed, "lambda-mc", i as u64);
        let mut w = Walker::new(g, law);
        let mut out = vec![0u32; ns.len()];
        for step in 1..=n_max {
            w.step(&mut rng);
            for (j, &n) in ns.iter().enumerate() {
                if n == step {
                    out[j] = w.length;
                }
            }
        }
        out
    });
    (0..ns.len())
        .map(|j| per_rep.iter().map(|v| v[j]).collect())
        .collect()
}

/// Raw material for `Λ_n` grids: exact length laws and sampled lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaData {
    pub exact: Vec<(usize, Vec<f64>)>,
    /// `(n, histogram of |Y_n|)`.
    pub mc: Vec<(usize, Vec<u64>)>,
}

impl LambdaData {
    #[allow(clippy::too_many_arguments)]
    pub fn collect(
        g: &FreeProduct,
        law: &StepLaw,
        exact_ns: &[usize],
        mc_ns: &[usize],
        mc_replicas: usize,
        cap: usize,
        seed: u64,
        threads: Option<usize>,
    ) -> Result<Self, LdpError> {
        let mut exact = Vec::new();
        if let Some(&n_max) = exact_ns.iter().max() {
            let dists = walk::exact_distributions_upto(g, law, n_max, cap)?;
            for &n in exact_ns {
                exact.push((n, dists[n].length_distribution(g)));
            }
        }
        let mut mc = Vec::new();
        if !mc_ns.is_empty() {
            if mc_replicas < 1000 {
                return Err(LdpError::TooFewReplicas(mc_replicas));
            }
            let lens = sample_lengths(g, law, mc_ns, mc_replicas, seed, threads);
            mc = mc_ns
                .iter()
                .copied()
                .zip(lens.iter().map(|l| length_counts(l)))
                .collect();
        }
        Ok(LambdaData { exact, mc })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub n: usize,
    pub value: f64,
    pub method: LambdaMethod,
    pub standard_error: f64,
    pub effective_sample_size: f64,
    pub admitted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaTag {
    /// `t = 0`, where every `Λ_n` vanishes.
    Exact,
    /// `t > 0`: largest-`n` value, an upper bound on `Λ(t)`.
    UpperBound,
    /// `t < 0`: `c/n`-corrected fit on the three largest `n`.
    Extrapolated,
    /// `t < 0`: the fit fell below `log r̂` and was raised to it.
    ClampedAtLogR,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaHat {
    pub value: f64,
    pub uncertainty: f64,
    pub tag: LambdaTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub t_grid: Vec<f64>,
    pub values: Vec<Vec<LambdaPoint>>,
    /// Filled by [`lambda_limit`].
    pub lambda_hat: Vec<LambdaHat>,
}

impl LambdaGrid {
    pub fn from_data(data: &LambdaData, t_grid: &[f64], ess_fraction: f64) -> Self {
        let values = t_grid
            .iter()
            .map(|&t| {
                let mut pts: Vec<LambdaPoint> = data
                    .exact
                    .iter()
                    .map(|(n, pmf)| LambdaPoint {
                        n: *n,
                        value: lambda_from_length_pmf(pmf, t, *n),
                        method: LambdaMethod::Exact,
                        standard_error: 0.0,
                        effective_sample_size: f64::INFINITY,
                        admitted: true,
                    })
                    .collect();
                for (n, counts) in &data.mc {
                    let (value, se, ess) = lambda_from_counts(counts, t, *n);
                    let total: u64 = counts.iter().sum();
                    pts.push(LambdaPoint {
                        n: *n,
                        value,
                        method: LambdaMethod::Mc,
                        standard_error: se,
                        effective_sample_size: ess,
                        admitted: ess >= ess_fraction * total as f64,
                    });
                }
                pts.sort_by_key(|p| (p.n, p.method == LambdaMethod::Mc));
                pts
            })
            .collect();
        LambdaGrid {
            t_grid: t_grid.to_vec(),
            values,
            lambda_hat: Vec::new(),
        }
    }

    pub fn hat_values(&self) -> Vec<f64> {
        self.lambda_hat.iter().map(|h| h.value).collect()
    }

    /// `Λ_n(t)` at the largest admitted `n` for each `t`.
    pub fn largest_n_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|pts| {
                pts.iter()
                    .filter(|p| p.admitted)
                    .max_by_key(|p| p.n)
                    .map(|p| p.value)
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Indices where discrete convexity of `Λ̂` fails by more than `tol`.
    pub fn convexity_violations(&self, tol: f64) -> Vec<usize> {
        convexity_violations(&self.t_grid, &self.hat_values(), tol)
    }
}

pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let m = ((hi - lo) / step).round() as i64;
    (0..=m).map(|i| lo + i as f64 * step).collect()
}

pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

fn convexity_violations(xs: &[f64], ys: &[f64], tol: f64) -> Vec<usize> {
    let mut bad = Vec::new();
    for i in 1..xs.len().saturating_sub(1) {
        if !(ys[i - 1].is_finite() && ys[i].is_finite() && ys[i + 1].is_finite()) {
            continue;
        }
        let h1 = xs[i] - xs[i - 1];
        let h2 = xs[i + 1] - xs[i];
        // divided second difference, scaled to a uniform-grid second difference
        let d = ((ys[i + 1] - ys[i]) / h2 - (ys[i] - ys[i - 1]) / h1) * 0.5 * (h1 + h2);
        if d < -tol {
            bad.push(i);
        }
    }
    bad
}

/// Estimates `Λ(t)` on the grid.
///
/// For `t ≥ 0` the largest-`n` value is an upper bound by subadditivity. For
/// `t < 0` a `Λ + c/n` fit on the three largest admitted `n` is used, capped
/// at 0 and, when `log_r_floor` is given, raised to at least `log r̂`
/// (`Λ(t) ≥ log r` holds for every `t`).
pub fn lambda_limit(grid: &mut LambdaGrid, log_r_floor: Option<f64>) -> Result<(), LdpError> {
    let mut hats = Vec::with_capacity(grid.t_grid.len());
    for (&t, pts) in grid.t_grid.iter().zip(&grid.values) {
        if t == 0.0 {
            hats.push(LambdaHat {
                value: 0.0,
                uncertainty: 0.0,
                tag: LambdaTag::Exact,
            });
            continue;
        }
        // one point per n; exact wins over mc at equal n
        let mut used: Vec<&LambdaPoint> = Vec::new();
        for p in pts.iter().filter(|p| p.admitted) {
            if used.last().is_some_and(|q| q.n == p.n) {
                continue;
            }
            used.push(p);
        }
        if used.len() < 3 {
            return Err(LdpError::InsufficientN { t, got: used.len() });
        }
        let last = used[used.len() - 1];
        let prev = used[used.len() - 2];
        if t > 0.0 {
            hats.push(LambdaHat {
                value: last.value,
                // size of a c/n bias estimated from the last two n
                uncertainty: (last.value - prev.value).abs() * prev.n as f64
                    / (last.n - prev.n) as f64
                    + last.standard_error,
                tag: LambdaTag::UpperBound,
            });
            continue;
        }
        let top = &used[used.len() - 3..];
        let rows: Vec<Vec<f64>> = top.iter().map(|p| vec![1.0, 1.0 / p.n as f64]).collect();
        let ys: Vec<f64> = top.iter().map(|p| p.value).collect();
        let fit = stats::least_squares(&rows, &ys)
            .map(|c| c[0])
            .unwrap_or(last.value);
        let mut value = fit.min(0.0);
        let mut tag = LambdaTag::Extrapolated;
        if let Some(floor) = log_r_floor {
            if value < floor {
                value = floor;
                tag = LambdaTag::ClampedAtLogR;
            }
        }
        hats.push(LambdaHat {
            value,
            uncertainty: (value - last.value).abs() + last.standard_error,
            tag,
        });
    }
    grid.lambda_hat = hats;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateTag {
    /// Supremum attained inside the slope range of `Λ̂`.
    Finite,
    /// `x ≤ K` but outside the achieved slope range; value is a lower bound.
    Uncertain,
    /// Outside the effective domain.
    Infinite,
}

/// `I` on a grid, with enough of its source kept to evaluate it anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFunction {
    pub x_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub uncertainty: Vec<f64>,
    pub tags: Vec<RateTag>,
    /// Largest grid `x` with a finite, certain value.
    pub beta_hat: f64,
    /// Hard bound `K` on the slope of `Λ`.
    pub k: f64,
    pub ell: f64,
    pub neg_log_r: f64,
    pub slope_range: (f64, f64),
    pub t_grid: Vec<f64>,
    pub lambda: Vec<f64>,
}

const SLOPE_EPS: f64 = 1e-9;

/// Curvature used on each grid interval: the smaller of the two endpoint
/// second differences, floored at 0. Taking the smaller one keeps a single
/// kink in `Λ̂` from bending both neighbouring intervals.
fn interval_curvatures(t: &[f64], lam: &[f64]) -> Vec<f64> {
    let m = t.len();
    let mut d2 = vec![0.0; m];
    for j in 1..m - 1 {
        let h1 = t[j] - t[j - 1];
        let h2 = t[j + 1] - t[j];
        d2[j] = 2.0 * ((lam[j + 1] - lam[j]) / h2 - (lam[j] - lam[j - 1]) / h1) / (h1 + h2);
    }
    (0..m - 1)
        .map(|j| {
            if j == 0 || j + 1 == m - 1 {
                0.0
            } else {
                d2[j].min(d2[j + 1]).max(0.0)
            }
        })
        .collect()
}

/// Exact conjugate at `x` of the piecewise-quadratic interpolant of `Λ̂`
/// (chord minus `½c(t−t_j)(t_{j+1}−t)` on each interval). Being an exact
/// conjugate, the result is convex in `x` whatever `Λ̂` looks like.
fn conjugate_at(t: &[f64], lam: &[f64], curv: &[f64], x: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for j in 0..t.len() - 1 {
        let h = t[j + 1] - t[j];
        let s = (lam[j + 1] - lam[j]) / h;
        let c = curv[j];
        let base = x * t[j] - lam[j];
        let u = if c > 0.0 {
            ((x - s) / c + 0.5 * h).clamp(0.0, h)
        } else if x > s {
            h
        } else {
            0.0
        };
        let v = base + (x - s) * u + 0.5 * c * u * (h - u);
        if v > best {
            best = v;
        }
    }
    best
}

fn slope_range(t: &[f64], lam: &[f64]) -> (f64, f64) {
    let m = t.len();
    (
        (lam[1] - lam[0]) / (t[1] - t[0]),
        (lam[m - 1] - lam[m - 2]) / (t[m - 1] - t[m - 2]),
    )
}

impl RateFunction {
    /// `I(x)` and its tag at any `x`.
    pub fn eval(&self, x: f64) -> (f64, RateTag) {
        let curv = interval_curvatures(&self.t_grid, &self.lambda);
        classify(&self.t_grid, &self.lambda, &curv, self.slope_range, self.k, x)
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).0
    }

    /// Linear interpolation of the uncertainty column.
    pub fn uncertainty_at(&self, x: f64) -> f64 {
        interp(&self.x_grid, &self.uncertainty, x)
    }

    /// `sup_x {tx − I(x)}` over the finite grid part.
    pub fn biconjugate(&self, t: f64) -> f64 {
        self.x_grid
            .iter()
            .zip(&self.values)
            .zip(&self.tags)
            .filter(|(_, tag)| **tag == RateTag::Finite)
            .map(|((&x, &v), _)| t * x - v)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn branch(&self, i: usize) -> &'static str {
        match self.tags[i] {
            RateTag::Infinite => "infinite",
            RateTag::Uncertain => "uncertain",
            RateTag::Finite if self.x_grid[i] < self.ell => "decreasing",
            RateTag::Finite => "increasing",
        }
    }

    /// CSV columns `x,I,uncertainty,branch`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = crate::io::csv_writer(out, "rate_curve")?;
        w.write_record(["x", "I", "uncertainty", "branch"])?;
        for i in 0..self.x_grid.len() {
            w.write_record([
                crate::io::fmt_f64(self.x_grid[i]),
                crate::io::fmt_f64(self.values[i]),
                crate::io::fmt_f64(self.uncertainty[i]),
                self.branch(i).to_string(),
            ])?;
        }
        w.flush()
    }
}

fn classify(
    t: &[f64],
    lam: &[f64],
    curv: &[f64],
    slopes: (f64, f64),
    k: f64,
    x: f64,
) -> (f64, RateTag) {
    if x < slopes.0 - SLOPE_EPS || x > k + SLOPE_EPS || x < -SLOPE_EPS {
        return (f64::INFINITY, RateTag::Infinite);
    }
    let v = conjugate_at(t, lam, curv, x);
    if x > slopes.1 + SLOPE_EPS {
        (v, RateTag::Uncertain)
    } else {
        (v.max(0.0), RateTag::Finite)
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    if x <= xs[0] {
        return ys[0];
    }
    for i in 1..xs.len() {
        if x <= xs[i] {
            let w = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            return ys[i - 1] * (1.0 - w) + ys[i] * w;
        }
    }
    ys[ys.len() - 1]
}

/// Legendre-Fenchel transform of `Λ̂` sampled on `t_grid`, evaluated on `x_grid`.
///
/// `k` is the hard slope bound; `x > k` is outside the domain.
pub fn legendre_transform(
    t_grid: &[f64],
    lambda: &[f64],
    x_grid: &[f64],
    k: f64,
) -> Result<RateFunction, LdpError> {
    if t_grid.len() < 3 || t_grid.windows(2).any(|w| w[1] <= w[0]) || lambda.len() != t_grid.len()
    {
        return Err(LdpError::BadTGrid);
    }
    let slopes = slope_range(t_grid, lambda);
    let curv = interval_curvatures(t_grid, lambda);
    let mut values = Vec::with_capacity(x_grid.len());
    let mut tags = Vec::with_capacity(x_grid.len());
    for &x in x_grid {
        let (v, tag) = classify(t_grid, lambda, &curv, slopes, k, x);
        values.push(v);
        tags.push(tag);
    }
    let beta_hat = x_grid
        .iter()
        .zip(&tags)
        .filter(|(_, t)| **t == RateTag::Finite)
        .map(|(&x, _)| x)
        .fold(f64::NAN, f64::max);
    let mut rf = RateFunction {
        x_grid: x_grid.to_vec(),
        uncertainty: vec![0.0; x_grid.len()],
        values,
        tags,
        beta_hat,
        k,
        ell: f64::NAN,
        neg_log_r: f64::NAN,
        slope_range: slopes,
        t_grid: t_grid.to_vec(),
        lambda: lambda.to_vec(),
    };
    rf.ell = argmin_refined(&rf);
    rf.neg_log_r = rf.value(0.0);
    Ok(rf)
}

/// Zero of `I` located by the slope of `Λ̂` at the origin.
fn argmin_refined(rf: &RateFunction) -> f64 {
    let t = &rf.t_grid;
    match t.iter().position(|&v| v >= 0.0) {
        Some(j) if j > 0 && j + 1 < t.len() => {
            let left = (rf.lambda[j] - rf.lambda[j - 1]) / (t[j] - t[j - 1]);
            let right = (rf.lambda[j + 1] - rf.lambda[j]) / (t[j + 1] - t[j]);
            0.5 * (left + right)
        }
        _ => {
            let i = (0..rf.values.len())
                .min_by(|&a, &b| rf.values[a].total_cmp(&rf.values[b]))
                .unwrap_or(0);
            rf.x_grid.get(i).copied().unwrap_or(f64::NAN)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePropertyReport {
    pub checks: Vec<PropertyCheck>,
    pub all_passed: bool,
}

impl RatePropertyReport {
    pub fn get(&self, name: &str) -> Option<&PropertyCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Grid checks of the structural properties of a rate function.
pub fn check_rate_properties(rf: &RateFunction, ell: f64, r: f64) -> RatePropertyReport {
    let mut checks = Vec::new();
    let xs = &rf.x_grid;
    let finite: Vec<usize> = (0..xs.len())
        .filter(|&i| rf.tags[i] != RateTag::Infinite)
        .collect();

    // (i) finite part is an interval
    let contiguous = finite.windows(2).all(|w| w[1] == w[0] + 1);
    let lo = finite.first().map(|&i| xs[i]).unwrap_or(f64::NAN);
    checks.push(PropertyCheck {
        name: "domain-interval".into(),
        passed: contiguous && !finite.is_empty(),
        detail: format!("finite on [{lo}, {}], beta_hat = {}", finite.last().map(|&i| xs[i]).unwrap_or(f64::NAN), rf.beta_hat),
    });

    // (ii) zero at the drift
    let at_ell = rf.value(ell);
    checks.push(PropertyCheck {
        name: "zero-at-drift".into(),
        passed: at_ell <= ZERO_AT_DRIFT_TOL,
        detail: format!("I({ell}) = {at_ell}"),
    });

    // (iii) monotone on [ell, beta_hat)
    let branch: Vec<usize> = (0..xs.len())
        .filter(|&i| rf.tags[i] == RateTag::Finite && xs[i] >= ell && xs[i] < rf.beta_hat)
        .collect();
    let mut witness = None;
    for w in branch.windows(2) {
        if rf.values[w[1]] < rf.values[w[0]] - MONOTONE_DROP_TOL {
            witness = Some(format!("drop at x = {}", xs[w[1]]));
            break;
        }
    }
    if witness.is_none() {
        for (a, &i) in branch.iter().enumerate() {
            if let Some(&j) = branch[a..].iter().find(|&&j| xs[j] - xs[i] > STRICT_GAP) {
                if rf.values[j] <= rf.values[i] {
                    witness = Some(format!("no increase between x = {} and {}", xs[i], xs[j]));
                    break;
                }
            }
        }
    }
    checks.push(PropertyCheck {
        name: "increasing-above-drift".into(),
        passed: witness.is_none(),
        detail: witness.unwrap_or_else(|| format!("{} grid points checked", branch.len())),
    });

    // (iv) I(x)/x nondecreasing on the same branch
    let mut witness = None;
    for w in branch.windows(2) {
        let (x0, x1) = (xs[w[0]], xs[w[1]]);
        if x0 <= 0.0 {
            continue;
        }
        if rf.values[w[1]] / x1 < rf.values[w[0]] / x0 - MONOTONE_DROP_TOL {
            witness = Some(format!("I(x)/x drops at x = {x1}"));
            break;
        }
    }
    checks.push(PropertyCheck {
        name: "ratio-increasing".into(),
        passed: witness.is_none(),
        detail: witness.unwrap_or_else(|| "ok".into()),
    });

    // convexity on the certain finite part
    let cert: Vec<usize> = (0..xs.len()).filter(|&i| rf.tags[i] == RateTag::Finite).collect();
    let cx: Vec<f64> = cert.iter().map(|&i| xs[i]).collect();
    let cy: Vec<f64> = cert.iter().map(|&i| rf.values[i]).collect();
    let bad = convexity_violations(&cx, &cy, CONVEXITY_TOL);
    checks.push(PropertyCheck {
        name: "convex".into(),
        passed: bad.is_empty(),
        detail: match bad.first() {
            Some(&i) => format!("{} violations, first at x = {}", bad.len(), cx[i]),
            None => "ok".into(),
        },
    });

    // I(0) against -log r
    let i0 = rf.value(0.0);
    let target = -r.ln();
    let passed = if target.is_finite() {
        (i0 - target).abs() <= I0_REL_TOL * target.abs()
    } else {
        !i0.is_finite()
    };
    checks.push(PropertyCheck {
        name: "origin-matches-spectral-radius".into(),
        passed,
        detail: format!("I(0) = {i0}, -log r = {target}"),
    });

    let all_passed = checks.iter().all(|c| c.passed);
    RatePropertyReport { checks, all_passed }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VmaxCase {
    Intersection,
    SupDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VminCase {
    Intersection,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSolution {
    pub v_max: f64,
    pub v_max_case: VmaxCase,
    pub v_max_band: (f64, f64),
    pub v_min: f64,
    pub v_min_case: VminCase,
    pub v_min_band: (f64, f64),
    pub log_rho: f64,
    pub neg_log_r: f64,
    pub ell: f64,
    pub beta_hat: f64,
    pub k: f64,
    /// Whether `β̂` stops short of `K`, in which case `v_max` may be underestimated.
    pub beta_below_k: bool,
}

/// Root of a monotone `f` on `[lo, hi]` given the sign at `lo`.
fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Root of `g(x) = level` on an increasing branch, clipped to the interval ends.
fn increasing_root<F: Fn(f64) -> f64>(g: F, level: f64, lo: f64, hi: f64) -> f64 {
    if g(lo) >= level {
        lo
    } else if g(hi) <= level {
        hi
    } else {
        bisect(|x| g(x) - level, lo, hi)
    }
}

fn decreasing_root<F: Fn(f64) -> f64>(g: F, level: f64, lo: f64, hi: f64) -> f64 {
    if g(hi) >= level {
        hi
    } else if g(lo) <= level {
        lo
    } else {
        bisect(|x| g(x) - level, lo, hi)
    }
}

/// Solves for the maximal and minimal displacement speeds.
pub fn solve_speeds(rf: &RateFunction, rho: f64, r: f64) -> Result<SpeedSolution, LdpError> {
    if !(rho > 1.0 && rho.is_finite()) {
        return Err(LdpError::Solver(format!("rho must lie in (1, inf), got {rho}")));
    }
    let ell = rf.ell;
    let beta = rf.beta_hat;
    if !(ell.is_finite() && beta.is_finite()) || ell > beta + BISECTION_TOL {
        return Err(LdpError::Solver(format!(
            "inconsistent rate function: ell = {ell}, beta_hat = {beta}"
        )));
    }
    let log_rho = rho.ln();
    let neg_log_r = -r.ln();
    let i = |x: f64| rf.value(x);
    let hi_i = |x: f64| rf.value(x) + rf.uncertainty_at(x);
    let lo_i = |x: f64| rf.value(x) - rf.uncertainty_at(x);

    let (v_max, v_max_case, v_max_band) = if i(beta) >= log_rho {
        let v = increasing_root(i, log_rho, ell, beta);
        let band = (
            increasing_root(hi_i, log_rho, ell, beta),
            increasing_root(lo_i, log_rho, ell, beta),
        );
        (v, VmaxCase::Intersection, band)
    } else {
        (beta, VmaxCase::SupDomain, (beta, rf.k.max(beta)))
    };

    let (v_min, v_min_case, v_min_band) = if log_rho > neg_log_r {
        (0.0, VminCase::Zero, (0.0, 0.0))
    } else {
        let v = decreasing_root(i, log_rho, 0.0, ell);
        let band = (
            decreasing_root(lo_i, log_rho, 0.0, ell),
            decreasing_root(hi_i, log_rho, 0.0, ell),
        );
        (v, VminCase::Intersection, band)
    };
    Ok(SpeedSolution {
        v_max,
        v_max_case,
        v_max_band: (v_max_band.0.min(v_max), v_max_band.1.max(v_max)),
        v_min,
        v_min_case,
        v_min_band: (v_min_band.0.min(v_min), v_min_band.1.max(v_min)),
        log_rho,
        neg_log_r,
        ell,
        beta_hat: beta,
        k: rf.k,
        beta_below_k: beta < rf.k - 1e-9,
    })
}

/// Settings of the full `μ → Λ̂ → I` pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateAnalysisSpec {
    pub t_min: f64,
    pub t_max: f64,
    pub t_step: f64,
    pub x_points: usize,
    pub exact_ns: Vec<usize>,
    pub mc_ns: Vec<usize>,
    pub mc_replicas: usize,
    pub ess_fraction: f64,
    pub spectral_n_max: usize,
    pub drift_n: usize,
    pub drift_replicas: usize,
    pub cap: usize,
}

impl Default for RateAnalysisSpec {
    fn default() -> Self {
        RateAnalysisSpec {
            t_min: -30.0,
            t_max: 30.0,
            t_step: 0.01,
            x_points: 512,
            exact_ns: (2..=14).step_by(2).collect(),
            mc_ns: vec![50, 100, 200],
            mc_replicas: 100_000,
            ess_fraction: DEFAULT_ESS_FRACTION,
            spectral_n_max: 20,
            drift_n: 2000,
            drift_replicas: 10_000,
            cap: 5_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAnalysis {
    pub grid: LambdaGrid,
    pub rate: RateFunction,
    pub spectral: walk::SpectralRadiusEstimate,
    pub drift: walk::DriftEstimate,
    pub properties: RatePropertyReport,
    /// Number of times the t grid was widened to cover the slope range.
    pub grid_extensions: usize,
}

/// Runs the whole large-deviation pipeline for one step law.
pub fn analyze_rate(
    g: &FreeProduct,
    law: &StepLaw,
    spec: &RateAnalysisSpec,
    seed: u64,
    threads: Option<usize>,
) -> Result<RateAnalysis, LdpError> {
    let spectral = walk::estimate_spectral_radius(g, law, spec.spectral_n_max, spec.cap)?;
    let drift = walk::estimate_drift(
        g,
        law,
        spec.drift_n,
        spec.drift_replicas,
        10,
        spec.cap,
        seed,
        threads,
    )?;
    let data = LambdaData::collect(
        g,
        law,
        &spec.exact_ns,
        &spec.mc_ns,
        spec.mc_replicas,
        spec.cap,
        seed,
        threads,
    )?;
    let k = law.k() as f64;
    let log_r = spectral.point.ln();
    let (mut t_min, mut t_max) = (spec.t_min, spec.t_max);
    let mut extensions = 0;
    let mut grid;
    loop {
        grid = LambdaGrid::from_data(&data, &uniform_grid(t_min, t_max, spec.t_step), spec.ess_fraction);
        lambda_limit(&mut grid, Some(log_r))?;
        let (s_lo, s_hi) = slope_range(&grid.t_grid, &grid.hat_values());
        let short_right = s_hi < k * (1.0 - 1e-6);
        let short_left = s_lo > 1e-6;
        if !(short_right || short_left) || extensions >= 3 {
            break;
        }
        if short_right {
            t_max *= 2.0;
        }
        if short_left {
            t_min *= 2.0;
        }
        extensions += 1;
    }
    let x_grid = linspace(0.0, k, spec.x_points);
    let mut rate = legendre_transform(&grid.t_grid, &grid.hat_values(), &x_grid, k)?;
    // I moves opposite to Λ̂: shift Λ̂ by its uncertainty both ways, and
    // compare with the transform of the raw largest-n values.
    let hat = grid.hat_values();
    let unc: Vec<f64> = grid.lambda_hat.iter().map(|h| h.uncertainty).collect();
    let shifted = |sign: f64| -> Vec<f64> {
        hat.iter().zip(&unc).map(|(v, u)| v + sign * u).collect()
    };
    let alternatives = [
        legendre_transform(&grid.t_grid, &grid.largest_n_values(), &x_grid, k)?,
        legendre_transform(&grid.t_grid, &shifted(1.0), &x_grid, k)?,
        legendre_transform(&grid.t_grid, &shifted(-1.0), &x_grid, k)?,
    ];
    rate.uncertainty = (0..x_grid.len())
        .map(|i| {
            alternatives
                .iter()
                .map(|alt| (alt.values[i] - rate.values[i]).abs())
                .filter(|d| d.is_finite())
                .fold(0.0, f64::max)
        })
        .collect();
    rate.ell = drift.mean;
    rate.neg_log_r = -log_r;
    let properties = check_rate_properties(&rate, drift.mean, spectral.point);
    Ok(RateAnalysis {
        grid,
        rate,
        spectral,
        drift,
        properties,
        grid_extensions: extensions,
    })
}
