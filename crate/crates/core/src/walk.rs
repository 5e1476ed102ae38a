//! The random walk `Y_n` with mixture law `μ = Σ α_k μ_k`.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{ConePolicy, FreeProduct, GroupError, Letter, Word};
use crate::rng::{par_map, replica_rng};
use crate::stats::{self, CompensatedSum};

pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WalkError {
    #[error("expected {expected} factor weights alpha, got {got}")]
    AlphaCount { expected: usize, got: usize },
    #[error("alpha for factor {factor} is {value}; every factor needs positive weight")]
    AlphaNotPositive { factor: usize, value: f64 },
    #[error("factor weights alpha sum to {sum}, expected 1")]
    AlphaSum { sum: f64 },
    #[error("factor {factor}: law has {got} entries but the factor has order {order}")]
    LawLength {
        factor: usize,
        order: usize,
        got: usize,
    },
    #[error("factor {factor}: weight {value} of element {element} is negative or not finite")]
    BadWeight {
        factor: usize,
        element: usize,
        value: f64,
    },
    #[error("factor {factor}: law sums to {sum}, expected 1")]
    LawSum { factor: usize, sum: f64 },
    #[error("support cap {cap} exceeded ({reached} points reached)")]
    CapExceeded { cap: usize, reached: usize },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// One atom of `μ`: a letter, or `None` for the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Move {
    pub letter: Option<Letter>,
    pub prob: f64,
}

/// The step law `μ`.
#[derive(Debug, Clone)]
pub struct StepLaw {
    alphas: Vec<f64>,
    factor_laws: Vec<Vec<f64>>,
    k: u32,
    moves: Vec<Move>,
    sampler: WeightedIndex<f64>,
}

impl StepLaw {
    /// `factor_laws[k]` is a probability vector over all elements of `G_k`
    /// (index 0 is the identity).
    pub fn new(
        g: &FreeProduct,
        alphas: Vec<f64>,
        factor_laws: Vec<Vec<f64>>,
    ) -> Result<Self, WalkError> {
        let r = g.rank();
        if alphas.len() != r {
            return Err(WalkError::AlphaCount {
                expected: r,
                got: alphas.len(),
            });
        }
        for (k, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a.is_finite()) {
                return Err(WalkError::AlphaNotPositive {
                    factor: k + 1,
                    value: a,
                });
            }
        }
        let sum: f64 = stats::compensated_sum(alphas.iter().copied());
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(WalkError::AlphaSum { sum });
        }
        if factor_laws.len() != r {
            return Err(WalkError::AlphaCount {
                expected: r,
                got: factor_laws.len(),
            });
        }
        let mut k_max = 0;
        let mut identity = 0.0;
        let mut moves = Vec::new();
        for (k, law) in factor_laws.iter().enumerate() {
            let f = g.factor(k);
            if law.len() != f.order() {
                return Err(WalkError::LawLength {
                    factor: k + 1,
                    order: f.order(),
                    got: law.len(),
                });
            }
            for (e, &w) in law.iter().enumerate() {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(WalkError::BadWeight {
                        factor: k + 1,
                        element: e,
                        value: w,
                    });
                }
            }
            let s = stats::compensated_sum(law.iter().copied());
            if (s - 1.0).abs() > MASS_TOL {
                return Err(WalkError::LawSum { factor: k + 1, sum: s });
            }
            identity += alphas[k] * law[0];
            for (e, &w) in law.iter().enumerate().skip(1) {
                if w > 0.0 {
                    k_max = k_max.max(f.dist_from_identity(e));
                    moves.push(Move {
                        letter: Some(Letter::new(k, e)),
                        prob: alphas[k] * w,
                    });
                }
            }
        }
        if identity > 0.0 {
            moves.insert(
                0,
                Move {
                    letter: None,
                    prob: identity,
                },
            );
        }
        let sampler = WeightedIndex::new(moves.iter().map(|m| m.prob))
            .map_err(|e| WalkError::Param(format!("step law: {e}")))?;
        Ok(StepLaw {
            alphas,
            factor_laws,
            k: k_max,
            moves,
            sampler,
        })
    }

    /// Simple random walk: factor `k` with weight proportional to `|S_k|`,
    /// then a uniform generator of it.
    pub fn simple(g: &FreeProduct) -> Result<Self, WalkError> {
        let sizes: Vec<f64> = g
            .factors()
            .iter()
            .map(|f| f.generators().len() as f64)
            .collect();
        let total: f64 = sizes.iter().sum();
        let alphas = sizes.iter().map(|s| s / total).collect();
        Self::new(g, alphas, Self::uniform_generator_laws(g, 0.0))
    }

    /// Per-factor laws putting mass `laziness` on the identity and the rest
    /// uniformly on the generators.
    pub fn uniform_generator_laws(g: &FreeProduct, laziness: f64) -> Vec<Vec<f64>> {
        g.factors()
            .iter()
            .map(|f| {
                let mut law = vec![0.0; f.order()];
                let gens = f.generators();
                law[0] = laziness;
                for s in &gens {
                    law[*s] = (1.0 - laziness) / gens.len() as f64;
                }
                law
            })
            .collect()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn factor_laws(&self) -> &[Vec<f64>] {
        &self.factor_laws
    }

    /// `K = max{|x| : μ(x) > 0}`.
    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn moves(&self) -> &[Move] {
        &self.moves
    }

    pub fn identity_mass(&self) -> f64 {
        match self.moves.first() {
            Some(Move { letter: None, prob }) => *prob,
            _ => 0.0,
        }
    }

    /// Draws one increment `ξ ~ μ`.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Letter> {
        self.moves[self.sampler.sample(rng)].letter
    }
}

/// Draws one increment, as a word of at most one syllable.
pub fn sample_step<R: Rng + ?Sized>(law: &StepLaw, rng: &mut R) -> Word {
    match law.sample(rng) {
        Some(l) => Word::from_reduced(vec![l]),
        None => Word::identity(),
    }
}

/// A single walker maintained by suffix mutation.
#[derive(Debug, Clone)]
pub struct Walker<'a> {
    g: &'a FreeProduct,
    law: &'a StepLaw,
    pub position: Word,
    pub length: u32,
    pub steps: u64,
}

impl<'a> Walker<'a> {
    pub fn new(g: &'a FreeProduct, law: &'a StepLaw) -> Self {
        Walker {
            g,
            law,
            position: Word::identity(),
            length: 0,
            steps: 0,
        }
    }

    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if let Some(l) = self.law.sample(rng) {
            let d = self.g.push_letter(&mut self.position, l);
            self.length = (self.length as i64 + d) as u32;
        }
        self.steps += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkPath {
    pub positions: Vec<Word>,
    pub lengths: Vec<u32>,
    pub suffix_types: Vec<Option<usize>>,
}

pub fn simulate_walk<R: Rng + ?Sized>(
    g: &FreeProduct,
    law: &StepLaw,
    n: usize,
    rng: &mut R,
) -> WalkPath {
    let mut w = Walker::new(g, law);
    let mut path = WalkPath {
        positions: Vec::with_capacity(n + 1),
        lengths: Vec::with_capacity(n + 1),
        suffix_types: Vec::with_capacity(n + 1),
    };
    path.positions.push(Word::identity());
    path.lengths.push(0);
    path.suffix_types.push(None);
    for _ in 0..n {
        w.step(rng);
        path.suffix_types.push(g.suffix_type(&w.position));
        path.positions.push(w.position.clone());
        path.lengths.push(w.length);
    }
    path
}

/// Law of `Y_n` as an explicit finite map.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution {
    pub n: usize,
    pub support: BTreeMap<Word, f64>,
}

impl ExactDistribution {
    pub fn point_mass_at_identity() -> Self {
        ExactDistribution {
            n: 0,
            support: BTreeMap::from([(Word::identity(), 1.0)]),
        }
    }

    pub fn total_mass(&self) -> f64 {
        stats::compensated_sum(self.support.values().copied())
    }

    pub fn prob(&self, w: &Word) -> f64 {
        self.support.get(w).copied().unwrap_or(0.0)
    }

    /// `P(|Y_n| = m)` for `m = 0, 1, …`.
    pub fn length_distribution(&self, g: &FreeProduct) -> Vec<f64> {
        let mut acc: Vec<CompensatedSum> = Vec::new();
        for (w, &p) in &self.support {
            let l = g.word_length(w) as usize;
            if acc.len() <= l {
                acc.resize(l + 1, CompensatedSum::default());
            }
            acc[l].add(p);
        }
        acc.iter().map(|s| s.value()).collect()
    }

    pub fn expect<F: Fn(&Word) -> f64>(&self, f: F) -> f64 {
        stats::compensated_sum(self.support.iter().map(|(w, &p)| p * f(w)))
    }

    /// Support in length-lexicographic order.
    pub fn sorted(&self, g: &FreeProduct) -> Vec<(&Word, f64)> {
        let mut v: Vec<(&Word, f64)> = self.support.iter().map(|(w, &p)| (w, p)).collect();
        v.sort_by(|a, b| g.canonical_cmp(a.0, b.0));
        v
    }

    /// CSV with columns `word,length,probability`.
    pub fn write_csv<W: Write>(&self, g: &FreeProduct, out: W) -> std::io::Result<()> {
        let mut wr = crate::io::csv_writer(out, "exact_distribution")?;
        wr.write_record(["word", "length", "probability"])?;
        for (w, p) in self.sorted(g) {
            wr.write_record([
                g.to_tokens(w),
                g.word_length(w).to_string(),
                format!("{p:.16e}"),
            ])?;
        }
        wr.flush()
    }
}

/// One convolution step, dropping words longer than `radius` (if given).
fn step_support(
    g: &FreeProduct,
    law: &StepLaw,
    src: &BTreeMap<Word, f64>,
    radius: Option<u32>,
    cap: usize,
) -> Result<BTreeMap<Word, f64>, WalkError> {
    let mut acc: BTreeMap<Word, CompensatedSum> = BTreeMap::new();
    for (w, &p) in src {
        let len = g.word_length(w) as i64;
        for m in law.moves() {
            let mut next = w.clone();
            let mut nl = len;
            if let Some(l) = m.letter {
                nl += g.push_letter(&mut next, l);
            }
            if let Some(rad) = radius {
                if nl > rad as i64 {
                    continue;
                }
            }
            acc.entry(next).or_default().add(p * m.prob);
            if acc.len() > cap {
                return Err(WalkError::CapExceeded {
                    cap,
                    reached: acc.len(),
                });
            }
        }
    }
    Ok(acc.into_iter().map(|(w, s)| (w, s.value())).collect())
}

/// Exact law of `Y_n` by iterated convolution with `μ`.
pub fn exact_distribution(
    g: &FreeProduct,
    law: &StepLaw,
    n: usize,
    cap: usize,
) -> Result<ExactDistribution, WalkError> {
    let mut d = ExactDistribution::point_mass_at_identity();
    for _ in 0..n {
        d.support = step_support(g, law, &d.support, None, cap)?;
        d.n += 1;
    }
    Ok(d)
}

/// Exact laws of `Y_0, …, Y_n`.
pub fn exact_distributions_upto(
    g: &FreeProduct,
    law: &StepLaw,
    n: usize,
    cap: usize,
) -> Result<Vec<ExactDistribution>, WalkError> {
    let mut out = vec![ExactDistribution::point_mass_at_identity()];
    for k in 0..n {
        let support = step_support(g, law, &out[k].support, None, cap)?;
        out.push(ExactDistribution { n: k + 1, support });
    }
    Ok(out)
}

/// Law of `XY` for independent `X ~ a`, `Y ~ b`.
pub fn convolve(
    g: &FreeProduct,
    a: &ExactDistribution,
    b: &ExactDistribution,
    cap: usize,
) -> Result<ExactDistribution, WalkError> {
    let mut acc: BTreeMap<Word, CompensatedSum> = BTreeMap::new();
    for (x, &p) in &a.support {
        for (y, &q) in &b.support {
            acc.entry(g.multiply_unchecked(x, y)).or_default().add(p * q);
            if acc.len() > cap {
                return Err(WalkError::CapExceeded {
                    cap,
                    reached: acc.len(),
                });
            }
        }
    }
    Ok(ExactDistribution {
        n: a.n + b.n,
        support: acc.into_iter().map(|(w, s)| (w, s.value())).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCell {
    pub word: String,
    pub length: u32,
    pub count: u64,
    pub empirical: f64,
    pub exact: f64,
    pub band: (f64, f64),
    pub inside: bool,
}

/// Empirical law of `Y_n` against the exact one, cell by cell.
///
/// A cell is inside when its count passes the exact two-sided binomial test
/// at level `alpha`; `band` is the dual Clopper-Pearson interval. Normal
/// intervals undercover badly here because most cells have expected counts of
/// order one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactMcComparison {
    pub n: usize,
    pub replicas: u64,
    /// Per-cell level: the `3σ` two-sided tail split over the support.
    pub alpha: f64,
    pub cells: Vec<BandCell>,
    /// Sampled words outside the exact support; must be 0.
    pub off_support: u64,
    pub cells_outside: usize,
    pub all_inside: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn compare_exact_mc(
    g: &FreeProduct,
    law: &StepLaw,
    n: usize,
    replicas: u64,
    cap: usize,
    seed: u64,
    tag: &str,
    threads: Option<usize>,
) -> Result<ExactMcComparison, WalkError> {
    let exact = exact_distribution(g, law, n, cap)?;
    let ends = par_map(replicas as usize, threads, |i| {
        let mut rng = replica_rng(seed, tag, i as u64);
        let mut w = Walker::new(g, law);
        for _ in 0..n {
            w.step(&mut rng);
        }
        w.position
    });
    let mut counts: BTreeMap<Word, u64> = BTreeMap::new();
    for w in ends {
        *counts.entry(w).or_insert(0) += 1;
    }
    let off_support = counts
        .iter()
        .filter(|(w, _)| !exact.support.contains_key(*w))
        .map(|(_, &c)| c)
        .sum();
    let alpha = stats::two_sided_tail(3.0) / exact.support.len() as f64;
    let cells: Vec<BandCell> = exact
        .sorted(g)
        .into_iter()
        .map(|(w, p)| {
            let c = counts.get(w).copied().unwrap_or(0);
            let band = stats::clopper_pearson(c, replicas, alpha);
            BandCell {
                word: g.to_tokens(w),
                length: g.word_length(w),
                count: c,
                empirical: c as f64 / replicas as f64,
                exact: p,
                band,
                inside: stats::binomial_consistent(c, replicas, p, alpha),
            }
        })
        .collect();
    let cells_outside = cells.iter().filter(|c| !c.inside).count();
    Ok(ExactMcComparison {
        n,
        replicas,
        alpha,
        all_inside: cells_outside == 0 && off_support == 0,
        cells,
        off_support,
        cells_outside,
    })
}

/// `P(Y_m = e)` for `m = 0..=n_max`, exact.
///
/// At step `k` only words that can still return by `n_max` are kept, which
/// keeps the peak support near the ball of radius `n_max·K/2`.
pub fn return_probabilities(
    g: &FreeProduct,
    law: &StepLaw,
    n_max: usize,
    cap: usize,
) -> Result<Vec<f64>, WalkError> {
    let k = law.k().max(1);
    let mut support = ExactDistribution::point_mass_at_identity().support;
    let mut out = vec![1.0];
    for step in 1..=n_max {
        let radius = ((n_max - step) as u32).saturating_mul(k);
        support = step_support(g, law, &support, Some(radius), cap)?;
        out.push(support.get(&Word::identity()).copied().unwrap_or(0.0));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRadiusEstimate {
    pub n_max: usize,
    /// `(n, P(Y_n = e))` for every `n ≤ n_max` with positive mass.
    pub return_probabilities: Vec<(usize, f64)>,
    /// `(n, P(Y_n = e)^{1/n})`.
    pub roots: Vec<(usize, f64)>,
    /// `max_n P(Y_n = e)^{1/n}`; a rigorous lower bound on `r`.
    pub lower_bound: f64,
    /// Extrapolated estimate.
    pub point: f64,
    pub interval: (f64, f64),
    pub method: String,
    /// Whether the even-step return probabilities were nonincreasing (reported, not enforced).
    pub even_returns_nonincreasing: bool,
}

/// Fits `log p_n = A + n log r + γ log n + c/n` through the four given points.
fn fit_log_r(points: &[(usize, f64)]) -> Option<f64> {
    if points.len() < 4 {
        return None;
    }
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|&(n, _)| {
            let n = n as f64;
            vec![1.0, n, n.ln(), 1.0 / n]
        })
        .collect();
    let y: Vec<f64> = points.iter().map(|&(_, p)| p.ln()).collect();
    let c = stats::least_squares(&rows, &y)?;
    Some(c[1].exp())
}

pub fn estimate_spectral_radius(
    g: &FreeProduct,
    law: &StepLaw,
    n_max: usize,
    cap: usize,
) -> Result<SpectralRadiusEstimate, WalkError> {
    if n_max < 2 || n_max % 2 != 0 {
        return Err(WalkError::Param(format!(
            "spectral radius needs an even n_max >= 2, got {n_max}"
        )));
    }
    let p = return_probabilities(g, law, n_max, cap)?;
    let positive: Vec<(usize, f64)> = p
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &v)| v > 0.0)
        .map(|(n, &v)| (n, v))
        .collect();
    let roots: Vec<(usize, f64)> = positive
        .iter()
        .map(|&(n, v)| (n, v.powf(1.0 / n as f64)))
        .collect();
    let lower_bound = roots.iter().map(|r| r.1).fold(0.0, f64::max);
    let evens: Vec<f64> = (2..=n_max).step_by(2).map(|n| p[n]).collect();
    let even_returns_nonincreasing = evens.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));

    let m = positive.len();
    let fit = if m >= 4 {
        fit_log_r(&positive[m - 4..])
    } else {
        None
    };
    let prev = if m >= 5 {
        fit_log_r(&positive[m - 5..m - 1])
    } else {
        None
    };
    let (point, interval, method) = match fit {
        Some(f) if f.is_finite() => {
            let point = f.clamp(lower_bound, 1.0);
            let n_last = positive[m - 1].0 as f64;
            let half = prev.map(|q| (f - q).abs() * n_last / 2.0).unwrap_or(f64::NAN);
            let interval = if half.is_finite() {
                ((point - half).max(lower_bound), (point + half).min(1.0))
            } else {
                (lower_bound, 1.0)
            };
            (point, interval, "four-term fit on the largest return times".to_string())
        }
        _ => (
            lower_bound,
            (lower_bound, 1.0),
            "largest-n root (too few return times to fit)".to_string(),
        ),
    };
    Ok(SpectralRadiusEstimate {
        n_max,
        return_probabilities: positive,
        roots,
        lower_bound,
        point,
        interval,
        method,
        even_returns_nonincreasing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEstimate {
    pub n: usize,
    /// Steps discarded before measuring the increment.
    pub burn_in: usize,
    pub replicas: usize,
    pub mean: f64,
    pub standard_error: f64,
    /// `(m, E|Y_m|/m)` from exact convolution.
    pub exact: Vec<(usize, f64)>,
}

/// Monte Carlo estimate of `ℓ` from `(|Y_n| - |Y_b|)/(n - b)` with `b = n/10`, plus the
/// exact small-`m` sequence. Plain `|Y_n|/n` carries an `O(1/n)` excess from early visits to `e`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_drift(
    g: &FreeProduct,
    law: &StepLaw,
    n: usize,
    replicas: usize,
    m_max: usize,
    cap: usize,
    seed: u64,
    threads: Option<usize>,
) -> Result<DriftEstimate, WalkError> {
    if replicas == 0 || n == 0 {
        return Err(WalkError::Param("drift needs n >= 1 and replicas >= 1".into()));
    }
    let burn_in = n / 10;
    let speeds = par_map(replicas, threads, |i| {
        let mut rng = replica_rng(seed, "drift", i as u64);
        let mut w = Walker::new(g, law);
        let mut start = 0;
        for k in 0..n {
            if k == burn_in {
                start = w.length;
            }
            w.step(&mut rng);
        }
        (w.length as f64 - start as f64) / (n - burn_in) as f64
    });
    let (mean, standard_error) = stats::mean_and_se(&speeds);
    let mut exact = Vec::new();
    let mut d = ExactDistribution::point_mass_at_identity();
    for m in 1..=m_max {
        match step_support(g, law, &d.support, None, cap) {
            Ok(s) => d = ExactDistribution { n: m, support: s },
            Err(WalkError::CapExceeded { .. }) => break,
            Err(e) => return Err(e),
        }
        exact.push((m, d.expect(|w| g.word_length(w) as f64) / m as f64));
    }
    Ok(DriftEstimate {
        n,
        burn_in,
        replicas,
        mean,
        standard_error,
        exact,
    })
}

/// Censoring horizon `⌈4n/ℓ̂⌉`.
pub fn default_step_cap(n: u32, ell: f64) -> u64 {
    (4.0 * n as f64 / ell.max(1e-9)).ceil() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    /// First `k` with `|Y_k| ≥ n`; `None` if censored at the step cap.
    pub t_n: Option<u64>,
    /// `T_n ≤ ⌊n/a⌋`.
    pub hit_fast: bool,
    /// `Y_k ∈ C(i)` for `1 ≤ k ≤ T_n` (up to the cap if censored).
    pub stayed_in_cone: bool,
    pub exit_suffix_type: Option<usize>,
    /// `|Y_{⌊n/a⌋}|`.
    pub length_at_deadline: u32,
}

/// `⌊n/a⌋`, robust to `n/a` landing a hair below an integer.
pub fn deadline(n: u32, a: f64) -> u64 {
    ((n as f64 / a) * (1.0 + 1e-12)).floor() as u64
}

#[allow(clippy::too_many_arguments)]
pub fn sample_exit<R: Rng + ?Sized>(
    g: &FreeProduct,
    law: &StepLaw,
    n: u32,
    a: f64,
    cone: usize,
    policy: ConePolicy,
    step_cap: u64,
    rng: &mut R,
) -> Result<ExitRecord, WalkError> {
    if !(a > 0.0) {
        return Err(WalkError::Param(format!("speed a must be positive, got {a}")));
    }
    if cone >= g.rank() {
        return Err(WalkError::Param(format!("cone index {} out of range", cone + 1)));
    }
    let dl = deadline(n, a);
    if step_cap < dl {
        return Err(WalkError::Param(format!(
            "step cap {step_cap} is below the deadline {dl}"
        )));
    }
    let mut w = Walker::new(g, law);
    let mut t_n = if n == 0 { Some(0) } else { None };
    let mut stayed = true;
    let mut length_at_deadline = if dl == 0 { 0 } else { u32::MAX };
    let mut exit_suffix_type = None;
    while w.steps < step_cap && (t_n.is_none() || w.steps < dl) {
        w.step(rng);
        if t_n.is_none() {
            if !g.in_cone_with(&w.position, cone, policy) {
                stayed = false;
            }
            if w.length >= n {
                t_n = Some(w.steps);
                exit_suffix_type = g.suffix_type(&w.position);
            }
        }
        if w.steps == dl {
            length_at_deadline = w.length;
        }
    }
    Ok(ExitRecord {
        t_n,
        hit_fast: t_n.is_some_and(|t| t <= dl),
        stayed_in_cone: stayed,
        exit_suffix_type,
        length_at_deadline,
    })
}

/// Exact `P(T_n ≤ m)` and, with a cone, `P(T_n ≤ m, E_{n,i})`.
pub fn exact_exit_probability(
    g: &FreeProduct,
    law: &StepLaw,
    n: u32,
    m: u64,
    cone: Option<(usize, ConePolicy)>,
    cap: usize,
) -> Result<f64, WalkError> {
    if n == 0 {
        return Ok(1.0);
    }
    let mut live = ExactDistribution::point_mass_at_identity().support;
    let mut absorbed = CompensatedSum::default();
    for _ in 0..m {
        let next = step_support(g, law, &live, None, cap)?;
        live = BTreeMap::new();
        for (w, p) in next {
            if let Some((i, pol)) = cone {
                if !g.in_cone_with(&w, i, pol) {
                    continue;
                }
            }
            if g.word_length(&w) >= n {
                absorbed.add(p);
            } else {
                live.insert(w, p);
            }
        }
    }
    Ok(absorbed.value())
}

/// Binomial cell of an exit-rate curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub successes: u64,
    pub trials: u64,
    pub p_hat: f64,
    pub wilson: (f64, f64),
    /// `−(1/n) log p̂`; `None` when there were no successes.
    pub rate: Option<f64>,
    /// Rate band from the Wilson interval; with zero successes only the lower end is informative.
    pub rate_band: (f64, f64),
    pub lower_bound_only: bool,
}

impl RateCell {
    pub fn new(successes: u64, trials: u64, n: u32, z: f64) -> Self {
        let p_hat = successes as f64 / trials.max(1) as f64;
        let wilson = stats::wilson_interval(successes, trials, z);
        let nf = n.max(1) as f64;
        let to_rate = |p: f64| if p > 0.0 { -p.ln() / nf } else { f64::INFINITY };
        RateCell {
            successes,
            trials,
            p_hat,
            wilson,
            rate: (successes > 0).then(|| to_rate(p_hat)),
            rate_band: (to_rate(wilson.1), to_rate(wilson.0)),
            lower_bound_only: successes == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRateRow {
    pub n: u32,
    pub deadline: u64,
    /// `T_n ≤ n/a`.
    pub fast: RateCell,
    /// `T_n ≤ n/a` together with `E_{n,i}`.
    pub fast_in_cone: Option<RateCell>,
    /// `|Y_{⌊n/a⌋}| ≥ n`; never more likely than `fast`.
    pub endpoint: RateCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRateCurve {
    pub a: f64,
    pub cone: Option<usize>,
    pub z: f64,
    pub rows: Vec<ExitRateRow>,
}

/// Empirical decay rates of `P(T_n ≤ n/a)` over `n_grid`.
///
/// Each replica runs one walk for `⌊max n / a⌋` steps and is scored for every
/// grid point, so cells at different `n` share randomness.
#[allow(clippy::too_many_arguments)]
pub fn exit_rate_curve(
    g: &FreeProduct,
    law: &StepLaw,
    a: f64,
    cone: Option<(usize, ConePolicy)>,
    n_grid: &[u32],
    replicas: u64,
    z: f64,
    seed: u64,
    threads: Option<usize>,
) -> Result<ExitRateCurve, WalkError> {
    if !(a > 0.0) {
        return Err(WalkError::Param(format!("speed a must be positive, got {a}")));
    }
    if let Some((i, _)) = cone {
        if i >= g.rank() {
            return Err(WalkError::Param(format!("cone index {} out of range", i + 1)));
        }
    }
    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let m = grid.len();
    let deadlines: Vec<u64> = grid.iter().map(|&n| deadline(n, a)).collect();
    let horizon = deadlines.iter().copied().max().unwrap_or(0);

    const CHUNK: u64 = 4096;
    let chunks = replicas.div_ceil(CHUNK) as usize;
    let counts = par_map(chunks, threads, |c| {
        let mut fast = vec![0u64; m];
        let mut fast_cone = vec![0u64; m];
        let mut endpoint = vec![0u64; m];
        let lo = c as u64 * CHUNK;
        let hi = (lo + CHUNK).min(replicas);
        for rep in lo..hi {
            let mut rng = replica_rng(seed, "exit-rate", rep);
            let mut w = Walker::new(g, law);
            // first_hit[j]: first step at which |Y| >= grid[j]
            let mut first_hit = vec![u64::MAX; m];
            let mut next_j = grid.iter().position(|&n| n > 0).unwrap_or(m);
            for j in 0..next_j {
                first_hit[j] = 0;
            }
            let mut cone_broken_at = u64::MAX;
            while w.steps < horizon {
                w.step(&mut rng);
                if cone_broken_at == u64::MAX {
                    if let Some((i, pol)) = cone {
                        if !g.in_cone_with(&w.position, i, pol) {
                            cone_broken_at = w.steps;
                        }
                    }
                }
                while next_j < m && w.length >= grid[next_j] {
                    first_hit[next_j] = w.steps;
                    next_j += 1;
                }
                for j in 0..m {
                    if deadlines[j] == w.steps && w.length >= grid[j] {
                        endpoint[j] += 1;
                    }
                }
            }
            for j in 0..m {
                if first_hit[j] <= deadlines[j] {
                    fast[j] += 1;
                    if cone_broken_at > first_hit[j] {
                        fast_cone[j] += 1;
                    }
                }
                if deadlines[j] == 0 && grid[j] == 0 {
                    endpoint[j] += 1;
                }
            }
        }
        (fast, fast_cone, endpoint)
    });
    let mut fast = vec![0u64; m];
    let mut fast_cone = vec![0u64; m];
    let mut endpoint = vec![0u64; m];
    for (f, fc, e) in counts {
        for j in 0..m {
            fast[j] += f[j];
            fast_cone[j] += fc[j];
            endpoint[j] += e[j];
        }
    }
    let rows = (0..m)
        .map(|j| ExitRateRow {
            n: grid[j],
            deadline: deadlines[j],
            fast: RateCell::new(fast[j], replicas, grid[j], z),
            fast_in_cone: cone.map(|_| RateCell::new(fast_cone[j], replicas, grid[j], z)),
            endpoint: RateCell::new(endpoint[j], replicas, grid[j], z),
        })
        .collect();
    Ok(ExitRateCurve {
        a,
        cone: cone.map(|c| c.0),
        z,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replica_rng;

    fn tree() -> (FreeProduct, StepLaw) {
        let g = FreeProduct::cyclic(&[2, 2, 2]).unwrap();
        let law = StepLaw::simple(&g).unwrap();
        (g, law)
    }

    #[test]
    fn law_validation() {
        let g = FreeProduct::cyclic(&[2, 2]).unwrap();
        let laws = StepLaw::uniform_generator_laws(&g, 0.0);
        assert!(matches!(
            StepLaw::new(&g, vec![1.0, 0.0], laws.clone()),
            Err(WalkError::AlphaNotPositive { factor: 2, .. })
        ));
        assert!(matches!(
            StepLaw::new(&g, vec![0.6, 0.6], laws.clone()),
            Err(WalkError::AlphaSum { .. })
        ));
        assert!(matches!(
            StepLaw::new(&g, vec![0.5, 0.5], vec![vec![0.5, 0.4], vec![0.0, 1.0]]),
            Err(WalkError::LawSum { factor: 1, .. })
        ));
        let law = StepLaw::new(&g, vec![0.5, 0.5], laws).unwrap();
        assert_eq!(law.k(), 1);
        assert_eq!(law.identity_mass(), 0.0);
    }

    #[test]
    fn lazy_law_never_moves() {
        let g = FreeProduct::cyclic(&[2, 3]).unwrap();
        let law = StepLaw::new(
            &g,
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![1.0, 0.0, 0.0]],
        )
        .unwrap();
        let mut rng = replica_rng(1, "t", 0);
        let path = simulate_walk(&g, &law, 50, &mut rng);
        assert!(path.lengths.iter().all(|&l| l == 0));
        assert_eq!(law.k(), 0);
    }

    #[test]
    fn two_step_law_on_tree() {
        let (g, law) = tree();
        let d = exact_distribution(&g, &law, 2, 1000).unwrap();
        assert!((d.prob(&Word::identity()) - 1.0 / 3.0).abs() < 1e-15);
        let ld = d.length_distribution(&g);
        assert!((ld[2] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.support.len(), 7);
        for n in 0..=12 {
            let d = exact_distribution(&g, &law, n, 1 << 20).unwrap();
            assert!((d.total_mass() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn path_basics() {
        let (g, law) = tree();
        let mut rng = replica_rng(3, "t", 0);
        assert_eq!(simulate_walk(&g, &law, 0, &mut rng).positions, vec![Word::identity()]);
        let p = simulate_walk(&g, &law, 200, &mut rng);
        for k in 0..200 {
            assert_eq!(p.lengths[k], g.word_length(&p.positions[k]));
            assert!(p.lengths[k].abs_diff(p.lengths[k + 1]) <= law.k());
            g.check_word(&p.positions[k]).unwrap();
        }
    }

    #[test]
    fn returns_match_full_convolution() {
        let (g, law) = tree();
        let p = return_probabilities(&g, &law, 10, 1 << 20).unwrap();
        for (n, &pn) in p.iter().enumerate() {
            let d = exact_distribution(&g, &law, n, 1 << 20).unwrap();
            assert!((d.prob(&Word::identity()) - pn).abs() < 1e-14, "n={n}");
        }
    }

    #[test]
    fn spectral_radius_brackets_truth() {
        let (g, law) = tree();
        let est = estimate_spectral_radius(&g, &law, 20, 1 << 22).unwrap();
        let r = 2.0 * 2f64.sqrt() / 3.0;
        assert!(est.lower_bound <= r);
        assert!((est.point - r).abs() / r < 0.02);
        assert!(est.interval.0 <= est.point && est.point <= est.interval.1);
        assert!(est.even_returns_nonincreasing);
        assert!(estimate_spectral_radius(&g, &law, 7, 100).is_err());
    }

    #[test]
    fn laziness_lower_bound() {
        let g = FreeProduct::cyclic(&[2, 2, 2]).unwrap();
        let delta = 0.3;
        let law = StepLaw::new(
            &g,
            vec![1.0 / 3.0; 3],
            StepLaw::uniform_generator_laws(&g, delta),
        )
        .unwrap();
        let est = estimate_spectral_radius(&g, &law, 12, 1 << 20).unwrap();
        assert!(est.point >= delta && est.lower_bound >= delta);
    }

    #[test]
    fn exit_matches_exact_at_small_n() {
        let (g, law) = tree();
        let n = 6;
        let a = 0.4;
        let dl = deadline(n, a);
        let exact = exact_exit_probability(&g, &law, n, dl, None, 1 << 20).unwrap();
        let exact_cone = exact_exit_probability(
            &g,
            &law,
            n,
            dl,
            Some((0, ConePolicy::IdentityAdmitted)),
            1 << 20,
        )
        .unwrap();
        let curve = exit_rate_curve(
            &g,
            &law,
            a,
            Some((0, ConePolicy::IdentityAdmitted)),
            &[n],
            50_000,
            3.0,
            11,
            None,
        )
        .unwrap();
        let row = &curve.rows[0];
        let se = (exact * (1.0 - exact) / 50_000.0).sqrt();
        assert!((row.fast.p_hat - exact).abs() < 4.0 * se, "{} vs {exact}", row.fast.p_hat);
        let c = row.fast_in_cone.as_ref().unwrap();
        let se = (exact_cone * (1.0 - exact_cone) / 50_000.0).sqrt();
        assert!((c.p_hat - exact_cone).abs() < 4.0 * se);
        assert!(row.endpoint.successes <= row.fast.successes);
    }

    #[test]
    fn sample_exit_flags() {
        let (g, law) = tree();
        let mut rng = replica_rng(5, "t", 0);
        for _ in 0..200 {
            let rec = sample_exit(&g, &law, 5, 0.5, 1, ConePolicy::IdentityAdmitted, 400, &mut rng)
                .unwrap();
            if let Some(t) = rec.t_n {
                assert!(t >= 5);
                assert_eq!(rec.hit_fast, t <= 10);
            }
            if rec.length_at_deadline >= 5 {
                assert!(rec.hit_fast);
            }
        }
        assert!(sample_exit(&g, &law, 5, 0.5, 1, ConePolicy::Strict, 3, &mut rng).is_err());
    }
}
