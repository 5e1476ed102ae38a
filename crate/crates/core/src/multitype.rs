//! The multitype branching process of fast, cone-confined first-exit
//! particles, its mean matrix and a Perron-Frobenius certificate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brw::{root_key, BrwError, OffspringLaw, Particle};
use crate::group::{ConePolicy, FreeProduct, Word};
use crate::rng::{mix64, par_map};
use crate::stats;
use crate::walk::{deadline, StepLaw};

pub const PERRON_TOL: f64 = 1e-10;
pub const PERRON_MAX_ITER: usize = 10_000;
pub const PERRON_EPS: f64 = 1e-12;
pub const VERDICT_SIGMAS: f64 = 3.0;

/// Salt separating a particle's census stream from its own tree key.
const CENSUS_SALT: u64 = 0xC3A5_C85C_97CB_3127;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MultitypeError {
    #[error("matrix must be square, nonempty, at most 16x16 with finite nonnegative entries")]
    BadMatrix,
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Brw(#[from] BrwError),
}

/// Caps guarding a census against runaway growth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensusCaps {
    /// Largest frontier of live lineages.
    pub pop_cap: u64,
}

impl Default for CensusCaps {
    fn default() -> Self {
        CensusCaps { pop_cap: 10_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusRecord {
    pub generation: u32,
    pub suffix_type: usize,
    pub length: u32,
    #[serde(skip)]
    pub key: u64,
    /// Position relative to the census root.
    #[serde(skip)]
    pub position: Word,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeExitCensus {
    pub root_type: usize,
    pub n: u32,
    pub a: f64,
    /// `Z_ij` for `j = 0..r`.
    pub counts: Vec<u64>,
    pub records: Vec<CensusRecord>,
    pub partial: bool,
    /// Counted particles breaking `|v| ≤ n/a + 1` or `|X_v| ≥ n`; always 0 unless there is a bug.
    pub bound_violations: u64,
}

impl ConeExitCensus {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Fast first exits from `B_n` that stayed in `C(i)`, started from `e` with tree key `key`.
///
/// Lineages are killed when they leave the cone or can no longer reach
/// distance `n` by generation `⌊n/a⌋`; neither rule changes the census.
#[allow(clippy::too_many_arguments)]
pub fn sample_cone_exit_census(
    g: &FreeProduct,
    law: &StepLaw,
    pi: &OffspringLaw,
    i: usize,
    a: f64,
    n: u32,
    policy: ConePolicy,
    caps: CensusCaps,
    key: u64,
) -> Result<ConeExitCensus, MultitypeError> {
    if !(a > 0.0) || i >= g.rank() || n == 0 {
        return Err(MultitypeError::Param(
            "census needs a > 0, n >= 1 and a valid root type".into(),
        ));
    }
    let r = g.rank();
    let k = law.k();
    let limit = deadline(n, a) as u32;
    let mut counts = vec![0u64; r];
    let mut records = Vec::new();
    let mut partial = false;
    let mut bound_violations = 0;
    let mut frontier = vec![Particle::root(key, Word::identity(), g, pi)];
    for gen in 1..=limit {
        if frontier.is_empty() {
            break;
        }
        let size: u64 = frontier.iter().map(|p| p.children as u64).sum();
        if size > caps.pop_cap {
            partial = true;
            break;
        }
        let remaining = limit - gen;
        let mut next = Vec::with_capacity(size as usize);
        for p in &frontier {
            for rank in 0..p.children {
                let c = p.child(rank, g, law, pi);
                if !g.in_cone_with(&c.position, i, policy) {
                    continue;
                }
                if c.length >= n {
                    let j = g.suffix_type(&c.position).expect("nonempty");
                    if c.length < n || c.generation as f64 > n as f64 / a + 1.0 {
                        bound_violations += 1;
                    }
                    counts[j] += 1;
                    records.push(CensusRecord {
                        generation: c.generation,
                        suffix_type: j,
                        length: c.length,
                        key: c.key,
                        position: c.position,
                    });
                } else if c.length as u64 + remaining as u64 * k as u64 >= n as u64 {
                    next.push(c);
                }
            }
        }
        frontier = next;
    }
    Ok(ConeExitCensus {
        root_type: i,
        n,
        a,
        counts,
        records,
        partial,
        bound_violations,
    })
}

/// Census key for replica `rep` of root type `i`; independent of `a`, so
/// censuses at different speeds share their trees.
pub fn census_key(seed: u64, i: usize, rep: u64) -> u64 {
    root_key(seed, &format!("census-type-{i}"), rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMatrix {
    pub a: f64,
    pub n: u32,
    pub m: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    /// Complete censuses used per root type.
    pub replicas: Vec<u64>,
    pub partial_excluded: Vec<u64>,
    /// Mean census size per root type.
    pub row_means: Vec<f64>,
    pub bound_violations: u64,
    /// Empirical joint offspring laws per root type: vector of counts → frequency.
    #[serde(skip)]
    pub offspring: Vec<BTreeMap<Vec<u32>, u64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_mean_matrix(
    g: &FreeProduct,
    law: &StepLaw,
    pi: &OffspringLaw,
    a: f64,
    n: u32,
    replicas: u64,
    policy: ConePolicy,
    caps: CensusCaps,
    seed: u64,
    threads: Option<usize>,
) -> Result<MeanMatrix, MultitypeError> {
    let r = g.rank();
    let mut m = vec![vec![0.0; r]; r];
    let mut se = vec![vec![0.0; r]; r];
    let mut used = vec![0u64; r];
    let mut excluded = vec![0u64; r];
    let mut row_means = vec![0.0; r];
    let mut bound_violations = 0;
    let mut offspring = vec![BTreeMap::new(); r];
    for i in 0..r {
        let censuses = par_map(replicas as usize, threads, |rep| {
            sample_cone_exit_census(g, law, pi, i, a, n, policy, caps, census_key(seed, i, rep as u64))
                .map(|c| (c.counts, c.partial, c.bound_violations))
        });
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for c in censuses {
            let (counts, partial, viol) = c?;
            bound_violations += viol;
            if partial {
                excluded[i] += 1;
            } else {
                rows.push(counts);
            }
        }
        used[i] = rows.len() as u64;
        for j in 0..r {
            let xs: Vec<f64> = rows.iter().map(|c| c[j] as f64).collect();
            let (mean, s) = stats::mean_and_se(&xs);
            m[i][j] = if xs.is_empty() { 0.0 } else { mean };
            se[i][j] = if xs.is_empty() { 0.0 } else { s };
        }
        let totals: Vec<f64> = rows.iter().map(|c| c.iter().sum::<u64>() as f64).collect();
        row_means[i] = stats::mean_and_se(&totals).0;
        for c in rows {
            *offspring[i]
                .entry(c.iter().map(|&v| v as u32).collect())
                .or_insert(0) += 1;
        }
    }
    Ok(MeanMatrix {
        a,
        n,
        m,
        se,
        replicas: used,
        partial_excluded: excluded,
        row_means,
        bound_violations,
        offspring,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Supercritical,
    Subcritical,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerronResult {
    pub eigenvalue: f64,
    /// Left eigenvector, normalized to sum 1.
    pub eigenvector: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub reducible: bool,
    /// A unit shift `M + I` was needed to converge (periodic matrices).
    pub shifted: bool,
}

fn check_matrix(m: &[Vec<f64>]) -> Result<usize, MultitypeError> {
    let r = m.len();
    if r == 0 || r > 16 || m.iter().any(|row| row.len() != r) {
        return Err(MultitypeError::BadMatrix);
    }
    if m.iter().flatten().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(MultitypeError::BadMatrix);
    }
    Ok(r)
}

/// Whether the directed graph of positive entries fails to be strongly connected.
pub fn is_reducible(m: &[Vec<f64>]) -> bool {
    let r = m.len();
    if r <= 1 {
        return false;
    }
    let mut reach: Vec<Vec<bool>> = m.iter().map(|row| row.iter().map(|&v| v > 0.0).collect()).collect();
    for k in 0..r {
        for i in 0..r {
            if reach[i][k] {
                for j in 0..r {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    !reach.iter().all(|row| row.iter().all(|&b| b))
}

fn power_iterate(m: &[Vec<f64>], shift: f64) -> (f64, Vec<f64>, f64, usize, bool) {
    let r = m.len();
    let mut v = vec![1.0 / r as f64; r];
    let mut nu = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=PERRON_MAX_ITER {
        let mut w = vec![0.0; r];
        for (i, &vi) in v.iter().enumerate() {
            for j in 0..r {
                w[j] += vi * m[i][j];
            }
            w[i] += shift * vi;
        }
        let s: f64 = w.iter().sum();
        if s <= 0.0 {
            return (0.0 + shift * 0.0, v, 0.0, it, true);
        }
        nu = s;
        for x in w.iter_mut() {
            *x /= s;
        }
        residual = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum::<f64>() * s;
        v = w;
        if residual <= PERRON_TOL {
            return (nu - shift, v, residual, it, true);
        }
    }
    (nu - shift, v, residual, PERRON_MAX_ITER, false)
}

/// Perron root and left eigenvector of a nonnegative matrix by power iteration on `M + εI`.
pub fn perron_eigenvalue(m: &[Vec<f64>]) -> Result<PerronResult, MultitypeError> {
    check_matrix(m)?;
    let reducible = is_reducible(m);
    let (mut nu, mut v, mut residual, mut iterations, mut converged) = power_iterate(m, PERRON_EPS);
    let mut shifted = false;
    if !converged {
        let (nu2, v2, res2, it2, conv2) = power_iterate(m, 1.0);
        if conv2 {
            nu = nu2;
            v = v2;
            residual = res2;
            iterations += it2;
            converged = true;
            shifted = true;
        }
    }
    Ok(PerronResult {
        eigenvalue: nu.max(0.0),
        eigenvector: v,
        residual,
        iterations,
        converged,
        reducible,
        shifted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerronCertificate {
    pub perron: PerronResult,
    /// `ν(max(M̂ − 3SE, 0))`.
    pub lower: f64,
    /// `ν(M̂ + 3SE)`.
    pub upper: f64,
    pub verdict: Verdict,
}

/// Applies the entrywise `3σ` rule to `M̂ ± 3SE`.
pub fn certify(m: &[Vec<f64>], se: &[Vec<f64>]) -> Result<PerronCertificate, MultitypeError> {
    let perron = perron_eigenvalue(m)?;
    let shifted = |sign: f64| -> Vec<Vec<f64>> {
        m.iter()
            .zip(se)
            .map(|(row, srow)| {
                row.iter()
                    .zip(srow)
                    .map(|(&v, &s)| (v + sign * VERDICT_SIGMAS * s).max(0.0))
                    .collect()
            })
            .collect()
    };
    let lo = perron_eigenvalue(&shifted(-1.0))?;
    let hi = perron_eigenvalue(&shifted(1.0))?;
    let verdict = if !(perron.converged && lo.converged && hi.converged) {
        Verdict::Inconclusive
    } else if lo.eigenvalue > 1.0 {
        Verdict::Supercritical
    } else if hi.eigenvalue < 1.0 {
        Verdict::Subcritical
    } else {
        Verdict::Inconclusive
    };
    Ok(PerronCertificate {
        perron,
        lower: lo.eigenvalue,
        upper: hi.eigenvalue,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub a: f64,
    pub n: u32,
    pub generations: u32,
    pub root_type: usize,
    pub replicas: u64,
    /// Replicas alive at each multitype generation `1..=generations` (truncated ones count as alive).
    pub alive: Vec<u64>,
    /// Replicas whose multitype population hit the cap.
    pub truncated: u64,
    /// Mean `N_i^m` per generation and type over replicas.
    pub mean_type_counts: Vec<Vec<f64>>,
    /// Particles checked against `nm ≤ |X_v|` and `|v| ≤ nm/a + 1`.
    pub particles_checked: u64,
    pub bound_violations: u64,
}

impl SurvivalReport {
    pub fn survival_frequency(&self, m: u32) -> f64 {
        self.alive[(m - 1) as usize] as f64 / self.replicas as f64
    }
}

#[derive(Debug, Clone)]
struct TypedParticle {
    key: u64,
    position: Word,
    length: u32,
    generation: u32,
    kind: usize,
}

/// Iterates the multitype process by running a fresh census from every particle.
#[allow(clippy::too_many_arguments)]
pub fn simulate_multitype_survival(
    g: &FreeProduct,
    law: &StepLaw,
    pi: &OffspringLaw,
    a: f64,
    n: u32,
    generations: u32,
    root_type: usize,
    replicas: u64,
    population_cap: usize,
    policy: ConePolicy,
    caps: CensusCaps,
    seed: u64,
    threads: Option<usize>,
) -> Result<SurvivalReport, MultitypeError> {
    let r = g.rank();
    if root_type >= r || generations == 0 {
        return Err(MultitypeError::Param("bad root type or zero generations".into()));
    }
    let runs = par_map(replicas as usize, threads, |rep| -> Result<_, MultitypeError> {
        let mut pop = vec![TypedParticle {
            key: root_key(seed, "multitype-survival", rep as u64),
            position: Word::identity(),
            length: 0,
            generation: 0,
            kind: root_type,
        }];
        let mut alive = vec![false; generations as usize];
        let mut type_counts = vec![vec![0u64; r]; generations as usize];
        let mut truncated = false;
        let mut checked = 0u64;
        let mut violations = 0u64;
        for m in 1..=generations {
            let mut next = Vec::new();
            for u in &pop {
                let c = sample_cone_exit_census(g, law, pi, u.kind, a, n, policy, caps, mix64(u.key ^ CENSUS_SALT))?;
                if c.partial {
                    truncated = true;
                }
                for rec in c.records {
                    let position = g.multiply_unchecked(&u.position, &rec.position);
                    let length = g.word_length(&position);
                    let v = TypedParticle {
                        key: rec.key,
                        length,
                        generation: u.generation + rec.generation,
                        kind: g.suffix_type(&position).expect("nonempty"),
                        position,
                    };
                    checked += 1;
                    let nm = n as u64 * m as u64;
                    if (v.length as u64) < nm || v.generation as f64 > nm as f64 / a + 1.0 {
                        violations += 1;
                    }
                    next.push(v);
                }
                if next.len() > population_cap {
                    truncated = true;
                    break;
                }
            }
            pop = next;
            for u in &pop {
                type_counts[(m - 1) as usize][u.kind] += 1;
            }
            if pop.is_empty() && !truncated {
                break;
            }
            alive[(m - 1) as usize] = true;
            if truncated {
                for later in alive.iter_mut().skip(m as usize) {
                    *later = true;
                }
                break;
            }
        }
        Ok((alive, type_counts, truncated, checked, violations))
    });
    let mut alive = vec![0u64; generations as usize];
    let mut sums = vec![vec![0.0; r]; generations as usize];
    let mut truncated = 0;
    let mut checked = 0;
    let mut violations = 0;
    for run in runs {
        let (al, tc, tr, ch, vi) = run?;
        for (m, &x) in al.iter().enumerate() {
            alive[m] += x as u64;
        }
        for (m, row) in tc.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                sums[m][j] += c as f64;
            }
        }
        truncated += tr as u64;
        checked += ch;
        violations += vi;
    }
    let mean_type_counts = sums
        .into_iter()
        .map(|row| row.into_iter().map(|s| s / replicas as f64).collect())
        .collect();
    Ok(SurvivalReport {
        a,
        n,
        generations,
        root_type,
        replicas,
        alive,
        truncated,
        mean_type_counts,
        particles_checked: checked,
        bound_violations: violations,
    })
}

/// Extinction probabilities by generation `1..=m` from empirical joint offspring
/// laws, by iterating `q ← f(q)` from `q = 0`. Returns `q_root^{(k)}`.
pub fn extinction_by_generation(
    offspring: &[BTreeMap<Vec<u32>, u64>],
    root: usize,
    m: u32,
) -> Vec<f64> {
    let r = offspring.len();
    let mut q: Vec<f64> = vec![0.0; r];
    let mut out = Vec::with_capacity(m as usize);
    for _ in 0..m {
        let next: Vec<f64> = (0..r)
            .map(|i| {
                let total: u64 = offspring[i].values().sum();
                if total == 0 {
                    return 1.0;
                }
                stats::compensated_sum(offspring[i].iter().map(|(z, &c)| {
                    let prod: f64 = z.iter().zip(&q).map(|(&zj, &qj)| qj.powi(zj as i32)).product();
                    c as f64 * prod
                })) / total as f64
            })
            .collect();
        q = next;
        out.push(q[root]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateCell {
    pub a: f64,
    pub n: u32,
    pub matrix: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    pub verdict: Verdict,
    pub reducible: bool,
    pub residual: f64,
    pub replicas: Vec<u64>,
    pub partial_excluded: Vec<u64>,
    pub bound_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationGrid {
    pub cells: Vec<CertificateCell>,
    /// `(a, n₀)`: smallest grid `n` from which every verdict is supercritical.
    pub n0: Vec<(f64, Option<u32>)>,
}

/// Mean matrix and certificate for every `(a, n)` cell.
#[allow(clippy::too_many_arguments)]
pub fn certify_supercritical(
    g: &FreeProduct,
    law: &StepLaw,
    pi: &OffspringLaw,
    a_grid: &[f64],
    n_grid: &[u32],
    replicas: u64,
    policy: ConePolicy,
    caps: CensusCaps,
    seed: u64,
    threads: Option<usize>,
) -> Result<CertificationGrid, MultitypeError> {
    let mut ns = n_grid.to_vec();
    ns.sort_unstable();
    let mut cells = Vec::new();
    let mut n0 = Vec::new();
    for &a in a_grid {
        let mut row = Vec::new();
        for &n in &ns {
            let mm = estimate_mean_matrix(g, law, pi, a, n, replicas, policy, caps, seed, threads)?;
            let cert = certify(&mm.m, &mm.se)?;
            row.push(CertificateCell {
                a,
                n,
                eigenvalue: cert.perron.eigenvalue,
                eigenvector: cert.perron.eigenvector.clone(),
                lower: cert.lower,
                upper: cert.upper,
                verdict: cert.verdict,
                reducible: cert.perron.reducible,
                residual: cert.perron.residual,
                matrix: mm.m,
                se: mm.se,
                replicas: mm.replicas,
                partial_excluded: mm.partial_excluded,
                bound_violations: mm.bound_violations,
            });
        }
        let first = (0..row.len())
            .find(|&k| row[k..].iter().all(|c| c.verdict == Verdict::Supercritical))
            .map(|k| row[k].n);
        n0.push((a, first));
        cells.extend(row);
    }
    Ok(CertificationGrid { cells, n0 })
}
