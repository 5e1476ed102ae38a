//! Branching random walks on a free product.
//!
//! Every particle owns a generator keyed by its Ulam-Harris label: the root
//! key comes from the replica seed and child `k` of a particle with key `p`
//! gets `child_key(p, k)`. A particle first draws its own increment (the
//! root has none), then its number of children. Runs are therefore pathwise
//! comparable across starting points and across the different walkers in
//! this module, and independent of how a generation is scheduled.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{ConePolicy, FreeProduct, Word};
use crate::rng::{child_key, mix64, par_map, particle_rng, replica_seed};
use crate::stats;
use crate::walk::{self, StepLaw, WalkError};

/// Frontiers at least this large are expanded in parallel.
const PAR_FRONTIER: usize = 2048;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BrwError {
    #[error("offspring law puts mass {0} on 0 children; the population must never die out")]
    ExtinctionMass(f64),
    #[error("offspring law sums to {0}, expected 1")]
    OffspringSum(f64),
    #[error("offspring weight {value} for {children} children is negative or not finite")]
    BadOffspringWeight { children: usize, value: f64 },
    #[error("offspring mean {0} must satisfy 1 < rho < inf")]
    NotSupercritical(f64),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Walk(#[from] WalkError),
}

/// Offspring distribution `π` on `{1, 2, …}`.
#[derive(Debug, Clone)]
pub struct OffspringLaw {
    pmf: Vec<f64>,
    rho: f64,
    sampler: WeightedIndex<f64>,
}

impl OffspringLaw {
    /// `pmf[k]` = probability of `k` children. Requires `pmf[0] = 0` and `ρ > 1`.
    pub fn new(pmf: Vec<f64>) -> Result<Self, BrwError> {
        let law = Self::new_allow_critical(pmf)?;
        if !(law.rho > 1.0 && law.rho.is_finite()) {
            return Err(BrwError::NotSupercritical(law.rho));
        }
        Ok(law)
    }

    /// Like [`OffspringLaw::new`] but also accepts `ρ = 1`, i.e. `π = δ_1`.
    pub fn new_allow_critical(pmf: Vec<f64>) -> Result<Self, BrwError> {
        for (k, &w) in pmf.iter().enumerate() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(BrwError::BadOffspringWeight { children: k, value: w });
            }
        }
        if pmf.first().copied().unwrap_or(0.0) > 0.0 {
            return Err(BrwError::ExtinctionMass(pmf[0]));
        }
        let sum = stats::compensated_sum(pmf.iter().copied());
        if (sum - 1.0).abs() > walk::MASS_TOL {
            return Err(BrwError::OffspringSum(sum));
        }
        let rho = stats::compensated_sum(pmf.iter().enumerate().map(|(k, &p)| k as f64 * p));
        let sampler = WeightedIndex::new(&pmf).map_err(|e| BrwError::Param(format!("{e}")))?;
        Ok(OffspringLaw { pmf, rho, sampler })
    }

    pub fn single_child() -> Self {
        Self::new_allow_critical(vec![0.0, 1.0]).expect("delta_1")
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.sampler.sample(rng) as u32
    }
}

/// One living particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    /// Hash of the Ulam-Harris label; seeds the particle's own generator.
    pub key: u64,
    pub generation: u32,
    pub position: Word,
    pub length: u32,
    pub children: u32,
}

impl Particle {
    pub fn root(key: u64, start: Word, g: &FreeProduct, pi: &OffspringLaw) -> Self {
        let mut rng = particle_rng(key);
        Particle {
            key,
            generation: 0,
            length: g.word_length(&start),
            position: start,
            children: pi.sample(&mut rng),
        }
    }

    /// Child `rank`: draws its increment, then its own offspring count.
    #[inline]
    pub fn child(&self, rank: u32, g: &FreeProduct, law: &StepLaw, pi: &OffspringLaw) -> Particle {
        let key = child_key(self.key, rank);
        let mut rng = particle_rng(key);
        let mut position = self.position.clone();
        let mut length = self.length as i64;
        if let Some(l) = law.sample(&mut rng) {
            length += g.push_letter(&mut position, l);
        }
        Particle {
            key,
            generation: self.generation + 1,
            position,
            length: length as u32,
            children: pi.sample(&mut rng),
        }
    }
}

/// Root key of replica `replica` in stream `tag`.
pub fn root_key(seed: u64, tag: &str, replica: u64) -> u64 {
    mix64(replica_seed(seed, tag, replica))
}

fn expand<T, F>(frontier: &[T], f: F) -> Vec<T>
where
    T: Send + Sync,
    F: Fn(&T) -> Vec<T> + Sync + Send,
{
    if frontier.len() >= PAR_FRONTIER {
        frontier
            .par_chunks(512)
            .flat_map_iter(|chunk| chunk.iter().flat_map(&f).collect::<Vec<_>>())
            .collect()
    } else {
        frontier.iter().flat_map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub n: u32,
    pub population: u64,
    pub max_disp: u32,
    pub min_disp: u32,
    /// `histogram[l]` particles at length `l`.
    pub histogram: Vec<u64>,
}

impl GenerationStats {
    fn of(n: u32, frontier: &[Particle]) -> Self {
        let max_disp = frontier.iter().map(|p| p.length).max().unwrap_or(0);
        let min_disp = frontier.iter().map(|p| p.length).min().unwrap_or(0);
        let mut histogram = vec![0u64; max_disp as usize + 1];
        for p in frontier {
            histogram[p.length as usize] += 1;
        }
        GenerationStats {
            n,
            population: frontier.len() as u64,
            max_disp,
            min_disp,
            histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrwRun {
    pub stats: Vec<GenerationStats>,
    /// The population cap stopped the run early.
    pub truncated: bool,
    /// Final frontier, when requested.
    pub frontier: Option<Vec<Particle>>,
}

/// Generation-by-generation BRW from `start`, up to generation `n`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_brw(
    g: &FreeProduct,
    law: &StepLaw,
    pi: &OffspringLaw,
    n: u32,
    pop_cap: u64,
    key: u64,
    start: &Word,
    keep_frontier: bool,
) -> BrwRun {
    let mut frontier = vec![Particle::root(key, start.clone(), g, pi)];
    let mut stats = vec![GenerationStats::of(0, &frontier)];
    let mut truncated = false;
    for gen in 1..=n {
        let next_size: u64 = frontier.iter().map(|p| p.children as u64).sum();
        if next_size > pop_cap {
            truncated = true;
            break;
        }
        frontier = expand(&frontier, |p| {
            (0..p.children).map(|k| p.child(k, g, law, pi)).collect()
        });
        stats.push(GenerationStats::of(gen, &frontier));
    }
    BrwRun {
        stats,
        truncated,
        frontier: keep_frontier.then_some(frontier),
    }
}

/// Test functions for the many-to-one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    One,
    IndicatorWord { word: String },
    LengthAtLeast { c: u32 },
    ExpLength { t: f64 },
}

impl TestFunction {
    pub fn label(&self) -> String {
        match self {
            TestFunction::One => "1".into(),
            TestFunction::IndicatorWord { word } => format!("indicator[x = {word}]"),
            TestFunction::LengthAtLeast { c } => format!("indicator[|x| >= {c}]"),
            TestFunction::ExpLength { t } => format!("exp({t}|x|)"),
        }
    }

    fn compile(&self, g: &FreeProduct) -> Result<CompiledFn, BrwError> {
        Ok(match self {
            TestFunction::One => CompiledFn::One,
            TestFunction::IndicatorWord { word } => CompiledFn::Word(
                g.parse_tokens(word)
                    .map_err(|e| BrwError::Param(format!("test function word: {e}")))?,
            ),
            TestFunction::LengthAtLeast { c } => CompiledFn::AtLeast(*c),
            TestFunction::ExpLength { t } => CompiledFn::Exp(*t),
        })
    }
}

enum CompiledFn {
    One,
    Word(Word),
    AtLeast(u32),
    Exp(f64),
}

impl CompiledFn {
    fn eval(&self, w: &Word, len: u32) -> f64 {
        match self {
            CompiledFn::One => 1.0,
            CompiledFn::Word(x) => (w == x) as u8 as f64,
            CompiledFn::AtLeast(c) => (len >= *c) as u8 as f64,
            CompiledFn::Exp(t) => (t * len as f64).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManyToOneRow {
    pub function: TestFunction,
    pub label: String,
    pub n: u32,
    pub replicas: u64,
    pub mc_mean: f64,
    pub mc_se: f64,
    /// `ρⁿ E[f(Y_n)]`.
    pub exact: f64,
    pub z: f64,
}

/// Compares `E[Σ_{|v|=n} f(X_v)]` over BRW replicas with `ρⁿ E[f(Y_n)]`.
#[allow(clippy::too_many_arguments)]
pub fn many_to_one_check(
    g: &FreeProduct,
    law: &StepLaw,
    pi: &OffspringLaw,
    n: u32,
    functions: &[TestFunction],
    replicas: u64,
    cap: usize,
    seed: u64,
    threads: Option<usize>,
) -> Result<Vec<ManyToOneRow>, BrwError> {
    let compiled = functions
        .iter()
        .map(|f| f.compile(g))
        .collect::<Result<Vec<_>, _>>()?;
    let dist = walk::exact_distribution(g, law, n as usize, cap)?;
    let rho_n = pi.rho().powi(n as i32);
    let sums = par_map(replicas as usize, threads, |i| {
        let run = simulate_brw(
            g,
            law,
            pi,
            n,
            u64::MAX,
            root_key(seed, "many-to-one", i as u64),
            &Word::identity(),
            true,
        );
        let frontier = run.frontier.expect("frontier kept");
        compiled
            .iter()
            .map(|f| stats::compensated_sum(frontier.iter().map(|p| f.eval(&p.position, p.length))))
            .collect::<Vec<f64>>()
    });
    Ok(functions
        .iter()
        .zip(&compiled)
        .enumerate()
        .map(|(j, (f, c))| {
            let xs: Vec<f64> = sums.iter().map(|s| s[j]).collect();
            let (mean, se) = stats::mean_and_se(&xs);
            let exact = rho_n * dist.expect(|w| c.eval(w, g.word_length(w)));
            let z = if se > 0.0 {
                (mean - exact) / se
            } else if (mean - exact).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            ManyToOneRow {
                function: f.clone(),
                label: f.label(),
                n,
                replicas,
                mc_mean: mean,
                mc_se: se,
                exact,
                z,
            }
        })
        .collect())
}

/// A frozen first-exit particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitParticle {
    pub key: u64,
    pub generation: u32,
    pub suffix_type: usize,
    pub stayed_in_cone: bool,
    pub length: u32,
    pub position: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingLine {
    pub n: u32,
    pub a: f64,
    pub cone: usize,
    pub records: Vec<ExitParticle>,
    /// Lineages still inside the ball at the generation cap.
    pub censored: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
struct LineParticle {
    p: Particle,
    stayed: bool,
}

/// First-exit particles from the ball of radius `n`.
#[allow(clippy::too_many_arguments)]
pub fn stopping_line(
    g: &FreeProduct,
    law: &StepLaw,
    pi: &OffspringLaw,
    n: u32,
    a: f64,
    cone: usize,
    policy: ConePolicy,
    gen_cap: u32,
    pop_cap: u64,
    key: u64,
) -> Result<StoppingLine, BrwError> {
    if !(a > 0.0) || cone >= g.rank() || n == 0 {
        return Err(BrwError::Param(
            "stopping line needs a > 0, n >= 1 and a valid cone".into(),
        ));
    }
    if (gen_cap as f64) < (n as f64 / a).ceil() {
        return Err(BrwError::Param(format!(
            "generation cap {gen_cap} is below n/a = {}",
            n as f64 / a
        )));
    }
    let mut frontier = vec![LineParticle {
        p: Particle::root(key, Word::identity(), g, pi),
        stayed: true,
    }];
    let mut records = Vec::new();
    let mut truncated = false;
    for _ in 1..=gen_cap {
        if frontier.is_empty() {
            break;
        }
        let size: u64 = frontier.iter().map(|q| q.p.children as u64).sum();
        if size > pop_cap {
            truncated = true;
            break;
        }
        let next = expand(&frontier, |q| {
            (0..q.p.children)
                .map(|k| {
                    let c = q.p.child(k, g, law, pi);
                    let stayed = q.stayed && g.in_cone_with(&c.position, cone, policy);
                    LineParticle { p: c, stayed }
                })
                .collect()
        });
        frontier = Vec::with_capacity(next.len());
        for q in next {
            if q.p.length >= n {
                records.push(ExitParticle {
                    key: q.p.key,
                    generation: q.p.generation,
                    suffix_type: g.suffix_type(&q.p.position).expect("nonempty"),
                    stayed_in_cone: q.stayed,
                    length: q.p.length,
                    position: g.to_tokens(&q.p.position),
                });
            } else {
                frontier.push(q);
            }
        }
    }
    Ok(StoppingLine {
        n,
        a,
        cone,
        records,
        censored: frontier.len() as u64,
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftComparison {
    pub shift_length: u32,
    pub max_from_e: Vec<u32>,
    pub max_from_x: Vec<u32>,
    pub min_from_e: Vec<u32>,
    pub min_from_x: Vec<u32>,
    pub bound_holds: bool,
}

/// Runs the same tree and steps from `e` and from `x`.
pub fn coupled_start_shift(
    g: &FreeProduct,
    law: &StepLaw,
    pi: &OffspringLaw,
    n: u32,
    x: &Word,
    pop_cap: u64,
    key: u64,
) -> ShiftComparison {
    let a = simulate_brw(g, law, pi, n, pop_cap, key, &Word::identity(), false);
    let b = simulate_brw(g, law, pi, n, pop_cap, key, x, false);
    let shift_length = g.word_length(x);
    let max_from_e: Vec<u32> = a.stats.iter().map(|s| s.max_disp).collect();
    let max_from_x: Vec<u32> = b.stats.iter().map(|s| s.max_disp).collect();
    let bound_holds = max_from_e
        .iter()
        .zip(&max_from_x)
        .all(|(p, q)| p.abs_diff(*q) <= shift_length);
    ShiftComparison {
        shift_length,
        min_from_e: a.stats.iter().map(|s| s.min_disp).collect(),
        min_from_x: b.stats.iter().map(|s| s.min_disp).collect(),
        max_from_e,
        max_from_x,
        bound_holds,
    }
}
