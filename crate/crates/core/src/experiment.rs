//! Experiment configuration, orchestration, result files and reports.
//!
//! A run is a pure function of the effective configuration (including the
//! master seed); the worker count only changes wall-clock time. Everything a
//! run writes is listed with its SHA-256 in `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::brw::{many_to_one_check, root_key, simulate_brw, OffspringLaw, TestFunction};
use crate::group::{ConePolicy, FactorGroup, FreeProduct, Word};
use crate::io::{self, fmt_f64, fmt_opt};
use crate::ldp::{self, RateAnalysis, RateAnalysisSpec, SpeedSolution};
use crate::multitype::{self, CensusCaps, Verdict};
use crate::rng::par_map;
use crate::stats;
use crate::walk::{self, StepLaw};

pub const CODE_VERSION: &str = concat!("freebrw-core ", env!("CARGO_PKG_VERSION"));
/// Identifier of the seed derivation documented in [`crate::rng`].
pub const SEED_SCHEME: &str = "chacha8-sha256-stream/xoshiro256pp-replica/splitmix64-tree/v1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config validation failed:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<Violation>),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for ExperimentError {
    fn from(e: csv::Error) -> Self {
        ExperimentError::Io(e.into())
    }
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Parse(_) | ExperimentError::Validation(_) => 1,
            ExperimentError::Io(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// `A1`, `A2`, `A3`, `group`, `step`, `offspring` or `params`.
    pub code: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.code, self.message)
    }
}

fn violation(code: &str, message: impl Into<String>) -> Violation {
    Violation {
        code: code.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    Validate,
    RwSim,
    RwExact,
    LdpCurve,
    SpeedExperiment,
    MultitypeCertify,
    ExitRate,
}

impl Selector {
    pub fn name(self) -> &'static str {
        match self {
            Selector::Validate => "validate",
            Selector::RwSim => "rw-sim",
            Selector::RwExact => "rw-exact",
            Selector::LdpCurve => "ldp-curve",
            Selector::SpeedExperiment => "speed-experiment",
            Selector::MultitypeCertify => "multitype-certify",
            Selector::ExitRate => "exit-rate",
        }
    }

    fn needs_offspring(self) -> bool {
        matches!(
            self,
            Selector::LdpCurve | Selector::SpeedExperiment | Selector::MultitypeCertify
        )
    }
}

/// One factor: a preset such as `"cyclic:3"`, or a full Cayley table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generators: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub factors: Vec<FactorSpec>,
}

/// Missing `alphas` means equal weights; missing `factor_laws` means uniform
/// on each generating set, with `laziness` mass at the identity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSpec {
    pub alphas: Option<Vec<f64>>,
    pub factor_laws: Option<Vec<Vec<f64>>>,
    pub laziness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffspringSpec {
    pub pmf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsSpec {
    /// Largest BRW generation size.
    pub pop_cap: u64,
    /// Largest exact support.
    pub exact_cap: usize,
    /// Largest live frontier inside one cone-exit census.
    pub census_pop_cap: u64,
    /// Largest multitype population per replica.
    pub multitype_population_cap: usize,
}

impl Default for CapsSpec {
    fn default() -> Self {
        CapsSpec {
            pop_cap: 10_000_000,
            exact_cap: 5_000_000,
            census_pop_cap: 10_000_000,
            multitype_population_cap: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RwSimSpec {
    pub ns: Vec<usize>,
    pub replicas: u64,
}

impl Default for RwSimSpec {
    fn default() -> Self {
        RwSimSpec {
            ns: vec![6, 10],
            replicas: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RwExactSpec {
    pub n_max: usize,
    pub spectral_n_max: usize,
}

impl Default for RwExactSpec {
    fn default() -> Self {
        RwExactSpec {
            n_max: 10,
            spectral_n_max: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdpCurveSpec {
    /// Extra mean offspring values to solve speeds for.
    pub rhos: Vec<f64>,
}

/// A speed given as a number or relative to the estimated speeds:
/// `ell`, `vmax`, `vmin`, `mid` (= (ell+vmax)/2) or `k`, optionally as
/// `base+c`, `base-c` or `c*base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpeedValue {
    Number(f64),
    Expr(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedRefs {
    pub ell: f64,
    pub v_max: f64,
    pub v_min: f64,
    pub k: f64,
}

impl SpeedValue {
    fn needs_refs(&self) -> bool {
        matches!(self, SpeedValue::Expr(_))
    }

    fn check_syntax(&self) -> Result<(), String> {
        let refs = SpeedRefs {
            ell: 0.5,
            v_max: 0.75,
            v_min: 0.25,
            k: 1.0,
        };
        self.resolve(&refs).map(|_| ())
    }

    pub fn resolve(&self, refs: &SpeedRefs) -> Result<f64, String> {
        let s = match self {
            SpeedValue::Number(x) => return Ok(*x),
            SpeedValue::Expr(s) => s.replace(' ', ""),
        };
        let base = |b: &str| -> Result<f64, String> {
            match b {
                "ell" => Ok(refs.ell),
                "vmax" => Ok(refs.v_max),
                "vmin" => Ok(refs.v_min),
                "mid" => Ok(0.5 * (refs.ell + refs.v_max)),
                "k" => Ok(refs.k),
                other => other
                    .parse::<f64>()
                    .map_err(|_| format!("unknown speed reference '{other}'")),
            }
        };
        let num = |c: &str| c.parse::<f64>().map_err(|_| format!("bad number '{c}' in speed '{s}'"));
        if let Some((c, b)) = s.split_once('*') {
            return Ok(num(c)? * base(b)?);
        }
        if let Some(p) = s.find(['+', '-']).filter(|&p| p > 0) {
            let (b, rest) = s.split_at(p);
            let c = num(&rest[1..])?;
            return Ok(if rest.starts_with('+') { base(b)? + c } else { base(b)? - c });
        }
        base(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManyToOneSpec {
    pub enabled: bool,
    pub n: u32,
    pub replicas: u64,
    pub functions: Vec<TestFunction>,
}

impl Default for ManyToOneSpec {
    fn default() -> Self {
        ManyToOneSpec {
            enabled: true,
            n: 6,
            replicas: 10_000,
            functions: vec![
                TestFunction::One,
                TestFunction::IndicatorWord { word: "e".into() },
                TestFunction::LengthAtLeast { c: 4 },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedSpec {
    pub n: u32,
    pub replicas: u64,
    /// Generations summarized in the report.
    pub checkpoints: Vec<u32>,
    /// Offset `δ` of the overshoot event `max |X_v| > (v_max + δ) n`.
    pub margin: f64,
    pub many_to_one: ManyToOneSpec,
}

impl Default for SpeedSpec {
    fn default() -> Self {
        SpeedSpec {
            n: 35,
            replicas: 200,
            checkpoints: vec![15, 25, 35],
            margin: 0.1,
            many_to_one: ManyToOneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalSpec {
    pub enabled: bool,
    pub a: SpeedValue,
    pub n: u32,
    pub generations: u32,
    pub replicas: u64,
    /// 1-based.
    pub root_type: usize,
    /// Censuses per type behind the generating-function oracle.
    pub census_replicas: u64,
}

impl Default for SurvivalSpec {
    fn default() -> Self {
        SurvivalSpec {
            enabled: true,
            a: SpeedValue::Expr("ell+0.05".into()),
            n: 10,
            generations: 5,
            replicas: 200,
            root_type: 1,
            census_replicas: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultitypeSpec {
    pub a_grid: Vec<SpeedValue>,
    pub n_grid: Vec<u32>,
    pub replicas: u64,
    pub strict_cones: bool,
    pub survival: SurvivalSpec,
}

impl Default for MultitypeSpec {
    fn default() -> Self {
        MultitypeSpec {
            a_grid: vec![SpeedValue::Expr("ell+0.05".into()), SpeedValue::Expr("mid".into())],
            n_grid: vec![10, 20, 40],
            replicas: 1000,
            strict_cones: false,
            survival: SurvivalSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitRateSpec {
    pub a: SpeedValue,
    pub n_grid: Vec<u32>,
    pub replicas: u64,
    /// 1-based cone for the restricted variant.
    pub cone: Option<usize>,
    pub strict_cones: bool,
    /// Family-wise level of the Wilson bands, in standard deviations.
    pub sigmas: f64,
}

impl Default for ExitRateSpec {
    fn default() -> Self {
        ExitRateSpec {
            a: SpeedValue::Expr("1.2*ell".into()),
            n_grid: vec![20, 40, 60, 80],
            replicas: 1_000_000,
            cone: Some(1),
            strict_cones: false,
            sigmas: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Selector,
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub group: GroupSpec,
    #[serde(default)]
    pub step: StepSpec,
    #[serde(default)]
    pub offspring: Option<OffspringSpec>,
    #[serde(default)]
    pub caps: CapsSpec,
    #[serde(default)]
    pub ldp: RateAnalysisSpec,
    #[serde(default)]
    pub rw_sim: RwSimSpec,
    #[serde(default)]
    pub rw_exact: RwExactSpec,
    #[serde(default)]
    pub ldp_curve: LdpCurveSpec,
    #[serde(default)]
    pub speed: SpeedSpec,
    #[serde(default)]
    pub multitype: MultitypeSpec,
    #[serde(default)]
    pub exit_rate: ExitRateSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical JSON rendering; independent of key order in the file.
    pub fn digest(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex(&Sha256::digest(io::canonical_json(&v).as_bytes()))
    }

    /// Applies `name=value` to a field of `[caps]`.
    pub fn override_cap(&mut self, name: &str, value: &str) -> Result<(), ExperimentError> {
        let bad = |e: std::num::ParseIntError| {
            ExperimentError::Parse(format!("cap override {name}={value}: {e}"))
        };
        let v = value.replace('_', "");
        match name {
            "pop_cap" => self.caps.pop_cap = v.parse().map_err(bad)?,
            "exact_cap" => self.caps.exact_cap = v.parse().map_err(bad)?,
            "census_pop_cap" => self.caps.census_pop_cap = v.parse().map_err(bad)?,
            "multitype_population_cap" => {
                self.caps.multitype_population_cap = v.parse().map_err(bad)?
            }
            other => {
                return Err(ExperimentError::Parse(format!(
                    "unknown cap '{other}' (expected pop_cap, exact_cap, census_pop_cap or multitype_population_cap)"
                )))
            }
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A validated configuration with its built objects.
#[derive(Debug, Clone)]
pub struct Experiment {
    /// Effective configuration: every default and derived law written out.
    pub config: ExperimentConfig,
    pub group: FreeProduct,
    pub law: StepLaw,
    pub offspring: Option<OffspringLaw>,
    pub notices: Vec<String>,
}

fn build_factor(index: usize, spec: &FactorSpec) -> Result<FactorGroup, String> {
    match (&spec.preset, &spec.table) {
        (Some(p), None) => {
            if spec.labels.is_some() || spec.generators.is_some() {
                return Err(format!("factor {}: a preset takes no labels or generators", index + 1));
            }
            FactorGroup::preset(index, p).map_err(|e| e.to_string())
        }
        (None, Some(table)) => {
            let order = table.len();
            let labels = spec.labels.clone().unwrap_or_else(|| {
                (0..order)
                    .map(|i| if i == 0 { "e".to_string() } else { format!("g{i}") })
                    .collect()
            });
            let gens = spec.generators.clone().unwrap_or_else(|| (1..order).collect());
            FactorGroup::from_table(index, labels, table, &gens).map_err(|e| e.to_string())
        }
        _ => Err(format!("factor {}: give exactly one of preset or table", index + 1)),
    }
}

/// Checks every precondition of the selected experiment and builds the objects.
pub fn validate(mut config: ExperimentConfig) -> Result<Experiment, Vec<Violation>> {
    let mut v = Vec::new();
    let mut notices = Vec::new();
    let mut factors = Vec::new();
    for (i, f) in config.group.factors.iter().enumerate() {
        match build_factor(i, f) {
            Ok(fg) => {
                if fg.was_symmetrized() {
                    notices.push(format!(
                        "factor {}: generating set was not closed under inverses and has been symmetrized",
                        i + 1
                    ));
                }
                factors.push(fg);
            }
            Err(e) => v.push(violation("group", e)),
        }
    }
    let group = if v.is_empty() {
        match FreeProduct::new(factors) {
            Ok(g) => Some(g),
            Err(e) => {
                v.push(violation("group", e.to_string()));
                None
            }
        }
    } else {
        None
    };

    let mut law = None;
    if let Some(g) = &group {
        let r = g.rank();
        let alphas = config.step.alphas.clone().unwrap_or_else(|| vec![1.0 / r as f64; r]);
        if alphas.len() == r {
            for (k, &a) in alphas.iter().enumerate() {
                if !(a > 0.0) {
                    v.push(violation(
                        "A3",
                        format!("alpha_{} = {a}: every factor needs positive mass", k + 1),
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&config.step.laziness) {
            v.push(violation("step", format!("laziness {} must lie in [0, 1)", config.step.laziness)));
        }
        let laws = config
            .step
            .factor_laws
            .clone()
            .unwrap_or_else(|| StepLaw::uniform_generator_laws(g, config.step.laziness));
        if v.iter().all(|x| x.code != "A3") {
            match StepLaw::new(g, alphas.clone(), laws.clone()) {
                Ok(l) => {
                    config.step.alphas = Some(alphas);
                    config.step.factor_laws = Some(laws);
                    law = Some(l);
                }
                Err(walk::WalkError::AlphaNotPositive { factor, value }) => v.push(violation(
                    "A3",
                    format!("alpha_{factor} = {value}: every factor needs positive mass"),
                )),
                Err(e) => v.push(violation("step", e.to_string())),
            }
        }
    }

    let mut offspring = None;
    match &config.offspring {
        Some(spec) => match OffspringLaw::new(spec.pmf.clone()) {
            Ok(pi) => offspring = Some(pi),
            Err(e) => {
                let code = match e {
                    crate::brw::BrwError::ExtinctionMass(_) => "A2",
                    crate::brw::BrwError::NotSupercritical(_) => "A1",
                    _ => "offspring",
                };
                v.push(violation(code, e.to_string()));
            }
        },
        None if config.experiment.needs_offspring() => v.push(violation(
            "offspring",
            format!("experiment {} needs an [offspring] section", config.experiment.name()),
        )),
        None => {}
    }

    if let Some(g) = &group {
        check_params(&config, g, &mut v);
    }
    if !v.is_empty() {
        return Err(v);
    }
    Ok(Experiment {
        config,
        group: group.expect("group built"),
        law: law.expect("law built"),
        offspring,
        notices,
    })
}

fn check_params(c: &ExperimentConfig, g: &FreeProduct, v: &mut Vec<Violation>) {
    let mut p = |ok: bool, msg: &str| {
        if !ok {
            v.push(violation("params", msg));
        }
    };
    let r = g.rank();
    match c.experiment {
        Selector::Validate => {}
        Selector::RwSim => {
            p(!c.rw_sim.ns.is_empty(), "rw_sim.ns must not be empty");
            p(c.rw_sim.replicas > 0, "rw_sim.replicas must be positive");
        }
        Selector::RwExact => {
            p(c.rw_exact.spectral_n_max >= 2 && c.rw_exact.spectral_n_max % 2 == 0, "rw_exact.spectral_n_max must be even and at least 2");
        }
        _ => {}
    }
    if matches!(
        c.experiment,
        Selector::LdpCurve | Selector::SpeedExperiment | Selector::MultitypeCertify | Selector::ExitRate
    ) {
        let l = &c.ldp;
        p(l.t_min < 0.0 && l.t_max > 0.0 && l.t_step > 0.0, "ldp t grid must straddle 0 with a positive step");
        p(l.x_points >= 2, "ldp.x_points must be at least 2");
        p(l.exact_ns.len() + l.mc_ns.len() >= 3, "ldp needs at least 3 values of n");
        p(l.spectral_n_max >= 2 && l.spectral_n_max % 2 == 0, "ldp.spectral_n_max must be even and at least 2");
        p(l.mc_ns.is_empty() || l.mc_replicas > 0, "ldp.mc_replicas must be positive");
        p(l.drift_replicas >= 2 && l.drift_n > 0, "ldp drift needs n > 0 and at least 2 replicas");
    }
    match c.experiment {
        Selector::SpeedExperiment => {
            let s = &c.speed;
            p(s.n >= 1 && s.replicas >= 1, "speed.n and speed.replicas must be positive");
            p(s.checkpoints.iter().all(|&m| m >= 1 && m <= s.n), "speed.checkpoints must lie in 1..=speed.n");
            p(!s.many_to_one.enabled || s.many_to_one.replicas >= 2, "speed.many_to_one.replicas must be at least 2");
            for f in &s.many_to_one.functions {
                if let TestFunction::IndicatorWord { word } = f {
                    p(g.parse_tokens(word).is_ok(), "speed.many_to_one: indicator word does not parse");
                }
            }
        }
        Selector::MultitypeCertify => {
            let m = &c.multitype;
            p(!m.a_grid.is_empty() && !m.n_grid.is_empty(), "multitype a_grid and n_grid must not be empty");
            p(m.n_grid.iter().all(|&n| n >= 1), "multitype.n_grid entries must be positive");
            p(m.n_grid.windows(2).all(|w| w[0] < w[1]), "multitype.n_grid must be increasing");
            p(m.replicas >= 100, "multitype.replicas must be at least 100");
            for a in m.a_grid.iter().chain(std::iter::once(&m.survival.a)) {
                p(a.check_syntax().is_ok(), "multitype: unparseable speed expression");
            }
            let s = &m.survival;
            p(!s.enabled || (1..=r).contains(&s.root_type), "multitype.survival.root_type must lie in 1..=r");
            p(!s.enabled || (s.generations >= 1 && s.replicas >= 1 && s.n >= 1 && s.census_replicas >= 1), "multitype.survival counts must be positive");
        }
        Selector::ExitRate => {
            let e = &c.exit_rate;
            p(!e.n_grid.is_empty() && e.n_grid.iter().all(|&n| n >= 1), "exit_rate.n_grid must hold positive values");
            p(e.replicas >= 1, "exit_rate.replicas must be positive");
            p(e.cone.is_none_or(|i| (1..=r).contains(&i)), "exit_rate.cone must lie in 1..=r");
            p(e.sigmas > 0.0, "exit_rate.sigmas must be positive");
            p(e.a.check_syntax().is_ok(), "exit_rate.a: unparseable speed expression");
        }
        _ => {}
    }
}

/// Reads, parses and validates a config file.
pub fn load_and_validate(path: &Path) -> Result<Experiment, ExperimentError> {
    let text = fs::read_to_string(path)?;
    let config = ExperimentConfig::from_toml(&text)?;
    validate(config).map_err(ExperimentError::Validation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapHit {
    pub module: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: Selector,
    pub config_digest: String,
    pub code_version: String,
    pub seed_scheme: String,
    pub master_seed: u64,
    pub threads: Option<usize>,
    pub wall_clock_seconds: f64,
    pub caps_hit: Vec<CapHit>,
    pub cell_errors: Vec<CellError>,
    pub notices: Vec<String>,
    pub files: Vec<FileDigest>,
    pub effective_config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    /// 0 on success, 2 when a cap was hit or a cell failed.
    pub exit_code: i32,
}

struct Ctx<'a> {
    exp: &'a Experiment,
    out: PathBuf,
    threads: Option<usize>,
    files: Vec<String>,
    caps_hit: Vec<CapHit>,
    cell_errors: Vec<CellError>,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.exp.config.master_seed
    }

    fn json<T: Serialize>(&mut self, name: &str, schema: &str, payload: &T) -> std::io::Result<()> {
        io::write_json(&self.out.join(name), schema, payload)?;
        self.files.push(name.into());
        Ok(())
    }

    fn csv(&mut self, name: &str, schema: &str) -> std::io::Result<csv::Writer<std::io::BufWriter<fs::File>>> {
        self.files.push(name.into());
        io::create_csv(&self.out.join(name), schema)
    }

    fn plot(&mut self, name: &str, spec: PlotSpec) -> std::io::Result<()> {
        self.json(name, "plot-spec", &spec)
    }

    fn cap(&mut self, module: &str, detail: String) {
        self.caps_hit.push(CapHit {
            module: module.into(),
            detail,
        });
    }

    fn fail(&mut self, cell: &str, error: impl std::fmt::Display) {
        self.cell_errors.push(CellError {
            cell: cell.into(),
            error: error.to_string(),
        });
    }
}

/// Declarative plot description; any front-end can render it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub title: String,
    pub kind: String,
    pub data: String,
    pub x: String,
    pub series: Vec<Series>,
    pub reference_lines: Vec<ReferenceLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub column: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    /// `horizontal` or `vertical`.
    pub orientation: String,
    pub value: f64,
    pub label: String,
    pub band: Option<(f64, f64)>,
}

fn series(column: &str, label: &str) -> Series {
    Series {
        column: column.into(),
        label: label.into(),
    }
}

fn refline(orientation: &str, value: f64, label: &str, band: Option<(f64, f64)>) -> ReferenceLine {
    ReferenceLine {
        orientation: orientation.into(),
        value,
        label: label.into(),
        band,
    }
}

/// Runs the configured experiment into `out` (created if needed).
pub fn run(exp: &Experiment, out: &Path, threads: Option<usize>) -> Result<RunOutcome, ExperimentError> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    let mut ctx = Ctx {
        exp,
        out: out.to_path_buf(),
        threads,
        files: Vec::new(),
        caps_hit: Vec::new(),
        cell_errors: Vec::new(),
    };
    match exp.config.experiment {
        Selector::Validate => run_validate(&mut ctx)?,
        Selector::RwSim => run_rw_sim(&mut ctx)?,
        Selector::RwExact => run_rw_exact(&mut ctx)?,
        Selector::LdpCurve => run_ldp_curve(&mut ctx)?,
        Selector::SpeedExperiment => run_speed(&mut ctx)?,
        Selector::MultitypeCertify => run_multitype(&mut ctx)?,
        Selector::ExitRate => run_exit_rate(&mut ctx)?,
    }
    let mut files = Vec::new();
    for name in &ctx.files {
        let bytes = fs::read(out.join(name))?;
        files.push(FileDigest {
            name: name.clone(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let manifest = RunManifest {
        experiment: exp.config.experiment,
        config_digest: exp.config.digest(),
        code_version: CODE_VERSION.into(),
        seed_scheme: SEED_SCHEME.into(),
        master_seed: exp.config.master_seed,
        threads,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        caps_hit: ctx.caps_hit,
        cell_errors: ctx.cell_errors,
        notices: exp.notices.clone(),
        files,
        effective_config: exp.config.clone(),
    };
    io::write_json(&out.join(MANIFEST), "run-manifest", &manifest)?;
    let exit_code = if manifest.caps_hit.is_empty() && manifest.cell_errors.is_empty() {
        0
    } else {
        2
    };
    Ok(RunOutcome {
        out_dir: out.to_path_buf(),
        manifest,
        exit_code,
    })
}

fn run_validate(ctx: &mut Ctx) -> Result<(), ExperimentError> {
    let e = ctx.exp;
    let g = &e.group;
    let factors: Vec<Value> = g
        .factors()
        .iter()
        .map(|f| {
            json!({
                "order": f.order(),
                "labels": f.labels(),
                "generators": f.generators(),
                "diameter": f.diameter(),
                "symmetrized": f.was_symmetrized(),
            })
        })
        .collect();
    let payload = json!({
        "rank": g.rank(),
        "factors": factors,
        "k": e.law.k(),
        "alphas": e.law.alphas(),
        "identity_mass": e.law.identity_mass(),
        "offspring": e.offspring.as_ref().map(|pi| json!({"pmf": pi.pmf(), "rho": pi.rho()})),
        "notices": e.notices,
    });
    ctx.json("validation.json", "validation", &payload)?;
    Ok(())
}

fn run_rw_sim(ctx: &mut Ctx) -> Result<(), ExperimentError> {
    let e = ctx.exp;
    let spec = e.config.rw_sim.clone();
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    for &n in &spec.ns {
        match walk::compare_exact_mc(&e.group, &e.law, n, spec.replicas, e.config.caps.exact_cap, ctx.seed(), &format!("rw-sim-{n}"), ctx.threads) {
            Ok(c) => {
                summaries.push(json!({
                    "n": c.n,
                    "replicas": c.replicas,
                    "alpha": c.alpha,
                    "cells": c.cells.len(),
                    "cells_outside": c.cells_outside,
                    "off_support": c.off_support,
                    "all_inside": c.all_inside,
                }));
                rows.push(c);
            }
            Err(err @ walk::WalkError::CapExceeded { .. }) => ctx.cap("walk", format!("n = {n}: {err}")),
            Err(err) => ctx.fail(&format!("rw-sim n = {n}"), err),
        }
    }
    let mut w = ctx.csv("rw_sim.csv", "rw_sim")?;
    w.write_record(["n", "word", "length", "count", "empirical", "exact", "lower", "upper", "inside"])?;
    for c in &rows {
        for cell in &c.cells {
            w.write_record([
                c.n.to_string(),
                cell.word.clone(),
                cell.length.to_string(),
                cell.count.to_string(),
                fmt_f64(cell.empirical),
                fmt_f64(cell.exact),
                fmt_f64(cell.band.0),
                fmt_f64(cell.band.1),
                cell.inside.to_string(),
            ])?;
        }
    }
    w.flush()?;
    ctx.json("rw_sim.json", "rw_sim", &json!({ "comparisons": summaries }))?;
    ctx.plot(
        "plot_rw_sim.json",
        PlotSpec {
            title: "Empirical against exact law of Y_n".into(),
            kind: "scatter".into(),
            data: "rw_sim.csv".into(),
            x: "exact".into(),
            series: vec![series("empirical", "empirical frequency")],
            reference_lines: vec![],
        },
    )?;
    Ok(())
}

fn run_rw_exact(ctx: &mut Ctx) -> Result<(), ExperimentError> {
    let e = ctx.exp;
    let spec = e.config.rw_exact.clone();
    let cap = e.config.caps.exact_cap;
    let dists = match walk::exact_distributions_upto(&e.group, &e.law, spec.n_max, cap) {
        Ok(d) => d,
        Err(err) => {
            ctx.cap("walk", err.to_string());
            Vec::new()
        }
    };
    let mut w = ctx.csv("rw_exact.csv", "rw_exact")?;
    w.write_record(["n", "word", "length", "probability"])?;
    for d in &dists {
        for (word, p) in d.sorted(&e.group) {
            w.write_record([
                d.n.to_string(),
                e.group.to_tokens(word),
                e.group.word_length(word).to_string(),
                fmt_f64(p),
            ])?;
        }
    }
    w.flush()?;
    let mut w = ctx.csv("rw_exact_lengths.csv", "rw_exact_lengths")?;
    w.write_record(["n", "length", "probability"])?;
    for d in &dists {
        for (l, p) in d.length_distribution(&e.group).iter().enumerate() {
            w.write_record([d.n.to_string(), l.to_string(), fmt_f64(*p)])?;
        }
    }
    w.flush()?;
    let spectral = match walk::estimate_spectral_radius(&e.group, &e.law, spec.spectral_n_max, cap) {
        Ok(s) => Some(s),
        Err(err) => {
            ctx.fail("spectral radius", err);
            None
        }
    };
    let summary: Vec<Value> = dists
        .iter()
        .map(|d| {
            json!({
                "n": d.n,
                "support": d.support.len(),
                "total_mass": d.total_mass(),
                "mean_length": d.expect(|w| e.group.word_length(w) as f64),
            })
        })
        .collect();
    ctx.json("rw_exact.json", "rw_exact", &json!({ "distributions": summary, "spectral": spectral }))?;
    ctx.plot(
        "plot_rw_exact.json",
        PlotSpec {
            title: "Exact length distribution of Y_n".into(),
            kind: "line".into(),
            data: "rw_exact_lengths.csv".into(),
            x: "length".into(),
            series: vec![series("probability", "P(|Y_n| = length), one curve per n")],
            reference_lines: vec![],
        },
    )?;
    Ok(())
}

struct LdpStage {
    analysis: RateAnalysis,
    speeds: Option<SpeedSolution>,
    refs: SpeedRefs,
}

/// Runs the rate pipeline and writes `rate_curve.csv`, `lambda.csv`, `ldp.json`.
fn ldp_stage(ctx: &mut Ctx, extra_rhos: &[f64]) -> Result<Option<LdpStage>, ExperimentError> {
    let e = ctx.exp;
    let analysis = match ldp::analyze_rate(&e.group, &e.law, &e.config.ldp, ctx.seed(), ctx.threads) {
        Ok(a) => a,
        Err(err) => {
            ctx.fail("ldp", err);
            return Ok(None);
        }
    };
    let rf = &analysis.rate;
    let r_hat = analysis.spectral.point;
    let speeds = match e.offspring.as_ref().map(|pi| ldp::solve_speeds(rf, pi.rho(), r_hat)) {
        Some(Ok(s)) => Some(s),
        Some(Err(err)) => {
            ctx.fail("speeds", err);
            None
        }
        None => None,
    };
    let mut extra = Vec::new();
    for &rho in extra_rhos {
        match ldp::solve_speeds(rf, rho, r_hat) {
            Ok(s) => extra.push(json!({"rho": rho, "speeds": s})),
            Err(err) => ctx.fail(&format!("speeds rho = {rho}"), err),
        }
    }
    let mut f = std::io::BufWriter::new(fs::File::create(ctx.out.join("rate_curve.csv"))?);
    rf.write_csv(&mut f)?;
    drop(f);
    ctx.files.push("rate_curve.csv".into());
    let mut w = ctx.csv("lambda.csv", "lambda")?;
    w.write_record(["t", "lambda_hat", "uncertainty", "tag", "largest_n_value"])?;
    let largest = analysis.grid.largest_n_values();
    for (i, h) in analysis.grid.lambda_hat.iter().enumerate() {
        w.write_record([
            fmt_f64(analysis.grid.t_grid[i]),
            fmt_f64(h.value),
            fmt_f64(h.uncertainty),
            serde_json::to_value(h.tag).expect("tag").as_str().unwrap_or("").to_string(),
            fmt_f64(largest[i]),
        ])?;
    }
    w.flush()?;
    let (i0, i0_tag) = rf.eval(0.0);
    let (i_ell, _) = rf.eval(analysis.drift.mean);
    let payload = json!({
        "rho": e.offspring.as_ref().map(|pi| pi.rho()),
        "speeds": speeds,
        "extra_speeds": extra,
        "properties": analysis.properties,
        "spectral": analysis.spectral,
        "drift": analysis.drift,
        "k": rf.k,
        "ell": rf.ell,
        "beta_hat": rf.beta_hat,
        "neg_log_r": rf.neg_log_r,
        "slope_range": rf.slope_range,
        "i_at_zero": io::json_f64(i0),
        "i_at_zero_tag": i0_tag,
        "i_at_ell": io::json_f64(i_ell),
        "grid_extensions": analysis.grid_extensions,
        "lambda_convexity_violations": analysis.grid.convexity_violations(ldp::CONVEXITY_TOL).len(),
    });
    ctx.json("ldp.json", "ldp", &payload)?;
    let mut refs_lines = vec![
        refline("vertical", rf.ell, "ell", Some((analysis.drift.mean - 3.0 * analysis.drift.standard_error, analysis.drift.mean + 3.0 * analysis.drift.standard_error))),
        refline("vertical", rf.beta_hat, "beta_hat", None),
    ];
    if let Some(s) = &speeds {
        refs_lines.push(refline("horizontal", s.log_rho, "log rho", None));
        refs_lines.push(refline("vertical", s.v_max, "v_max", Some(s.v_max_band)));
    }
    ctx.plot(
        "plot_rate_curve.json",
        PlotSpec {
            title: "Rate function I".into(),
            kind: "line".into(),
            data: "rate_curve.csv".into(),
            x: "x".into(),
            series: vec![series("I", "I(x)"), series("uncertainty", "uncertainty")],
            reference_lines: refs_lines,
        },
    )?;
    let refs = SpeedRefs {
        ell: rf.ell,
        v_max: speeds.as_ref().map_or(f64::NAN, |s| s.v_max),
        v_min: speeds.as_ref().map_or(f64::NAN, |s| s.v_min),
        k: rf.k,
    };
    Ok(Some(LdpStage {
        analysis,
        speeds,
        refs,
    }))
}

fn run_ldp_curve(ctx: &mut Ctx) -> Result<(), ExperimentError> {
    let rhos = ctx.exp.config.ldp_curve.rhos.clone();
    ldp_stage(ctx, &rhos)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedCheckpoint {
    pub n: u32,
    pub replicas: u64,
    pub median_max_over_n: f64,
    pub median_min_over_n: f64,
}

fn run_speed(ctx: &mut Ctx) -> Result<(), ExperimentError> {
    let e = ctx.exp;
    let spec = e.config.speed.clone();
    let pi = e.offspring.clone().expect("validated");
    let stage = ldp_stage(ctx, &[])?;
    let n = spec.n;
    let pop_cap = e.config.caps.pop_cap;
    let seed = ctx.seed();
    let runs = par_map(spec.replicas as usize, ctx.threads, |i| {
        simulate_brw(&e.group, &e.law, &pi, n, pop_cap, root_key(seed, "speed", i as u64), &Word::identity(), false)
    });
    let truncated = runs.iter().filter(|r| r.truncated).count() as u64;
    if truncated > 0 {
        ctx.cap("brw", format!("{truncated} of {} replicas hit pop_cap = {pop_cap}", spec.replicas));
    }
    let mut w = ctx.csv("speed_replicas.csv", "speed_replicas")?;
    w.write_record(["replica", "n", "population", "max_disp", "min_disp"])?;
    for (i, r) in runs.iter().enumerate() {
        for s in &r.stats {
            w.write_record([
                i.to_string(),
                s.n.to_string(),
                s.population.to_string(),
                s.max_disp.to_string(),
                s.min_disp.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let at = |m: u32| -> Option<SpeedCheckpoint> {
        let present: Vec<_> = runs.iter().filter_map(|r| r.stats.get(m as usize)).collect();
        if present.is_empty() || m == 0 {
            return None;
        }
        let maxs: Vec<f64> = present.iter().map(|s| s.max_disp as f64 / m as f64).collect();
        let mins: Vec<f64> = present.iter().map(|s| s.min_disp as f64 / m as f64).collect();
        Some(SpeedCheckpoint {
            n: m,
            replicas: present.len() as u64,
            median_max_over_n: stats::median(&maxs),
            median_min_over_n: stats::median(&mins),
        })
    };
    let per_gen: Vec<SpeedCheckpoint> = (1..=n).filter_map(at).collect();
    let mut w = ctx.csv("speed.csv", "speed")?;
    w.write_record(["n", "replicas", "median_max_over_n", "median_min_over_n", "v_max", "v_min"])?;
    let (v_max, v_min) = stage
        .as_ref()
        .and_then(|s| s.speeds.as_ref())
        .map_or((f64::NAN, f64::NAN), |s| (s.v_max, s.v_min));
    for c in &per_gen {
        w.write_record([
            c.n.to_string(),
            c.replicas.to_string(),
            fmt_f64(c.median_max_over_n),
            fmt_f64(c.median_min_over_n),
            fmt_f64(v_max),
            fmt_f64(v_min),
        ])?;
    }
    w.flush()?;
    let checkpoints: Vec<SpeedCheckpoint> = spec.checkpoints.iter().filter_map(|&m| at(m)).collect();
    let min_medians_nonincreasing = checkpoints
        .windows(2)
        .all(|w| w[1].median_min_over_n <= w[0].median_min_over_n);
    let final_stats: Vec<_> = runs.iter().filter_map(|r| r.stats.get(n as usize)).collect();
    let threshold = (v_max + spec.margin) * n as f64;
    let beyond = final_stats.iter().filter(|s| s.max_disp as f64 > threshold).count();
    let fraction_beyond = beyond as f64 / final_stats.len().max(1) as f64;
    let markov_bound = stage.as_ref().map(|s| {
        let i = s.analysis.rate.value(v_max + spec.margin);
        (pi.rho().ln() * n as f64 - n as f64 * i).exp().min(1.0)
    });
    let last = at(n);
    let payload = json!({
        "n": n,
        "replicas": spec.replicas,
        "truncated_replicas": truncated,
        "rho": pi.rho(),
        "k": e.law.k(),
        "speeds": stage.as_ref().and_then(|s| s.speeds.clone()),
        "margin": spec.margin,
        "median_max_over_n": last.as_ref().map(|c| c.median_max_over_n),
        "median_min_over_n": last.as_ref().map(|c| c.median_min_over_n),
        "checkpoints": checkpoints,
        "min_medians_nonincreasing": min_medians_nonincreasing,
        "overshoot_threshold": io::json_f64(threshold),
        "fraction_beyond": fraction_beyond,
        "markov_bound": markov_bound,
    });
    ctx.json("speed.json", "speed", &payload)?;
    if let Some(s) = stage.as_ref().and_then(|s| s.speeds.clone()) {
        ctx.plot(
            "plot_speed.json",
            PlotSpec {
                title: "Extremal displacement per generation".into(),
                kind: "line".into(),
                data: "speed.csv".into(),
                x: "n".into(),
                series: vec![
                    series("median_max_over_n", "median max |X_v| / n"),
                    series("median_min_over_n", "median min |X_v| / n"),
                ],
                reference_lines: vec![
                    refline("horizontal", s.v_max, "v_max", Some(s.v_max_band)),
                    refline("horizontal", s.v_min, "v_min", Some(s.v_min_band)),
                ],
            },
        )?;
    }
    let mto = &spec.many_to_one;
    if mto.enabled {
        match many_to_one_check(&e.group, &e.law, &pi, mto.n, &mto.functions, mto.replicas, e.config.caps.exact_cap, seed, ctx.threads) {
            Ok(rows) => ctx.json("many_to_one.json", "many_to_one", &json!({ "rows": rows }))?,
            Err(err) => ctx.fail("many-to-one", err),
        }
    }
    Ok(())
}

fn policy(strict: bool) -> ConePolicy {
    if strict {
        ConePolicy::Strict
    } else {
        ConePolicy::IdentityAdmitted
    }
}

fn resolve_speed(ctx: &mut Ctx, v: &SpeedValue, refs: Option<&SpeedRefs>, what: &str) -> Option<f64> {
    let r = match (v.needs_refs(), refs) {
        (false, _) => v.resolve(&SpeedRefs { ell: f64::NAN, v_max: f64::NAN, v_min: f64::NAN, k: f64::NAN }),
        (true, Some(refs)) => v.resolve(refs),
        (true, None) => Err("reference speeds unavailable".into()),
    };
    match r {
        Ok(a) if a > 0.0 && a.is_finite() => Some(a),
        Ok(a) => {
            ctx.fail(what, format!("speed resolved to {a}"));
            None
        }
        Err(err) => {
            ctx.fail(what, err);
            None
        }
    }
}

fn run_multitype(ctx: &mut Ctx) -> Result<(), ExperimentError> {
    let e = ctx.exp;
    let spec = e.config.multitype.clone();
    let pi = e.offspring.clone().expect("validated");
    let needs = spec.a_grid.iter().chain(std::iter::once(&spec.survival.a)).any(|a| a.needs_refs());
    let stage = if needs { ldp_stage(ctx, &[])? } else { None };
    let refs = stage.as_ref().map(|s| s.refs);
    let caps = CensusCaps {
        pop_cap: e.config.caps.census_pop_cap,
    };
    let pol = policy(spec.strict_cones);
    let a_values: Vec<f64> = spec
        .a_grid
        .iter()
        .filter_map(|a| resolve_speed(ctx, a, refs.as_ref(), "multitype a_grid"))
        .collect();
    let grid = match multitype::certify_supercritical(&e.group, &e.law, &pi, &a_values, &spec.n_grid, spec.replicas, pol, caps, ctx.seed(), ctx.threads) {
        Ok(g) => Some(g),
        Err(err) => {
            ctx.fail("multitype grid", err);
            None
        }
    };
    if let Some(grid) = &grid {
        let excluded: u64 = grid.cells.iter().flat_map(|c| c.partial_excluded.iter()).sum();
        if excluded > 0 {
            ctx.cap("multitype", format!("{excluded} partial censuses excluded (census_pop_cap)"));
        }
        let n0_of = |a: f64| grid.n0.iter().find(|(b, _)| *b == a).and_then(|(_, n)| *n);
        let cells: Vec<Value> = grid
            .cells
            .iter()
            .map(|c| {
                let mut v = serde_json::to_value(c).expect("cell");
                v["n0_estimate"] = json!(n0_of(c.a));
                v
            })
            .collect();
        let n0: Vec<Value> = grid.n0.iter().map(|(a, n)| json!({"a": a, "n0": n})).collect();
        ctx.json("certificates.json", "multitype_certificates", &json!({"cells": cells, "n0": n0, "refs": refs}))?;
        let mut w = ctx.csv("multitype_grid.csv", "multitype_grid")?;
        w.write_record(["a", "n", "eigenvalue", "lower", "upper", "verdict", "reducible", "residual", "bound_violations", "partial_excluded"])?;
        for c in &grid.cells {
            w.write_record([
                fmt_f64(c.a),
                c.n.to_string(),
                fmt_f64(c.eigenvalue),
                fmt_f64(c.lower),
                fmt_f64(c.upper),
                verdict_name(c.verdict).into(),
                c.reducible.to_string(),
                fmt_f64(c.residual),
                c.bound_violations.to_string(),
                c.partial_excluded.iter().sum::<u64>().to_string(),
            ])?;
        }
        w.flush()?;
        ctx.plot(
            "plot_multitype.json",
            PlotSpec {
                title: "Perron root of the mean matrix".into(),
                kind: "heatmap".into(),
                data: "multitype_grid.csv".into(),
                x: "a".into(),
                series: vec![series("eigenvalue", "nu(a, n) against n")],
                reference_lines: vec![],
            },
        )?;
    }
    let s = spec.survival.clone();
    if s.enabled {
        if let Some(a) = resolve_speed(ctx, &s.a, refs.as_ref(), "multitype survival") {
            survival_cell(ctx, &pi, a, &s, pol, caps)?;
        }
    }
    Ok(())
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Supercritical => "supercritical",
        Verdict::Subcritical => "subcritical",
        Verdict::Inconclusive => "inconclusive",
    }
}

fn survival_cell(ctx: &mut Ctx, pi: &OffspringLaw, a: f64, s: &SurvivalSpec, pol: ConePolicy, caps: CensusCaps) -> Result<(), ExperimentError> {
    let e = ctx.exp;
    let root = s.root_type - 1;
    let report = match multitype::simulate_multitype_survival(&e.group, &e.law, pi, a, s.n, s.generations, root, s.replicas, e.config.caps.multitype_population_cap, pol, caps, ctx.seed(), ctx.threads) {
        Ok(r) => r,
        Err(err) => {
            ctx.fail("multitype survival", err);
            return Ok(());
        }
    };
    if report.truncated > 0 {
        ctx.cap("multitype", format!("{} survival replicas truncated at multitype_population_cap", report.truncated));
    }
    let oracle = multitype::estimate_mean_matrix(&e.group, &e.law, pi, a, s.n, s.census_replicas, pol, caps, ctx.seed() ^ 0x5eed, ctx.threads);
    let oracle_payload = match oracle {
        Ok(mm) => {
            let q = multitype::extinction_by_generation(&mm.offspring, root, s.generations);
            let predicted = 1.0 - q[(s.generations - 1) as usize];
            let observed = report.survival_frequency(s.generations);
            let rc = mm.replicas[root].max(1) as f64;
            let band = 3.0 * (predicted * (1.0 - predicted) * (1.0 / s.replicas as f64 + 1.0 / rc)).sqrt();
            json!({
                "predicted_survival": predicted,
                "observed_survival": observed,
                "band": band,
                "within_band": (observed - predicted).abs() <= band,
                "extinction_by_generation": q,
                "census_replicas": mm.replicas,
                "mean_matrix": mm.m,
            })
        }
        Err(err) => {
            ctx.fail("survival oracle", err);
            Value::Null
        }
    };
    ctx.json("survival.json", "multitype_survival", &json!({"report": report, "oracle": oracle_payload}))?;
    Ok(())
}

fn run_exit_rate(ctx: &mut Ctx) -> Result<(), ExperimentError> {
    let e = ctx.exp;
    let spec = e.config.exit_rate.clone();
    let stage = ldp_stage(ctx, &[])?;
    let refs = stage.as_ref().map(|s| s.refs);
    let Some(a) = resolve_speed(ctx, &spec.a, refs.as_ref(), "exit-rate a") else {
        return Ok(());
    };
    let mut grid = spec.n_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let z = stats::bonferroni_z(stats::two_sided_tail(spec.sigmas), grid.len());
    let cone = spec.cone.map(|i| (i - 1, policy(spec.strict_cones)));
    let curve = match walk::exit_rate_curve(&e.group, &e.law, a, cone, &grid, spec.replicas, z, ctx.seed(), ctx.threads) {
        Ok(c) => c,
        Err(err) => {
            ctx.fail("exit-rate", err);
            return Ok(());
        }
    };
    let (reference, reference_tag) = match &stage {
        Some(s) => {
            let (i, tag) = s.analysis.rate.eval(a);
            (i / a, Some(tag))
        }
        None => (f64::NAN, None),
    };
    let mut w = ctx.csv("exit_rate.csv", "exit_rate")?;
    w.write_record([
        "n", "deadline", "successes", "trials", "p_hat", "rate", "rate_lo", "rate_hi", "cone_successes", "cone_rate", "cone_rate_lo", "cone_rate_hi", "log_gap", "endpoint_rate", "reference",
    ])?;
    let mut gaps = Vec::new();
    for row in &curve.rows {
        let gap = row.fast_in_cone.as_ref().and_then(|c| {
            (c.successes > 0 && row.fast.successes > 0).then(|| row.fast.p_hat.ln() - c.p_hat.ln())
        });
        gaps.push((row.n, gap));
        let cone = row.fast_in_cone.as_ref();
        w.write_record([
            row.n.to_string(),
            row.deadline.to_string(),
            row.fast.successes.to_string(),
            row.fast.trials.to_string(),
            fmt_f64(row.fast.p_hat),
            fmt_opt(row.fast.rate),
            fmt_f64(row.fast.rate_band.0),
            fmt_f64(row.fast.rate_band.1),
            cone.map_or(String::new(), |c| c.successes.to_string()),
            fmt_opt(cone.and_then(|c| c.rate)),
            cone.map_or(String::new(), |c| fmt_f64(c.rate_band.0)),
            cone.map_or(String::new(), |c| fmt_f64(c.rate_band.1)),
            fmt_opt(gap),
            fmt_opt(row.endpoint.rate),
            fmt_f64(reference),
        ])?;
    }
    w.flush()?;
    let last = curve.rows.last();
    let within_band_at_largest = last.is_some_and(|r| r.fast.rate_band.0 <= reference && reference <= r.fast.rate_band.1);
    let distances: Vec<f64> = curve
        .rows
        .iter()
        .filter_map(|r| r.fast.rate.map(|x| (x - reference).abs()))
        .collect();
    let monotone_approach = distances.len() == curve.rows.len() && distances.windows(2).all(|w| w[1] <= w[0]);
    let known: Vec<(u32, f64)> = gaps.iter().filter_map(|&(n, g)| g.map(|g| (n, g))).collect();
    let gap_slopes: Vec<f64> = known
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 as f64 - w[0].0 as f64))
        .collect();
    let payload = json!({
        "a": a,
        "ell": refs.map(|r| r.ell),
        "reference": io::json_f64(reference),
        "reference_tag": reference_tag,
        "z": z,
        "curve": curve,
        "log_gaps": gaps.iter().map(|&(n, g)| json!({"n": n, "gap": g})).collect::<Vec<_>>(),
        "gap_slopes": gap_slopes,
        "within_band_at_largest": within_band_at_largest,
        "monotone_approach": monotone_approach,
    });
    ctx.json("exit_rate.json", "exit_rate", &payload)?;
    ctx.plot(
        "plot_exit_rate.json",
        PlotSpec {
            title: "Decay rate of P(T_n <= n/a)".into(),
            kind: "line".into(),
            data: "exit_rate.csv".into(),
            x: "n".into(),
            series: vec![series("rate", "unrestricted"), series("cone_rate", "cone-restricted")],
            reference_lines: vec![refline("horizontal", reference, "I(a)/a", None)],
        },
    )?;
    Ok(())
}

/// Markdown summary of a result directory, and the files that were missing or unreadable.
pub fn report(dir: &Path) -> Result<(String, Vec<String>), ExperimentError> {
    let mut problems = Vec::new();
    let manifest = match read_json(dir, MANIFEST) {
        Ok(v) => v,
        Err(msg) => {
            return Err(ExperimentError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{}: {msg}", dir.join(MANIFEST).display()),
            )))
        }
    };
    let mut out = String::new();
    let exp = manifest["experiment"].as_str().unwrap_or("?").to_string();
    out += &format!("# Run report: {exp}\n\n");
    out += &format!("- config digest: `{}`\n", manifest["config_digest"].as_str().unwrap_or("?"));
    out += &format!("- master seed: {}\n", manifest["master_seed"]);
    out += &format!("- code version: {}\n", manifest["code_version"].as_str().unwrap_or("?"));
    out += &format!("- seed scheme: {}\n", manifest["seed_scheme"].as_str().unwrap_or("?"));
    for key in ["caps_hit", "cell_errors", "notices"] {
        let items = manifest[key].as_array().cloned().unwrap_or_default();
        out += &format!("- {}: {}\n", key.replace('_', " "), if items.is_empty() { "none".into() } else { items.len().to_string() });
        for it in items {
            out += &format!("  - {}\n", compact(&it));
        }
    }
    out += "\n";
    let files: Vec<String> = manifest["files"]
        .as_array()
        .map(|a| a.iter().filter_map(|f| f["name"].as_str().map(String::from)).collect())
        .unwrap_or_default();
    if let Some(listed) = manifest["files"].as_array() {
        for f in listed {
            let (Some(name), Some(want)) = (f["name"].as_str(), f["sha256"].as_str()) else {
                continue;
            };
            match fs::read(dir.join(name)) {
                Ok(bytes) if hex(&Sha256::digest(&bytes)) == want => {}
                Ok(_) => problems.push(format!("{name}: digest does not match the manifest")),
                Err(e) => problems.push(format!("{name}: {e}")),
            }
        }
    }
    let mut load = |name: &str| -> Option<Value> {
        match read_json(dir, name) {
            Ok(v) => Some(v),
            Err(msg) => {
                if files.iter().any(|f| f == name) {
                    problems.push(format!("{name}: {msg}"));
                }
                None
            }
        }
    };
    if let Some(v) = load("validation.json") {
        out += "## Validation\n\n";
        out += &format!("rank {}, K = {}, alphas {}\n\n", v["rank"], v["k"], compact(&v["alphas"]));
    }
    if let Some(v) = load("rw_sim.json") {
        out += "## Empirical against exact law of Y_n\n\n| n | replicas | cells | per-cell level | outside | verdict |\n|---|---|---|---|---|---|\n";
        for c in v["comparisons"].as_array().into_iter().flatten() {
            out += &format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                c["n"], c["replicas"], c["cells"], sci(&c["alpha"]), c["cells_outside"], pass(&c["all_inside"])
            );
        }
        out += "\n";
    }
    if let Some(v) = load("rw_exact.json") {
        out += "## Exact laws\n\n| n | support | total mass | mean length |\n|---|---|---|---|\n";
        for d in v["distributions"].as_array().into_iter().flatten() {
            out += &format!("| {} | {} | {} | {} |\n", d["n"], d["support"], num(&d["total_mass"]), num(&d["mean_length"]));
        }
        if v["spectral"].is_object() {
            out += &format!("\nspectral radius: {} in [{}, {}]\n", num(&v["spectral"]["point"]), num(&v["spectral"]["interval"][0]), num(&v["spectral"]["interval"][1]));
        }
        out += "\n";
    }
    if let Some(v) = load("ldp.json") {
        out += "## Rate function\n\n";
        out += &format!(
            "- drift ell = {} (se {})\n- spectral radius r = {} in [{}, {}]\n- I(0) = {}, -log r = {}\n- beta_hat = {}, K = {}\n\n",
            num(&v["drift"]["mean"]), num(&v["drift"]["standard_error"]), num(&v["spectral"]["point"]),
            num(&v["spectral"]["interval"][0]), num(&v["spectral"]["interval"][1]), num(&v["i_at_zero"]),
            num(&v["neg_log_r"]), num(&v["beta_hat"]), num(&v["k"])
        );
        out += "| property | verdict | detail |\n|---|---|---|\n";
        for c in v["properties"]["checks"].as_array().into_iter().flatten() {
            out += &format!("| {} | {} | {} |\n", c["name"].as_str().unwrap_or(""), pass(&c["passed"]), c["detail"].as_str().unwrap_or(""));
        }
        out += "\n";
        let mut sp: Vec<(Value, Value)> = Vec::new();
        if v["speeds"].is_object() {
            sp.push((v["rho"].clone(), v["speeds"].clone()));
        }
        for x in v["extra_speeds"].as_array().into_iter().flatten() {
            sp.push((x["rho"].clone(), x["speeds"].clone()));
        }
        if !sp.is_empty() {
            out += "| rho | v_max | band | case | v_min | band | case |\n|---|---|---|---|---|---|---|\n";
            for (rho, s) in sp {
                out += &format!(
                    "| {} | {} | [{}, {}] | {} | {} | [{}, {}] | {} |\n",
                    num(&rho), num(&s["v_max"]), num(&s["v_max_band"][0]), num(&s["v_max_band"][1]), s["v_max_case"].as_str().unwrap_or(""),
                    num(&s["v_min"]), num(&s["v_min_band"][0]), num(&s["v_min_band"][1]), s["v_min_case"].as_str().unwrap_or("")
                );
            }
            out += "\n";
        }
    }
    if let Some(v) = load("speed.json") {
        out += "## Speed experiment\n\n";
        out += &format!(
            "n = {}, replicas = {}, rho = {}, truncated replicas = {}\n\n| n | replicas | median max/n | median min/n |\n|---|---|---|---|\n",
            v["n"], v["replicas"], num(&v["rho"]), v["truncated_replicas"]
        );
        for c in v["checkpoints"].as_array().into_iter().flatten() {
            out += &format!("| {} | {} | {} | {} |\n", c["n"], c["replicas"], num(&c["median_max_over_n"]), num(&c["median_min_over_n"]));
        }
        let s = &v["speeds"];
        out += &format!(
            "\nv_max = {} [{}, {}] ({}), v_min = {} [{}, {}] ({})\n",
            num(&s["v_max"]), num(&s["v_max_band"][0]), num(&s["v_max_band"][1]), s["v_max_case"].as_str().unwrap_or("?"),
            num(&s["v_min"]), num(&s["v_min_band"][0]), num(&s["v_min_band"][1]), s["v_min_case"].as_str().unwrap_or("?")
        );
        out += &format!(
            "fraction of replicas beyond (v_max + {}) n: {} (many-to-one bound {})\nmin/n medians nonincreasing over checkpoints: {}\n\n",
            num(&v["margin"]), num(&v["fraction_beyond"]), num(&v["markov_bound"]), v["min_medians_nonincreasing"]
        );
    }
    if let Some(v) = load("many_to_one.json") {
        out += "## Many-to-one\n\n| function | n | replicas | mc mean | exact | z |\n|---|---|---|---|---|---|\n";
        for r in v["rows"].as_array().into_iter().flatten() {
            out += &format!("| {} | {} | {} | {} | {} | {} |\n", r["label"].as_str().unwrap_or(""), r["n"], r["replicas"], num(&r["mc_mean"]), num(&r["exact"]), num(&r["z"]));
        }
        out += "\n";
    }
    if let Some(v) = load("certificates.json") {
        out += "## Multitype certificates\n\n| a | n | nu | lower | upper | verdict | reducible | violations |\n|---|---|---|---|---|---|---|---|\n";
        for c in v["cells"].as_array().into_iter().flatten() {
            out += &format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                num(&c["a"]), c["n"], num(&c["eigenvalue"]), num(&c["lower"]), num(&c["upper"]),
                c["verdict"].as_str().unwrap_or(""), c["reducible"], c["bound_violations"]
            );
        }
        out += "\n";
        for x in v["n0"].as_array().into_iter().flatten() {
            out += &format!("- a = {}: n0 = {}\n", num(&x["a"]), if x["n0"].is_null() { "not reached".into() } else { x["n0"].to_string() });
        }
        out += "\n";
    }
    if let Some(v) = load("survival.json") {
        let r = &v["report"];
        let o = &v["oracle"];
        out += "## Multitype survival\n\n";
        out += &format!(
            "a = {}, n = {}, generations = {}, replicas = {}, truncated = {}\nparticles checked: {}, bound violations: {}\nsurvival: observed {}, predicted {} +- {} ({})\n\n",
            num(&r["a"]), r["n"], r["generations"], r["replicas"], r["truncated"], r["particles_checked"], r["bound_violations"],
            num(&o["observed_survival"]), num(&o["predicted_survival"]), num(&o["band"]), pass(&o["within_band"])
        );
    }
    if let Some(v) = load("exit_rate.json") {
        out += &format!("## Exit rate\n\na = {}, reference I(a)/a = {}\n\n| n | rate | band | cone rate | log gap |\n|---|---|---|---|---|\n", num(&v["a"]), num(&v["reference"]));
        let gaps = v["log_gaps"].as_array().cloned().unwrap_or_default();
        for (i, row) in v["curve"]["rows"].as_array().into_iter().flatten().enumerate() {
            out += &format!(
                "| {} | {} | [{}, {}] | {} | {} |\n",
                row["n"], num(&row["fast"]["rate"]), num(&row["fast"]["rate_band"][0]), num(&row["fast"]["rate_band"][1]),
                num(&row["fast_in_cone"]["rate"]), gaps.get(i).map_or("".into(), |g| num(&g["gap"]))
            );
        }
        out += &format!("\nwithin band at largest n: {}, monotone approach: {}\n\n", v["within_band_at_largest"], v["monotone_approach"]);
    }
    if !problems.is_empty() {
        out += "## Missing or unreadable files\n\n";
        for p in &problems {
            out += &format!("- {p}\n");
        }
    }
    Ok((out, problems))
}

fn read_json(dir: &Path, name: &str) -> Result<Value, String> {
    let text = fs::read_to_string(dir.join(name)).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn num(v: &Value) -> String {
    match v {
        Value::Number(n) => n.as_f64().map_or(n.to_string(), |x| format!("{x:.6}")),
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn sci(v: &Value) -> String {
    v.as_f64().map_or("-".into(), |x| format!("{x:.3e}"))
}

fn pass(v: &Value) -> &'static str {
    match v.as_bool() {
        Some(true) => "pass",
        Some(false) => "FAIL",
        None => "-",
    }
}

fn compact(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Object(m) => m
            .iter()
            .map(|(k, x)| format!("{k}: {}", compact(x)))
            .collect::<Vec<_>>()
            .join(", "),
        other => other.to_string(),
    }
}

/// SHA-256 of every result file except the manifest, keyed by name.
pub fn result_digests(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name == MANIFEST || !entry.file_type()?.is_file() {
            continue;
        }
        out.insert(name, hex(&Sha256::digest(fs::read(entry.path())?)));
    }
    Ok(out)
}
