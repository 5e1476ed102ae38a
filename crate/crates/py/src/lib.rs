//! Python bindings: group arithmetic, step laws, exact laws, the rate
//! pipeline, BRW simulation, the Perron certificate and the experiment driver.

use std::collections::BTreeMap;
use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use freebrw_core::brw::{self, OffspringLaw};
use freebrw_core::experiment;
use freebrw_core::group::{self, Word};
use freebrw_core::{ldp, multitype, walk};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (s,))
}

/// Free product of finite groups. Words are token strings such as `"1:1-2:2"`
/// (factor:element, 1-based factors) or `"e"`.
#[pyclass(name = "FreeProduct", module = "freebrw", frozen)]
struct PyFreeProduct {
    inner: group::FreeProduct,
}

impl PyFreeProduct {
    fn parse(&self, s: &str) -> PyResult<Word> {
        self.inner.parse_tokens(s).map_err(err)
    }
}

#[pymethods]
impl PyFreeProduct {
    /// Free product of cyclic groups of the given orders.
    #[new]
    fn new(orders: Vec<usize>) -> PyResult<Self> {
        Ok(PyFreeProduct {
            inner: group::FreeProduct::cyclic(&orders).map_err(err)?,
        })
    }

    /// Factors given as presets such as `"cyclic:3"`.
    #[staticmethod]
    fn from_presets(presets: Vec<String>) -> PyResult<Self> {
        let factors = presets
            .iter()
            .enumerate()
            .map(|(i, p)| group::FactorGroup::preset(i, p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        Ok(PyFreeProduct {
            inner: group::FreeProduct::new(factors).map_err(err)?,
        })
    }

    /// Factors given as `(cayley_table, generators)` pairs.
    #[staticmethod]
    fn from_tables(tables: Vec<(Vec<Vec<usize>>, Vec<usize>)>) -> PyResult<Self> {
        let factors = tables
            .iter()
            .enumerate()
            .map(|(i, (t, gens))| {
                let labels = (0..t.len()).map(|k| if k == 0 { "e".into() } else { format!("g{k}") }).collect();
                group::FactorGroup::from_table(i, labels, t, gens)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        Ok(PyFreeProduct {
            inner: group::FreeProduct::new(factors).map_err(err)?,
        })
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn orders(&self) -> Vec<usize> {
        self.inner.factors().iter().map(|f| f.order()).collect()
    }

    fn multiply(&self, x: &str, y: &str) -> PyResult<String> {
        let w = self.inner.multiply(&self.parse(x)?, &self.parse(y)?).map_err(err)?;
        Ok(self.inner.to_tokens(&w))
    }

    fn inverse(&self, x: &str) -> PyResult<String> {
        let w = self.inner.inverse(&self.parse(x)?).map_err(err)?;
        Ok(self.inner.to_tokens(&w))
    }

    fn length(&self, x: &str) -> PyResult<u32> {
        Ok(self.inner.word_length(&self.parse(x)?))
    }

    fn distance(&self, x: &str, y: &str) -> PyResult<u32> {
        self.inner.distance(&self.parse(x)?, &self.parse(y)?).map_err(err)
    }

    /// 1-based suffix type, `None` at the identity.
    fn suffix_type(&self, x: &str) -> PyResult<Option<usize>> {
        Ok(self.inner.suffix_type(&self.parse(x)?).map(|i| i + 1))
    }

    /// Membership of `y` in the cone of the 1-based factor `i`.
    #[pyo3(signature = (y, i, strict = false))]
    fn in_cone(&self, y: &str, i: usize, strict: bool) -> PyResult<bool> {
        if i == 0 || i > self.inner.rank() {
            return Err(PyValueError::new_err("cone index out of range"));
        }
        let policy = if strict { group::ConePolicy::Strict } else { group::ConePolicy::IdentityAdmitted };
        Ok(self.inner.in_cone_with(&self.parse(y)?, i - 1, policy))
    }

    #[pyo3(signature = (n, cap = 1_000_000))]
    fn ball(&self, n: u32, cap: usize) -> PyResult<Vec<String>> {
        let words = self.inner.ball_enumerate(n, cap).map_err(err)?;
        Ok(words.iter().map(|w| self.inner.to_tokens(w)).collect())
    }

    /// Human-readable form using the factor labels.
    fn display(&self, x: &str) -> PyResult<String> {
        Ok(self.inner.display(&self.parse(x)?))
    }

    fn __repr__(&self) -> String {
        format!("FreeProduct(orders={:?})", self.orders())
    }
}

/// Step law `μ = Σ α_k μ_k`.
#[pyclass(name = "StepLaw", module = "freebrw", frozen)]
struct PyStepLaw {
    inner: walk::StepLaw,
}

#[pymethods]
impl PyStepLaw {
    /// `alphas` and per-factor probability vectors over all elements (index 0 is the identity).
    #[new]
    fn new(g: &PyFreeProduct, alphas: Vec<f64>, factor_laws: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PyStepLaw {
            inner: walk::StepLaw::new(&g.inner, alphas, factor_laws).map_err(err)?,
        })
    }

    /// Simple random walk on the generating sets.
    #[staticmethod]
    fn simple(g: &PyFreeProduct) -> PyResult<Self> {
        Ok(PyStepLaw {
            inner: walk::StepLaw::simple(&g.inner).map_err(err)?,
        })
    }

    #[getter]
    fn k(&self) -> u32 {
        self.inner.k()
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.inner.alphas().to_vec()
    }
}

/// Exact law of `Y_n` as a dict from word tokens to probabilities.
#[pyfunction]
#[pyo3(signature = (g, law, n, cap = 5_000_000))]
fn exact_distribution(g: &PyFreeProduct, law: &PyStepLaw, n: usize, cap: usize) -> PyResult<BTreeMap<String, f64>> {
    let d = walk::exact_distribution(&g.inner, &law.inner, n, cap).map_err(err)?;
    Ok(d.support.iter().map(|(w, &p)| (g.inner.to_tokens(w), p)).collect())
}

#[pyfunction]
#[pyo3(signature = (g, law, n_max = 20, cap = 5_000_000))]
fn spectral_radius<'py>(py: Python<'py>, g: &PyFreeProduct, law: &PyStepLaw, n_max: usize, cap: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &walk::estimate_spectral_radius(&g.inner, &law.inner, n_max, cap).map_err(err)?)
}

/// Legendre transform of samples of `Λ`; returns `(values, tags)`.
#[pyfunction]
fn legendre_transform(t: Vec<f64>, lam: Vec<f64>, x: Vec<f64>, k: f64) -> PyResult<(Vec<f64>, Vec<String>)> {
    let rf = ldp::legendre_transform(&t, &lam, &x, k).map_err(err)?;
    let tags = rf
        .tags
        .iter()
        .map(|t| serde_json::to_value(t).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        .collect();
    Ok((rf.values, tags))
}

/// Full rate pipeline; returns a dict with spectral radius, drift, property
/// checks, `x`, `I`, and, when `rho` is given, the speed solution.
#[pyfunction]
#[pyo3(signature = (g, law, seed = 0, rho = None, mc_replicas = None, threads = None))]
fn analyze_rate<'py>(
    py: Python<'py>,
    g: &PyFreeProduct,
    law: &PyStepLaw,
    seed: u64,
    rho: Option<f64>,
    mc_replicas: Option<usize>,
    threads: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = ldp::RateAnalysisSpec::default();
    if let Some(r) = mc_replicas {
        spec.mc_replicas = r;
    }
    let a = py
        .detach(|| ldp::analyze_rate(&g.inner, &law.inner, &spec, seed, threads))
        .map_err(err)?;
    let speeds = rho
        .map(|rho| ldp::solve_speeds(&a.rate, rho, a.spectral.point))
        .transpose()
        .map_err(err)?;
    let out = serde_json::json!({
        "spectral": a.spectral,
        "drift": a.drift,
        "properties": a.properties,
        "x": a.rate.x_grid,
        "I": a.rate.values.iter().map(|&v| freebrw_core::io::json_f64(v)).collect::<Vec<_>>(),
        "beta_hat": a.rate.beta_hat,
        "ell": a.rate.ell,
        "speeds": speeds,
    });
    to_py(py, &out)
}

/// One BRW replica; returns `(n, population, max_disp, min_disp)` per generation.
#[pyfunction]
#[pyo3(signature = (g, law, pmf, n, seed = 0, replica = 0, pop_cap = 10_000_000))]
fn simulate_brw(
    py: Python<'_>,
    g: &PyFreeProduct,
    law: &PyStepLaw,
    pmf: Vec<f64>,
    n: u32,
    seed: u64,
    replica: u64,
    pop_cap: u64,
) -> PyResult<Vec<(u32, u64, u32, u32)>> {
    let pi = OffspringLaw::new(pmf).map_err(err)?;
    let run = py.detach(|| {
        brw::simulate_brw(&g.inner, &law.inner, &pi, n, pop_cap, brw::root_key(seed, "speed", replica), &Word::identity(), false)
    });
    Ok(run.stats.iter().map(|s| (s.n, s.population, s.max_disp, s.min_disp)).collect())
}

/// Perron root of a nonnegative matrix: `(eigenvalue, left eigenvector, reducible)`.
#[pyfunction]
fn perron_eigenvalue(m: Vec<Vec<f64>>) -> PyResult<(f64, Vec<f64>, bool)> {
    let p = multitype::perron_eigenvalue(&m).map_err(err)?;
    Ok((p.eigenvalue, p.eigenvector, p.reducible))
}

/// Validates a TOML config string; returns the effective config as a dict.
#[pyfunction]
fn validate_config<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let c = experiment::ExperimentConfig::from_toml(text).map_err(err)?;
    let exp = experiment::validate(c).map_err(|v| err(experiment::ExperimentError::Validation(v)))?;
    to_py(py, &exp.config)
}

/// Runs a config file into `out`; returns the exit code (0 ok, 2 partial).
#[pyfunction]
#[pyo3(signature = (config, out, threads = None))]
fn run_experiment(py: Python<'_>, config: &str, out: &str, threads: Option<usize>) -> PyResult<i32> {
    let exp = experiment::load_and_validate(Path::new(config)).map_err(err)?;
    py.detach(|| experiment::run(&exp, Path::new(out), threads))
        .map(|o| o.exit_code)
        .map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pyfunction]
fn report(dir: &str) -> PyResult<String> {
    experiment::report(Path::new(dir))
        .map(|(text, _)| text)
        .map_err(|e| PyIOError::new_err(e.to_string()))
}

#[pymodule]
fn freebrw(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFreeProduct>()?;
    m.add_class::<PyStepLaw>()?;
    m.add_function(wrap_pyfunction!(exact_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_radius, m)?)?;
    m.add_function(wrap_pyfunction!(legendre_transform, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_rate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_brw, m)?)?;
    m.add_function(wrap_pyfunction!(perron_eigenvalue, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
