//! Python bindings: configuration, episodes, mechanisms, a few numeric
//! building blocks and the pipeline stages.

use std::path::PathBuf;

use bidlab_core::align;
use bidlab_core::auction::{self, AllocationRule, EpisodeRecord};
use bidlab_core::bidders::simulate_episode;
use bidlab_core::harness::{self, pipeline, report::summary};
use bidlab_core::ldm::{self, NoiseSchedule};
use bidlab_core::numkit::{Tape, Tensor};
use bidlab_core::Error;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(m) => PyFileNotFoundError::new_err(m),
        Error::Config(_) | Error::Input(_) | Error::Dimension(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Whole-experiment configuration.
#[pyclass(name = "ExperimentConfig", module = "bidlab", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: harness::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => harness::ExperimentConfig::from_toml(t).map_err(err)?,
            None => harness::ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: harness::ExperimentConfig::load(&path).map_err(err)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(err)
    }

    #[getter]
    fn agents(&self) -> usize {
        self.inner.auction.agents
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.auction.horizon
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seeds.base
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(agents={}, horizon={}, seed={})", self.agents(), self.horizon(), self.seed())
    }
}

/// One simulated auction episode.
#[pyclass(name = "Episode", module = "bidlab")]
struct PyEpisode {
    inner: EpisodeRecord,
}

#[pymethods]
impl PyEpisode {
    /// Simulate the configured population for one seed.
    #[staticmethod]
    fn simulate(config: &PyConfig, seed: u64) -> PyResult<Self> {
        let c = &config.inner;
        Ok(Self { inner: simulate_episode(&c.auction, &c.bidders, seed).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(line: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(line).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json_line().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn budgets(&self) -> Vec<f64> {
        self.inner.profiles.iter().map(|p| p.budget).collect()
    }

    #[getter]
    fn cum_cost(&self) -> Vec<f64> {
        self.inner.cum_cost.clone()
    }

    #[getter]
    fn cum_value(&self) -> Vec<f64> {
        self.inner.cum_value.clone()
    }

    /// Re-run the recorded bids through a fresh environment.
    fn replay_matches(&self) -> PyResult<bool> {
        self.inner.replay_matches().map_err(err)
    }

    /// Per-agent and pooled KPIs against the agents' own budgets.
    fn kpis<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = auction::compute_kpis(&self.inner, &self.budgets());
        let text = serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }
}

/// Winners in slot order as `(agent, bid, price)`.
#[pyfunction]
fn allocate_and_price(bids: Vec<(usize, f64)>, slots: usize, rule: &str) -> PyResult<Vec<(usize, f64, f64)>> {
    let rule: AllocationRule = rule.parse().map_err(err)?;
    let placed = auction::allocate_and_price(&bids, slots, rule).map_err(err)?;
    Ok(placed.into_iter().map(|p| (p.agent, p.bid, p.price)).collect())
}

/// Cumulative `ᾱ_n` of the cosine schedule, `n = 0..=steps`.
#[pyfunction]
fn cosine_alpha_bars(steps: usize) -> Vec<f64> {
    NoiseSchedule::cosine(steps).alpha_bars
}

#[pyfunction]
fn q_sample(z0: Vec<f32>, n: usize, noise: Vec<f32>, steps: usize) -> PyResult<Vec<f32>> {
    ldm::q_sample(&NoiseSchedule::cosine(steps), &z0, n, &noise).map_err(err)
}

#[pyfunction]
fn expectile_loss(pred: Vec<f32>, target: Vec<f32>, tau: f64) -> PyResult<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(&[1, pred.len()], pred).map_err(err)?);
    let t = Tensor::new(&[1, target.len()], target).map_err(err)?;
    let l = align::expectile_loss(&mut tape, p, &t, tau).map_err(err)?;
    Ok(tape.scalar(l) as f64)
}

#[pyfunction]
fn keep_count(m: usize, q: f64) -> usize {
    align::keep_count(m, q)
}

fn stage_seed(config: &PyConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(config.inner.seeds.base)
}

#[pyfunction]
#[pyo3(signature = (config, out, seed = None))]
fn gen_data(config: &PyConfig, out: PathBuf, seed: Option<u64>) -> PyResult<(usize, usize)> {
    let (train, held) = pipeline::gen_data(&config.inner, stage_seed(config, seed), &out).map_err(err)?;
    Ok((train.count, held.count))
}

#[pyfunction]
#[pyo3(signature = (config, out, seed = None))]
fn train_graph(config: &PyConfig, out: PathBuf, seed: Option<u64>) -> PyResult<()> {
    pipeline::train_graph(&config.inner, stage_seed(config, seed), &out).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (config, out, seed = None))]
fn train_ldm(config: &PyConfig, out: PathBuf, seed: Option<u64>) -> PyResult<()> {
    pipeline::train_ldm(&config.inner, stage_seed(config, seed), &out).map_err(err)
}

/// Mean fresh-sample score before alignment and after each round.
#[pyfunction]
#[pyo3(name = "align", signature = (config, out, seed = None))]
fn align_stage(config: &PyConfig, out: PathBuf, seed: Option<u64>) -> PyResult<Vec<f64>> {
    Ok(pipeline::align(&config.inner, stage_seed(config, seed), &out).map_err(err)?.fresh_scores)
}

#[pyfunction]
#[pyo3(signature = (config, out, seed = None))]
fn eval_forecast(config: &PyConfig, out: PathBuf, seed: Option<u64>) -> PyResult<String> {
    Ok(summary(&pipeline::eval_forecast(&config.inner, stage_seed(config, seed), &out).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (config, out, seed = None))]
fn eval_kpi(config: &PyConfig, out: PathBuf, seed: Option<u64>) -> PyResult<String> {
    Ok(summary(&pipeline::eval_kpi(&config.inner, stage_seed(config, seed), &out).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (config, out, seed = None))]
fn eval_bid_accuracy(config: &PyConfig, out: PathBuf, seed: Option<u64>) -> PyResult<String> {
    Ok(summary(&pipeline::eval_bid_accuracy(&config.inner, stage_seed(config, seed), &out).map_err(err)?))
}

/// Run the command-line interface with `args` (without the program name).
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    harness::cli_run(std::iter::once("bidlab".to_string()).chain(args))
}

#[pymodule]
fn bidlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEpisode>()?;
    m.add_function(wrap_pyfunction!(allocate_and_price, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(q_sample, m)?)?;
    m.add_function(wrap_pyfunction!(expectile_loss, m)?)?;
    m.add_function(wrap_pyfunction!(keep_count, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_graph, m)?)?;
    m.add_function(wrap_pyfunction!(train_ldm, m)?)?;
    m.add_function(wrap_pyfunction!(align_stage, m)?)?;
    m.add_function(wrap_pyfunction!(eval_forecast, m)?)?;
    m.add_function(wrap_pyfunction!(eval_kpi, m)?)?;
    m.add_function(wrap_pyfunction!(eval_bid_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
