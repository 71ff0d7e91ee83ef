//! Python bindings: landscapes, the mask-source flow, the linear denoiser and
//! full active-generation runs.

use afm_core::denoiser::{Denoiser, SoftmaxDenoiser};
use afm_core::dynamics::{generate, SamplerConfig};
use afm_core::error::AfmError;
use afm_core::flow_path::{sample_conditional_path, Scheduler, Sequence, SourceDistribution, Token, Vocab};
use afm_core::harness::{self, RunConfig};
use afm_core::landscape::{make_landscape, LandscapeParams, MotifLandscape};
use afm_core::rng::{from_seed, Rng};
use afm_core::verify;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: AfmError) -> PyErr {
    match e {
        AfmError::Io(_) | AfmError::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn scheduler(name: &str) -> PyResult<Scheduler> {
    match name {
        "linear" => Ok(Scheduler::Linear),
        "quadratic" => Ok(Scheduler::Quadratic),
        _ => Err(PyValueError::new_err(format!("unknown scheduler {name:?}"))),
    }
}

fn seq(tokens: Vec<Token>) -> Sequence {
    Sequence(tokens)
}

/// κ(t) and κ̇(t) for the named scheduler.
#[pyfunction]
#[pyo3(signature = (t, scheduler_name = "linear"))]
fn kappa(t: f64, scheduler_name: &str) -> PyResult<(f64, f64)> {
    scheduler(scheduler_name)?.kappa(t).map_err(to_py)
}

/// Draws x_t on the convex path between `x0` and `x1`.
#[pyfunction]
#[pyo3(signature = (x0, x1, t, seed, scheduler_name = "linear"))]
fn conditional_path(x0: Vec<Token>, x1: Vec<Token>, t: f64, seed: u64, scheduler_name: &str) -> PyResult<Vec<Token>> {
    let mut rng = from_seed(seed);
    let x = sample_conditional_path(&seq(x0), &seq(x1), t, scheduler(scheduler_name)?, &mut rng).map_err(to_py)?;
    Ok(x.0)
}

#[pyclass(name = "Landscape", module = "afm")]
struct PyLandscape {
    inner: MotifLandscape,
}

#[pymethods]
impl PyLandscape {
    #[new]
    #[pyo3(signature = (len = 12, vocab_size = 8, motif_count = 3, motif_length = 4, quantization = 4, banned_per_token = 1, seed = 0))]
    fn new(
        len: usize,
        vocab_size: usize,
        motif_count: usize,
        motif_length: usize,
        quantization: usize,
        banned_per_token: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let params = LandscapeParams { len, vocab_size, motif_count, motif_length, quantization, banned_per_token, seed };
        Ok(Self { inner: make_landscape(&params).map_err(to_py)? })
    }

    #[getter]
    fn len(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn optimum(&self) -> Vec<Token> {
        self.inner.optimum.0.clone()
    }

    fn evaluate(&self, x: Vec<Token>) -> PyResult<f64> {
        self.inner.evaluate(&seq(x)).map_err(to_py)
    }

    fn is_feasible(&self, x: Vec<Token>) -> bool {
        self.inner.is_feasible(&seq(x))
    }

    /// `n` distinct feasible sequences drawn uniformly.
    fn valid_pool(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<Token>>> {
        let mut rng = from_seed(seed);
        let pool = self.inner.valid_pool(n, &mut rng).map_err(to_py)?;
        Ok(pool.into_iter().map(|s| s.0).collect())
    }
}

/// Linear softmax denoiser over a mask-source vocabulary.
#[pyclass(name = "Denoiser", module = "afm")]
struct PyDenoiser {
    inner: SoftmaxDenoiser,
    rng: Rng,
}

#[pymethods]
impl PyDenoiser {
    #[new]
    #[pyo3(signature = (vocab_size, len, scheduler_name = "linear", seed = 0))]
    fn new(vocab_size: usize, len: usize, scheduler_name: &str, seed: u64) -> PyResult<Self> {
        let vocab = Vocab::with_mask(vocab_size).map_err(to_py)?;
        let inner = SoftmaxDenoiser::zeros(vocab, len, scheduler(scheduler_name)?, true);
        Ok(Self { inner, rng: from_seed(seed) })
    }

    #[getter]
    fn mask_token(&self) -> Option<Token> {
        self.inner.vocab().mask()
    }

    /// Posterior rows, one list of `vocab_size` probabilities per position.
    fn predict(&self, x_t: Vec<Token>, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let post = self.inner.predict(&seq(x_t), t).map_err(to_py)?;
        Ok(post.rows().map(<[f64]>::to_vec).collect())
    }

    /// One gradient step of cross-entropy on clean sequences; returns the loss.
    fn fit_step(&mut self, data: Vec<Vec<Token>>, learning_rate: f64) -> PyResult<f64> {
        let pool: Vec<Sequence> = data.into_iter().map(seq).collect();
        let source = SourceDistribution::mask(self.inner.vocab()).map_err(to_py)?;
        let losses = harness::pretrain(&mut self.inner, &pool, 1, learning_rate, pool.len(), &source, &mut self.rng)
            .map_err(to_py)?;
        Ok(losses[0])
    }

    #[pyo3(signature = (n, steps = 16))]
    fn sample(&mut self, n: usize, steps: usize) -> PyResult<Vec<Vec<Token>>> {
        let source = SourceDistribution::mask(self.inner.vocab()).map_err(to_py)?;
        let mut config = SamplerConfig::new(steps, self.inner.scheduler());
        config.force_terminal_unmask = true;
        (0..n)
            .map(|_| generate(&self.inner, &source, &config, &mut self.rng).map(|s| s.0).map_err(to_py))
            .collect()
    }
}

fn load_config(toml: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut config = match toml {
        Some(text) => RunConfig::from_toml_str(text).map_err(to_py)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.output_dir = None;
    config.validate().map_err(to_py)?;
    Ok(config)
}

fn records<'py>(py: Python<'py>, out: &harness::RunOutput) -> PyResult<Vec<Bound<'py, PyDict>>> {
    out.records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("round", r.round)?;
            d.set_item("tau", r.tau)?;
            d.set_item("best_y", r.best_y)?;
            d.set_item("best_f", r.best_f)?;
            d.set_item("regret", r.regret)?;
            d.set_item("ess_mean", r.ess_mean)?;
            d.set_item("fallback", r.fallback)?;
            let batch: Vec<(Vec<Token>, f64)> = r.batch.iter().map(|(x, y)| (x.0.clone(), *y)).collect();
            d.set_item("batch", batch)?;
            Ok(d)
        })
        .collect()
}

/// Runs active generation in memory and returns one dict per round.
#[pyfunction]
#[pyo3(signature = (config_toml = None, seed = None))]
fn run<'py>(py: Python<'py>, config_toml: Option<&str>, seed: Option<u64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let config = load_config(config_toml, seed)?;
    let out = py.detach(|| harness::run(&config)).map_err(to_py)?;
    records(py, &out)
}

/// The same loop with uniformly drawn valid batches.
#[pyfunction]
#[pyo3(signature = (config_toml = None, seed = None))]
fn baseline<'py>(py: Python<'py>, config_toml: Option<&str>, seed: Option<u64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let config = load_config(config_toml, seed)?;
    let out = py.detach(|| harness::baseline_random(&config)).map_err(to_py)?;
    records(py, &out)
}

/// Internal consistency checks as (name, passed, detail) triples.
#[pyfunction]
fn verify_all(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(verify::run_all).into_iter().map(|c| (c.name.to_string(), c.pass, c.detail)).collect()
}

#[pymodule]
fn afm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLandscape>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_function(wrap_pyfunction!(kappa, m)?)?;
    m.add_function(wrap_pyfunction!(conditional_path, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(verify_all, m)?)?;
    Ok(())
}
