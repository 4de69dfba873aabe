// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings: probes, the MAP optimizer and its λ bounds, the toy LM,
//! the baseline steering operations, activation files and text metrics.
//!
//! Vectors cross the boundary as `list[float]`.

use std::path::PathBuf;

use cotsteer::activation_io::{self, ActivationRecord, Label};
use cotsteer::baselines::{self, Hyperplane};
use cotsteer::optimizer::{self, OptimizerConfig};
use cotsteer::{metrics, synth_task, Error, RngStream, Site, Vector};
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::TruncatedRecord(_)
        | Error::TruncatedHeader
        | Error::InvalidEnum { .. } => PyOSError::new_err(e.to_string()),
        Error::DimensionMismatch { .. }
        | Error::InvalidArgument(_)
        | Error::ZeroNorm(_)
        | Error::Empty(_)
        | Error::SingleClass(_)
        | Error::OutOfVocab(_)
        | Error::ContextOverflow { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for cotsteer::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn vector(v: Vec<f64>) -> PyResult<Vector> {
    Vector::new(v).py()
}

fn vectors(vs: Vec<Vec<f64>>) -> PyResult<Vec<Vector>> {
    vs.into_iter().map(vector).collect()
}

fn site(name: &str) -> PyResult<Site> {
    name.parse().py()
}

/// Two-layer MLP probe `σ(w2 · relu(W1 h + b1) + b2)`.
#[pyclass(name = "Probe", module = "cotsteer_py", frozen)]
struct PyProbe(cotsteer::probe::Probe);

#[pymethods]
impl PyProbe {
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden_width = 64, seed = 0))]
    fn random(input_dim: usize, hidden_width: usize, seed: u64) -> PyResult<Self> {
        let mut rng = RngStream::new(seed);
        Ok(Self(cotsteer::probe::Probe::random(input_dim, hidden_width, &mut rng).py()?))
    }

    /// Logistic-linear probe `σ(w·h + bias)`.
    #[staticmethod]
    #[pyo3(signature = (w, bias = 0.0))]
    fn linear(w: Vec<f64>, bias: f64) -> PyResult<Self> {
        Ok(Self(optimizer::linear_probe(&w, bias).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(cotsteer::probe::Probe::load(&path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn hidden_width(&self) -> usize {
        self.0.hidden_width()
    }

    fn forward(&self, h: Vec<f64>) -> PyResult<f64> {
        self.0.forward(&vector(h)?).py()
    }

    /// `∇_h log f(h)`.
    fn input_gradient(&self, h: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.0.input_gradient(&vector(h)?).py()?.into_inner())
    }
}

/// Optimizer settings; keyword arguments override the defaults.
#[pyclass(name = "OptimizerConfig", module = "cotsteer_py", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PyOptimizerConfig {
    alpha0: f64,
    lambda_: f64,
    tau: f64,
    max_iters: usize,
    epsilon: f64,
    noise: bool,
    epsilon_c: f64,
    epsilon_d: f64,
    seed: u64,
}

impl PyOptimizerConfig {
    fn to_core(&self) -> OptimizerConfig {
        OptimizerConfig {
            alpha0: self.alpha0,
            lambda: self.lambda_,
            tau: self.tau,
            max_iters: self.max_iters,
            epsilon: self.epsilon,
            noise_enabled: self.noise,
            epsilon_c: self.epsilon_c,
            epsilon_d: self.epsilon_d,
            seed: self.seed,
            ..OptimizerConfig::default()
        }
    }
}

#[pymethods]
impl PyOptimizerConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let d = OptimizerConfig::default();
        let mut c = Self {
            alpha0: d.alpha0,
            lambda_: d.lambda,
            tau: d.tau,
            max_iters: d.max_iters,
            epsilon: d.epsilon,
            noise: d.noise_enabled,
            epsilon_c: d.epsilon_c,
            epsilon_d: d.epsilon_d,
            seed: d.seed,
        };
        if let Some(kwargs) = kwargs {
            for (k, v) in kwargs.iter() {
                let key: String = k.extract()?;
                match key.as_str() {
                    "alpha0" => c.alpha0 = v.extract()?,
                    "lambda_" | "lam" => c.lambda_ = v.extract()?,
                    "tau" => c.tau = v.extract()?,
                    "max_iters" => c.max_iters = v.extract()?,
                    "epsilon" => c.epsilon = v.extract()?,
                    "noise" => c.noise = v.extract()?,
                    "epsilon_c" => c.epsilon_c = v.extract()?,
                    "epsilon_d" => c.epsilon_d = v.extract()?,
                    "seed" => c.seed = v.extract()?,
                    other => return Err(PyValueError::new_err(format!("unknown optimizer option {other:?}"))),
                }
            }
        }
        c.to_core().validate().py()?;
        Ok(c)
    }

    fn __repr__(&self) -> String {
        format!(
            "OptimizerConfig(alpha0={}, lambda_={}, tau={}, max_iters={}, noise={}, seed={})",
            self.alpha0, self.lambda_, self.tau, self.max_iters, self.noise, self.seed
        )
    }
}

/// Runs the MAP iteration from `h0`. Returns a dict with `h_star`,
/// `converged`, `iterations` and the per-step `trace` (list of dicts).
#[pyfunction]
fn optimize_hidden_state<'py>(
    py: Python<'py>,
    probe: &PyProbe,
    h0: Vec<f64>,
    config: &PyOptimizerConfig,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.to_core();
    let mut rng = RngStream::new(cfg.seed);
    let h0 = vector(h0)?;
    let res = py.detach(|| optimizer::optimize_hidden_state(&probe.0, &h0, &cfg, &mut rng)).py()?;
    let out = PyDict::new(py);
    out.set_item("h_star", res.h_star.into_inner())?;
    out.set_item("converged", res.converged)?;
    out.set_item("iterations", res.iterations_used)?;
    let steps = res
        .trace
        .steps
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("t", s.t)?;
            d.set_item("f", s.f_value)?;
            d.set_item("distance", s.distance_to_h0)?;
            d.set_item("alpha_t", s.step_size)?;
            d.set_item("cosine", s.cosine)?;
            d.set_item("lemma1_upper", s.lemma1_upper)?;
            d.set_item("lemma2_lower", s.lemma2_lower)?;
            d.set_item("in_bounds", s.in_bounds())?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("trace", steps)?;
    Ok(out)
}

/// `∇_h log f(h) − 2λ (h − h0)`.
#[pyfunction]
#[pyo3(name = "objective_gradient")]
fn objective_gradient_py(probe: &PyProbe, h: Vec<f64>, h0: Vec<f64>, lambda_: f64) -> PyResult<Vec<f64>> {
    Ok(optimizer::objective_gradient(&probe.0, &vector(h)?, &vector(h0)?, lambda_)
        .py()?
        .into_inner())
}

/// Upper bound on λ, or `None` when it does not bind.
#[pyfunction]
fn lemma1_upper_bound(displacement: Vec<f64>, grad_star: Vec<f64>, epsilon_c: f64) -> PyResult<Option<f64>> {
    optimizer::lemma1_upper_bound(&vector(displacement)?, &vector(grad_star)?, epsilon_c).py()
}

#[pyfunction]
fn lemma2_lower_bound(h_t: Vec<f64>, h0: Vec<f64>, grad_star: Vec<f64>, c_t: f64, epsilon_d: f64) -> PyResult<f64> {
    optimizer::lemma2_lower_bound(&vector(h_t)?, &vector(h0)?, &vector(grad_star)?, c_t, epsilon_d).py()
}

/// Trained toy transformer over the arithmetic vocabulary.
#[pyclass(name = "ToyModel", module = "cotsteer_py", frozen)]
struct PyToyModel(cotsteer::toy_lm::ToyModel);

#[pymethods]
impl PyToyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(cotsteer::toy_lm::ToyModel::load(&path).py()?))
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.0.n_layers()
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.0.embed_dim()
    }

    fn encode(&self, words: Vec<String>) -> PyResult<Vec<usize>> {
        self.0.vocab().encode(&words).py()
    }

    fn decode(&self, ids: Vec<usize>) -> PyResult<Vec<String>> {
        self.0.vocab().decode(&ids).py()
    }

    fn perplexity(&self, ids: Vec<usize>) -> PyResult<f64> {
        self.0.perplexity(&ids).py()
    }

    #[pyo3(signature = (prompt, max_new = 32))]
    fn greedy(&self, py: Python<'_>, prompt: Vec<usize>, max_new: usize) -> PyResult<Vec<usize>> {
        let eos = self.0.vocab().id(synth_task::EOS).ok();
        py.detach(|| self.0.greedy(&prompt, max_new, eos)).py()
    }

    /// Hidden states at one (layer, site), one row per position.
    fn capture(&self, ids: Vec<usize>, layer: usize, site_name: &str) -> PyResult<Vec<Vec<f64>>> {
        let s = site(site_name)?;
        let (_, cap) = self.0.forward_with_capture(&ids).py()?;
        (0..ids.len())
            .map(|p| {
                cap.get(layer, s, p)
                    .map(|v| v.as_slice().to_vec())
                    .ok_or_else(|| PyValueError::new_err(format!("no state at layer {layer} position {p}")))
            })
            .collect()
    }
}

/// `mean(pos) − mean(neg)`.
#[pyfunction]
fn dim_vector(pos: Vec<Vec<f64>>, neg: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(baselines::dim_vector(&vectors(pos)?, &vectors(neg)?).py()?.direction.into_inner())
}

/// Top principal direction of the paired differences `pos[i] − neg[i]`.
#[pyfunction]
fn pca_vector(pos: Vec<Vec<f64>>, neg: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(baselines::pca_vector(&vectors(pos)?, &vectors(neg)?).py()?.direction.into_inner())
}

#[pyfunction]
fn directional_ablation(h: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(baselines::directional_ablation(&vector(h)?, &vector(v)?).py()?.into_inner())
}

#[pyfunction]
fn svm_project(h: Vec<f64>, normal: Vec<f64>, bias: f64) -> PyResult<Vec<f64>> {
    let plane = Hyperplane::new(vector(normal)?, bias).py()?;
    Ok(baselines::svm_project(&vector(h)?, &plane).py()?.into_inner())
}

/// Reads an activation file as `(model_tag, records)`; each record is a dict
/// with `layer`, `site`, `label`, `position`, `values`.
#[pyfunction]
fn read_records<'py>(py: Python<'py>, path: PathBuf) -> PyResult<(String, Vec<Bound<'py, PyDict>>)> {
    let file = activation_io::read_records(&path).py()?;
    let records = file
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("layer", r.layer)?;
            d.set_item("site", r.site.name())?;
            d.set_item("label", r.label.code())?;
            d.set_item("position", r.position)?;
            d.set_item("values", r.values.clone())?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((file.model_tag, records))
}

fn get<'py>(d: &Bound<'py, PyDict>, k: &str) -> PyResult<Bound<'py, PyAny>> {
    d.get_item(k)?
        .ok_or_else(|| PyValueError::new_err(format!("record missing key {k:?}")))
}

/// Writes dict records (as returned by `read_records`); returns the count.
#[pyfunction]
fn write_records(path: PathBuf, model_tag: &str, records: Vec<Bound<'_, PyDict>>) -> PyResult<usize> {
    let recs = records
        .iter()
        .map(|d| {
            let label: i8 = get(d, "label")?.extract()?;
            let site_name: String = get(d, "site")?.extract()?;
            Ok(ActivationRecord {
                layer: get(d, "layer")?.extract()?,
                site: site(&site_name)?,
                label: Label::from_code(label).ok_or_else(|| PyValueError::new_err(format!("label {label} not in -1, 0, 1")))?,
                position: get(d, "position")?.extract()?,
                values: get(d, "values")?.extract()?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    activation_io::write_records(&path, model_tag, &recs).py()
}

/// Structural summary of an activation file.
#[pyfunction]
fn validate<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let r = activation_io::validate(&path).py()?;
    let d = PyDict::new(py);
    d.set_item("model_tag", r.model_tag)?;
    d.set_item("record_count", r.record_count)?;
    d.set_item("dim", r.dim)?;
    d.set_item("label_histogram", r.label_histogram)?;
    d.set_item("site_counts", r.site_counts)?;
    d.set_item("layer_counts", r.layer_counts)?;
    Ok(d)
}

#[pyfunction]
fn ngram_entropy(tokens: Vec<String>, n: usize) -> PyResult<f64> {
    metrics::ngram_entropy(&tokens, n).py()
}

/// Weighted bigram/trigram entropy.
#[pyfunction]
#[pyo3(signature = (tokens, w2 = metrics::DEFAULT_W2, w3 = metrics::DEFAULT_W3))]
fn fluency(tokens: Vec<String>, w2: f64, w3: f64) -> PyResult<f64> {
    Ok(metrics::fluency(&tokens, w2, w3).py()?.weighted)
}

/// Final numeric token of a generation, if any.
#[pyfunction]
fn extract_answer(tokens: Vec<String>) -> Option<u32> {
    synth_task::extract_answer(&tokens)
}

#[pymodule]
pub fn cotsteer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProbe>()?;
    m.add_class::<PyOptimizerConfig>()?;
    m.add_class::<PyToyModel>()?;
    m.add_function(wrap_pyfunction!(optimize_hidden_state, m)?)?;
    m.add_function(wrap_pyfunction!(objective_gradient_py, m)?)?;
    m.add_function(wrap_pyfunction!(lemma1_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(lemma2_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(dim_vector, m)?)?;
    m.add_function(wrap_pyfunction!(pca_vector, m)?)?;
    m.add_function(wrap_pyfunction!(directional_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(svm_project, m)?)?;
    m.add_function(wrap_pyfunction!(read_records, m)?)?;
    m.add_function(wrap_pyfunction!(write_records, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(ngram_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(fluency, m)?)?;
    m.add_function(wrap_pyfunction!(extract_answer, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
