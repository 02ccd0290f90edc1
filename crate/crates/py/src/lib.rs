//! Python bindings: transforms, tokenization, the model, losses and metrics.
//!
//! Arrays cross the boundary as lists (any sequence of floats is accepted).

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyString};

use wavemoe::data::{impute_and_mask, quality_filter, Verdict};
use wavemoe::evalbench::{self, Fusion};
use wavemoe::model::{self, ModelConfig, ModelWeights};
use wavemoe::ndarray::Array2;
use wavemoe::tokenize::{instance_normalize, tokenize as tokenize_series};
use wavemoe::train::{self, load_checkpoint, prepare_sample};
use wavemoe::wavelet::{build_filter_bank, dwt_multi, idwt_multi, CoefficientPyramid};

create_exception!(wavemoe, WaveMoeError, PyValueError);

fn err(e: wavemoe::Error) -> PyErr {
    WaveMoeError::new_err(e.to_string())
}

type Matrix = Vec<Vec<f64>>;

fn rows<T: Clone>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(WaveMoeError::new_err("ragged matrix"));
    }
    Ok(Array2::from_shape_vec((n, m), rows.concat()).expect("shape checked"))
}

fn full_mask(len: usize, mask: Option<Vec<bool>>) -> Vec<bool> {
    mask.unwrap_or_else(|| vec![true; len])
}

/// Multi-level periodized DWT. Returns `(approx, details)` with details
/// ordered coarsest first.
#[pyfunction]
#[pyo3(signature = (signal, wavelet = "bior2.2", levels = 2))]
fn dwt(signal: Vec<f64>, wavelet: &str, levels: usize) -> PyResult<(Vec<f64>, Matrix)> {
    let bank = build_filter_bank(wavelet).map_err(err)?;
    let p = dwt_multi(&signal, &bank, levels).map_err(err)?;
    Ok((p.approx, p.details))
}

#[pyfunction]
#[pyo3(signature = (approx, details, wavelet = "bior2.2"))]
fn idwt(approx: Vec<f64>, details: Matrix, wavelet: &str) -> PyResult<Vec<f64>> {
    let bank = build_filter_bank(wavelet).map_err(err)?;
    let pyramid = CoefficientPyramid {
        levels: details.len(),
        original_length: approx.len() << details.len(),
        approx,
        details,
    };
    idwt_multi(&pyramid, &bank).map_err(err)
}

/// Instance normalization. Returns `(normalized, mean, std)`.
#[pyfunction]
#[pyo3(signature = (values, mask = None))]
fn normalize(values: Vec<f64>, mask: Option<Vec<bool>>) -> PyResult<(Vec<f64>, f64, f64)> {
    let mask = full_mask(values.len(), mask);
    let (z, stats) = instance_normalize(&values, &mask).map_err(err)?;
    Ok((z, stats.mean, stats.std))
}

/// Time and wavelet patches of an already-normalized series.
#[pyfunction]
#[pyo3(signature = (series, patch_length = 8, mask = None, wavelet = "bior2.2"))]
fn tokenize<'py>(
    py: Python<'py>,
    series: Vec<f64>,
    patch_length: usize,
    mask: Option<Vec<bool>>,
    wavelet: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let bank = build_filter_bank(wavelet).map_err(err)?;
    let mask = full_mask(series.len(), mask);
    let t = tokenize_series(&series, &mask, &bank, patch_length).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("time_patches", rows(&t.time_patches))?;
    d.set_item("wavelet_patches", rows(&t.wavelet_patches))?;
    d.set_item("patch_mask", rows(&t.patch_mask))?;
    Ok(d)
}

/// Masked mean Huber loss over two equally shaped matrices.
#[pyfunction]
#[pyo3(signature = (pred, target, delta = 1.0, mask = None))]
fn huber(pred: Matrix, target: Matrix, delta: f64, mask: Option<Vec<Vec<bool>>>) -> PyResult<f64> {
    let p = matrix(&pred)?;
    let t = matrix(&target)?;
    let m = match mask {
        Some(m) => Array2::from_shape_vec(p.dim(), m.concat())
            .map_err(|_| WaveMoeError::new_err("mask shape differs"))?,
        None => Array2::from_elem(p.dim(), true),
    };
    train::huber(&p, &t, delta, &m).map_err(err)
}

/// `(mse, mae)`.
#[pyfunction]
fn metrics(forecast: Vec<f64>, truth: Vec<f64>) -> PyResult<(f64, f64)> {
    evalbench::metrics(&forecast, &truth).map_err(err)
}

/// `"accept"` or the rejection reason.
#[pyfunction]
fn quality(values: Vec<f64>) -> String {
    match quality_filter(&values) {
        Verdict::Accept => "accept".into(),
        Verdict::Reject(r) => r.to_string(),
    }
}

/// Zero-filled values and the observation mask.
#[pyfunction]
fn impute(values: Vec<f64>) -> (Vec<f64>, Vec<bool>) {
    impute_and_mask(&values)
}

fn json_value(v: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    if v.is_instance_of::<PyBool>() {
        Ok(v.extract::<bool>()?.into())
    } else if v.is_instance_of::<PyInt>() {
        Ok(v.extract::<i64>()?.into())
    } else if v.is_instance_of::<PyFloat>() {
        Ok(v.extract::<f64>()?.into())
    } else if v.is_instance_of::<PyString>() {
        Ok(v.extract::<String>()?.into())
    } else {
        Err(WaveMoeError::new_err(format!("unsupported config value {v}")))
    }
}

/// A model with its configuration and weights.
#[pyclass(module = "wavemoe")]
struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

#[pymethods]
impl Model {
    /// Freshly initialized model from a profile ("tiny" or "full") plus
    /// field overrides.
    #[new]
    #[pyo3(signature = (profile = "tiny", **overrides))]
    fn new(profile: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let base = match profile {
            "tiny" => ModelConfig::tiny(),
            "full" => ModelConfig::full(),
            other => return Err(WaveMoeError::new_err(format!("unknown profile {other:?}"))),
        };
        let mut value = serde_json::to_value(&base).expect("config serializes");
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                value[k.extract::<String>()?] = json_value(&v)?;
            }
        }
        let config: ModelConfig =
            serde_json::from_value(value).map_err(|e| WaveMoeError::new_err(e.to_string()))?;
        config.validate().map_err(err)?;
        let weights = model::init_model(&config).map_err(err)?;
        Ok(Model { config, weights })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, state) = load_checkpoint(&path).map_err(err)?;
        Ok(Model {
            config,
            weights: state.weights,
        })
    }

    /// The configuration as a dict.
    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in serde_json::to_value(&self.config).expect("serializes").as_object().unwrap() {
            match v {
                serde_json::Value::Bool(b) => d.set_item(k, b)?,
                serde_json::Value::Number(n) if n.is_u64() => d.set_item(k, n.as_u64())?,
                serde_json::Value::Number(n) => d.set_item(k, n.as_f64())?,
                serde_json::Value::String(s) => d.set_item(k, s)?,
                other => d.set_item(k, other.to_string())?,
            }
        }
        Ok(d)
    }

    /// `{"total", "activated", "blocks"}` from the closed-form count.
    fn param_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = model::count_params(&self.config);
        let d = PyDict::new(py);
        d.set_item("total", c.total)?;
        d.set_item("activated", c.activated)?;
        d.set_item("blocks", c.blocks)?;
        d.set_item("stored", self.weights.num_params())?;
        Ok(d)
    }

    /// One forward pass over a raw context (normalized internally). Non-finite
    /// values are treated as missing.
    fn forward<'py>(&self, py: Python<'py>, context: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let (values, mask) = impute_and_mask(&context);
        let bank = build_filter_bank(&self.config.wavelet).map_err(err)?;
        let (tokens, targets) =
            prepare_sample(&values, &mask, &bank, self.config.patch_length).map_err(err)?;
        let trace = model::forward(&tokens, &self.weights, &self.config).map_err(err)?;
        let loss = train::joint_loss(&trace, &targets, &self.config, 1.0).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("time_predictions", rows(&trace.time_predictions))?;
        d.set_item("wavelet_predictions", rows(&trace.wavelet_predictions))?;
        d.set_item("next_time_patch", trace.next_time_patch)?;
        d.set_item("next_wavelet_patch", trace.next_wavelet_patch)?;
        let experts: Vec<Vec<Vec<usize>>> = trace
            .router_assignments
            .iter()
            .map(|layer| layer.iter().map(|r| r.experts.clone()).collect())
            .collect();
        let gates: Vec<Vec<Vec<f64>>> = trace
            .router_assignments
            .iter()
            .map(|layer| layer.iter().map(|r| r.gates.clone()).collect())
            .collect();
        d.set_item("experts", experts)?;
        d.set_item("gates", gates)?;
        d.set_item("load_balance_loss", trace.load_balance_loss)?;
        d.set_item("loss", loss.total)?;
        Ok(d)
    }

    /// Autoregressive forecast of `horizon` values after `context`.
    #[pyo3(signature = (context, horizon, fusion = "time"))]
    fn forecast(&self, context: Vec<f64>, horizon: usize, fusion: &str) -> PyResult<Vec<f64>> {
        let fusion: Fusion = fusion.parse().map_err(err)?;
        let f = evalbench::rollout(&self.weights, &self.config, &context, horizon, fusion)
            .map_err(err)?;
        Ok(f.values)
    }
}

#[pymodule]
#[pyo3(name = "wavemoe")]
fn wavemoe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("WaveMoeError", m.py().get_type::<WaveMoeError>())?;
    m.add_function(wrap_pyfunction!(dwt, m)?)?;
    m.add_function(wrap_pyfunction!(idwt, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(huber, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(quality, m)?)?;
    m.add_function(wrap_pyfunction!(impute, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
