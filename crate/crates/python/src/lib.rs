//! Python bindings: the quantizers, pruning masks, BOPs accounting, models,
//! datasets and the training loop.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyList, PyString};

use codeq::autodiff::Tape;
use codeq::data::{self, Normalization};
use codeq::metrics::{self, A_BITS};
use codeq::models::{self, ConvSpec, LayerSpec};
use codeq::quantizers::{self, BitMode, ClipGradient};
use codeq::trainer::{self, TrainMode};
use codeq::{pruning, verify, CodeqError};

fn err(e: CodeqError) -> PyErr {
    match e {
        CodeqError::Io { .. } => PyOSError::new_err(e.to_string()),
        CodeqError::Divergence { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => PyFloat::new(py, n.as_f64().unwrap_or(f64::NAN)).into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let items = items.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// `(ŵ, w̄)` of the dead-zone quantizer with step `s` and dead-zone width `d`.
#[pyfunction]
fn deadzone_quantize(w: Vec<f64>, s: f64, d: f64, bits: u32) -> PyResult<(Vec<f64>, Vec<i32>)> {
    let mut t = Tape::new();
    let n = w.len();
    let wn = t.constant(w, &[n]).map_err(err)?;
    let (sn, dn) = (t.scalar(s, false), t.scalar(d, false));
    let out = quantizers::deadzone_quantize(&mut t, wn, sn, dn, bits).map_err(err)?;
    Ok((t.value(out.w_hat).to_vec(), out.w_bar))
}

#[pyfunction]
fn uniform_quantize(w: Vec<f64>, s: f64, bits: u32) -> PyResult<Vec<f64>> {
    let mut t = Tape::new();
    let n = w.len();
    let wn = t.constant(w, &[n]).map_err(err)?;
    let out = quantizers::uniform_quantize(&mut t, wn, s, bits, ClipGradient::Masked).map_err(err)?;
    Ok(t.value(out.w_hat).to_vec())
}

#[pyfunction]
#[pyo3(signature = (range, deadzone, bits, eps = quantizers::DEFAULT_EPSILON))]
fn pruning_aware_scale(range: f64, deadzone: f64, bits: u32, eps: f64) -> PyResult<f64> {
    quantizers::pruning_aware_scale(range, deadzone, bits, eps).map_err(err)
}

#[pyfunction]
fn absmax_recovery_fixed_point(range: f64, bits: u32) -> PyResult<f64> {
    quantizers::absmax_recovery_fixed_point(range, bits).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (values, q = quantizers::DEFAULT_QUANTILE))]
fn quantile_abs(values: Vec<f64>, q: f64) -> PyResult<f64> {
    quantizers::quantile_abs(&values, q).map_err(err)
}

#[pyfunction]
fn qmax(bits: u32) -> PyResult<f64> {
    quantizers::qmax(bits).map_err(err)
}

/// Keep-mask `|w| > tau`.
#[pyfunction]
fn magnitude_mask(w: Vec<f64>, tau: f64) -> PyResult<Vec<bool>> {
    Ok(pruning::magnitude_mask(&w, tau).map_err(err)?.bits)
}

#[pyfunction]
fn sparsity(x: Vec<f64>) -> PyResult<f64> {
    pruning::sparsity(&x).map_err(err)
}

#[pyfunction]
fn equivalence_oracle(w: Vec<f64>, s: f64, d: f64, bits: u32) -> bool {
    pruning::equivalence_oracle(&w, s, d, bits)
}

#[pyfunction]
#[pyo3(signature = (in_features, out_features, density, w_bits, a_bits = A_BITS))]
fn linear_bops(in_features: usize, out_features: usize, density: f64, w_bits: u32, a_bits: u32) -> PyResult<f64> {
    let spec = LayerSpec::Linear {
        in_features,
        out_features,
        has_bias: false,
    };
    metrics::bops_layer(&spec, density, w_bits, a_bits).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (in_channels, out_channels, kernel, out_h, out_w, density, w_bits, a_bits = A_BITS))]
#[allow(clippy::too_many_arguments)]
fn conv_bops(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
    density: f64,
    w_bits: u32,
    a_bits: u32,
) -> PyResult<f64> {
    let spec = LayerSpec::Conv2d(ConvSpec {
        in_channels,
        out_channels,
        kernel_h: kernel,
        kernel_w: kernel,
        stride: 1,
        padding: 0,
        in_h: out_h + kernel - 1,
        in_w: out_w + kernel - 1,
        out_h,
        out_w,
        pool: 1,
        has_bias: false,
    });
    metrics::bops_layer(&spec, density, w_bits, a_bits).map_err(err)
}

/// Run the property suites; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (seed = 0, trials = verify::DEFAULT_TRIALS))]
fn run_verify(py: Python<'_>, seed: u64, trials: usize) -> PyResult<Bound<'_, PyAny>> {
    let report = py.detach(|| verify::run_all(seed, trials)).map_err(err)?;
    let out = to_py(py, &report)?;
    out.set_item("passed", report.passed())?;
    Ok(out)
}

#[pyclass(name = "Dataset", module = "codeq_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, sample_shape, labels, num_classes = None))]
    fn new(features: Vec<f64>, sample_shape: Vec<usize>, labels: Vec<usize>, num_classes: Option<usize>) -> PyResult<Self> {
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        let norm = Normalization::identity(&features);
        let inner = data::Dataset::new(features, sample_shape, labels, classes, norm).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n, dims, classes, spread = 0.1, seed = 0))]
    fn blobs(n: usize, dims: usize, classes: usize, spread: f64, seed: u64) -> PyResult<Self> {
        let inner = data::synthetic_blobs(n, dims, classes, spread, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n, classes = 10, spread = 1.0, seed = 0))]
    fn mnist_like(n: usize, classes: usize, spread: f64, seed: u64) -> PyResult<Self> {
        let inner = data::mnist_like_blobs(n, classes, spread, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        let inner = data::load_idx(images, labels).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        let inner = data::load_csv(path).map_err(err)?;
        Ok(Self { inner })
    }

    /// `(first n, rest)` after a seeded shuffle.
    fn split(&self, n: usize, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = self.inner.split(n, seed).map_err(err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.inner.sample_shape.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn features(&self) -> Vec<f64> {
        self.inner.features.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, sample_shape={:?}, num_classes={})",
            self.inner.len(),
            self.inner.sample_shape,
            self.inner.num_classes
        )
    }
}

#[pyclass(name = "Model", module = "codeq_py", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: models::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden, num_classes, seed = 0))]
    fn mlp(input_dim: usize, hidden: Vec<usize>, num_classes: usize, seed: u64) -> PyResult<Self> {
        let inner = models::build_mlp(input_dim, &hidden, num_classes, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (channels, height, width, num_classes, seed = 0))]
    fn mini_cnn(channels: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> PyResult<Self> {
        let inner = models::build_mini_cnn([channels, height, width], num_classes, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: models::load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        models::save_checkpoint(&self.inner, path).map_err(err)
    }

    /// Quantize every layer at a fixed bit-width.
    #[pyo3(signature = (bits, theta_dz = 3.0, quantile = quantizers::DEFAULT_QUANTILE))]
    fn set_fixed(&mut self, bits: u32, theta_dz: f64, quantile: f64) -> PyResult<()> {
        let state = quantizers::LayerQuantState::fixed(bits, theta_dz).with_quantile(quantile);
        state.validate().map_err(err)?;
        self.inner.set_quant(|_| Some(state.clone()));
        Ok(())
    }

    #[pyo3(signature = (theta_bit = 3.0, theta_dz = 3.0, b_min = 2, b_max = 8))]
    fn set_mixed(&mut self, theta_bit: f64, theta_dz: f64, b_min: u32, b_max: u32) -> PyResult<()> {
        let state = quantizers::LayerQuantState::mixed(theta_bit, theta_dz, b_min, b_max);
        state.validate().map_err(err)?;
        self.inner.set_quant(|_| Some(state.clone()));
        Ok(())
    }

    fn clear_quant(&mut self) {
        self.inner.set_quant(|_| None);
    }

    /// Per-layer `(theta_dz, bits)`; `None` for unquantized layers.
    fn quant_states(&self) -> Vec<Option<(f64, u32, Option<f64>)>> {
        self.inner
            .layers
            .iter()
            .map(|l| {
                l.quant.as_ref().map(|q| {
                    let tb = match q.bits {
                        BitMode::Learned { theta_bit } => Some(theta_bit),
                        BitMode::Fixed(_) => None,
                    };
                    (q.theta_dz, q.effective_bits(), tb)
                })
            })
            .collect()
    }

    fn weights(&self, layer: usize) -> PyResult<Vec<f64>> {
        self.inner
            .layers
            .get(layer)
            .map(|l| l.weight.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no layer {layer}")))
    }

    /// Reconstructed weights of one layer as the compressed forward pass sees them.
    fn quantized_weights(&self, layer: usize) -> PyResult<Vec<f64>> {
        let mut all = self.inner.quantized_weights().map_err(err)?;
        if layer >= all.len() {
            return Err(PyValueError::new_err(format!("no layer {layer}")));
        }
        Ok(all.swap_remove(layer).0)
    }

    /// Flat logits `[n, classes]`.
    #[pyo3(signature = (features, n, quantized = true))]
    fn predict(&self, features: Vec<f64>, n: usize, quantized: bool) -> PyResult<Vec<f64>> {
        let mode = if quantized {
            models::ForwardMode::Codeq
        } else {
            models::ForwardMode::Fp32
        };
        self.inner.forward(&features, n, mode).map_err(err)
    }

    #[pyo3(signature = (accuracy = None))]
    fn report<'py>(&self, py: Python<'py>, accuracy: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
        let r = metrics::build_report(&self.inner, accuracy).map_err(err)?;
        to_py(py, &r)
    }

    fn materialize(&self) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::materialize(&self.inner).map_err(err)?,
        })
    }

    #[getter]
    fn num_weights(&self) -> usize {
        self.inner.num_weights()
    }

    fn __repr__(&self) -> String {
        self.inner.summary()
    }
}

fn parse_mode(mode: &str, bits: u32) -> PyResult<TrainMode> {
    match mode {
        "fixed" => Ok(TrainMode::FixedBit(bits)),
        "mixed" => Ok(TrainMode::MixedPrecision),
        "fp32" => Ok(TrainMode::Fp32),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?} (expected fixed, mixed or fp32)"))),
    }
}

/// Train `model` in place and return the per-epoch history as a list of dicts.
#[pyfunction]
#[pyo3(signature = (
    model, train_set, val_set = None, *, mode = "fixed", bits = 4, epochs = 10, batch_size = 64,
    lambda_dz = 0.01, lambda_bit = 0.0, lambda_w = 0.0, lr_weights = 0.05, lr_theta = 1e-3,
    momentum = 0.9, init_theta = 3.0, seed = 0, cosine = true
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    mut model: PyRefMut<'py, PyModel>,
    train_set: PyRef<'py, PyDataset>,
    val_set: Option<PyRef<'py, PyDataset>>,
    mode: &str,
    bits: u32,
    epochs: usize,
    batch_size: usize,
    lambda_dz: f64,
    lambda_bit: f64,
    lambda_w: f64,
    lr_weights: f64,
    lr_theta: f64,
    momentum: f64,
    init_theta: f64,
    seed: u64,
    cosine: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = trainer::TrainConfig {
        lambda_dz,
        lambda_bit,
        lambda_w,
        lr_weights,
        lr_theta,
        momentum,
        epochs,
        batch_size,
        seed,
        mode: parse_mode(mode, bits)?,
        init_theta,
        cosine,
        ..trainer::TrainConfig::default()
    };
    let train_data = train_set.inner.clone();
    let val_data = val_set.map(|v| v.inner.clone());
    let mut inner = model.inner.clone();
    let history = py
        .detach(|| trainer::train(&mut inner, &train_data, val_data.as_ref(), &cfg))
        .map_err(err)?;
    model.inner = inner;
    to_py(py, &history.epochs)
}

#[pyfunction]
#[pyo3(signature = (model, dataset, batch_size = 256))]
fn evaluate(model: PyRef<'_, PyModel>, dataset: PyRef<'_, PyDataset>, batch_size: usize) -> PyResult<f64> {
    trainer::evaluate(&model.inner, &dataset.inner, batch_size).map_err(err)
}

#[pymodule]
pub fn codeq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(deadzone_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(pruning_aware_scale, m)?)?;
    m.add_function(wrap_pyfunction!(absmax_recovery_fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_abs, m)?)?;
    m.add_function(wrap_pyfunction!(qmax, m)?)?;
    m.add_function(wrap_pyfunction!(magnitude_mask, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(equivalence_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(linear_bops, m)?)?;
    m.add_function(wrap_pyfunction!(conv_bops, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add("A_BITS", A_BITS)?;
    Ok(())
}
