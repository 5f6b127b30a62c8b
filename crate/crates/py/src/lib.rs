use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use qbnn::bnn::{self, BnnModel};
use qbnn::checkpoint::Checkpoint;
use qbnn::harness::{self, Settings};
use qbnn::quant::{self, LogQuantizer, RangeQuantizer};
use qbnn::uncertainty::{self, EnsembleAccumulator};
use qbnn::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn nested(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn settings(config: Option<PathBuf>, overrides: Option<Vec<String>>) -> PyResult<Settings> {
    Settings::load(config.as_deref(), &overrides.unwrap_or_default()).map_err(py_err)
}

/// Symmetric uniform quantizer with `2^(b-1) - 1` levels per side of zero.
#[pyclass(name = "UniformQuantizer", frozen)]
struct PyUniformQuantizer(quant::UniformQuantizer);

#[pymethods]
impl PyUniformQuantizer {
    #[new]
    fn new(bits: u32, clip: f64) -> PyResult<Self> {
        quant::UniformQuantizer::new(bits, clip).map(Self).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> f64 {
        self.0.step()
    }

    fn levels(&self) -> Vec<f64> {
        self.0.levels()
    }

    fn quantize(&self, values: Vec<f64>) -> Vec<f64> {
        values.into_iter().map(|v| self.0.quantize_value(v)).collect()
    }
}

/// Quantizer on a geometric grid between `lo` and `hi`.
#[pyclass(name = "LogQuantizer", frozen)]
struct PyLogQuantizer(LogQuantizer);

#[pymethods]
impl PyLogQuantizer {
    #[new]
    fn new(bits: u32, lo: f64, hi: f64) -> PyResult<Self> {
        LogQuantizer::new(bits, lo, hi).map(Self).map_err(py_err)
    }

    fn levels(&self) -> Vec<f64> {
        self.0.levels()
    }

    fn max_relative_error(&self) -> f64 {
        self.0.max_relative_error()
    }

    fn quantize(&self, values: Vec<f64>) -> PyResult<Vec<f64>> {
        values
            .into_iter()
            .map(|v| self.0.quantize_value(v).map_err(py_err))
            .collect()
    }
}

/// A mean-field Gaussian network, optionally restored from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel(BnnModel);

#[pymethods]
impl PyModel {
    /// Fresh model with the architecture of the given configuration.
    #[new]
    #[pyo3(signature = (config=None, overrides=None))]
    fn new(config: Option<PathBuf>, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let s = settings(config, overrides)?;
        BnnModel::new(&s.run.model_config(), s.run.sigma_init)
            .map(Self)
            .map_err(py_err)
    }

    /// Restores posterior parameters from `ckpt_svi.bin`.
    #[staticmethod]
    #[pyo3(signature = (path, config=None, overrides=None))]
    fn load(path: PathBuf, config: Option<PathBuf>, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let mut model = Self::new(config, overrides)?;
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        ckpt.apply_to(&mut model.0).map_err(py_err)?;
        Ok(model)
    }

    fn save(&self, path: PathBuf) -> PyResult<String> {
        let ckpt = Checkpoint::from_bnn(&self.0, String::new());
        ckpt.save(&path).map_err(py_err)
    }

    #[getter]
    fn num_weights(&self) -> usize {
        self.0.num_weights()
    }

    fn kl_to_prior(&self) -> PyResult<f64> {
        self.0.kl_to_prior().map_err(py_err)
    }

    /// Per-sample class probabilities, shaped `[samples][inputs][classes]`.
    #[pyo3(signature = (x, samples=30, seed=0))]
    fn predictive(&self, x: Vec<Vec<f64>>, samples: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let ensemble = self.0.predictive_ensemble(&matrix(x)?, samples, seed).map_err(py_err)?;
        Ok(ensemble.iter().map(nested).collect())
    }

    /// `(softmax_entropy, mutual_information, predicted_class)` per input.
    #[pyo3(signature = (x, samples=30, seed=0))]
    fn uncertainty(&self, x: Vec<Vec<f64>>, samples: usize, seed: u64) -> PyResult<Vec<(f64, f64, usize)>> {
        let x = matrix(x)?;
        let ensemble = self.0.predictive_ensemble(&x, samples, seed).map_err(py_err)?;
        let mut acc = EnsembleAccumulator::new(x.rows(), self.0.num_classes());
        for probs in &ensemble {
            acc.push(probs).map_err(py_err)?;
        }
        (0..x.rows())
            .map(|i| {
                Ok((
                    acc.aleatoric(i),
                    acc.mutual_information(i).map_err(py_err)?,
                    acc.predicted(i),
                ))
            })
            .collect()
    }
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> f64 {
    uncertainty::entropy(&p)
}

/// Mutual information of an ensemble given as `[samples][classes]`.
#[pyfunction]
fn mutual_information(ensemble: Vec<Vec<f64>>) -> PyResult<f64> {
    uncertainty::mutual_information(&matrix(ensemble)?).map_err(py_err)
}

#[pyfunction]
fn auroc(negatives: Vec<f64>, positives: Vec<f64>) -> PyResult<f64> {
    uncertainty::auroc(&negatives, &positives).map_err(py_err)
}

#[pyfunction]
fn kl_gaussian(mean: f64, std: f64, prior_std: f64) -> f64 {
    bnn::kl_gaussian(mean, std, prior_std)
}

/// `(sigma, err_uniform, err_log)` rows comparing the two grids at `bits`.
#[pyfunction]
#[pyo3(signature = (bits, sigmas, log_lo=1e-5, log_hi=1.0, uniform_hi=1.0))]
fn relative_error_sweep(
    bits: u32,
    sigmas: Vec<f64>,
    log_lo: f64,
    log_hi: f64,
    uniform_hi: f64,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let uniform = RangeQuantizer::new(bits, uniform_hi).map_err(py_err)?;
    let log = LogQuantizer::new(bits, log_lo, log_hi).map_err(py_err)?;
    let rows = quant::relative_error_sweep(&uniform, &log, &sigmas).map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.sigma, r.err_uniform, r.err_log)).collect())
}

/// Trains one configuration and returns the run directory.
#[pyfunction]
#[pyo3(signature = (out, config=None, overrides=None))]
fn train(py: Python<'_>, out: PathBuf, config: Option<PathBuf>, overrides: Option<Vec<String>>) -> PyResult<PathBuf> {
    let s = settings(config, overrides)?;
    py.detach(|| harness::cmd_train(&s.run, &out, &|_| {}))
        .map(|o| o.run_dir)
        .map_err(py_err)
}

#[pymodule]
fn qbnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyUniformQuantizer>()?;
    m.add_class::<PyLogQuantizer>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(relative_error_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
