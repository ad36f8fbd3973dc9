//! Python bindings. Built as the `muzzle_id` extension module by maturin.

use std::path::PathBuf;

use muzzle_id::compression::{self, codec, QualityLevel};
use muzzle_id::dataset::{self, SplitConfig};
use muzzle_id::experiment::{self, ExperimentConfig};
use muzzle_id::model::HeadSpec;
use muzzle_id::pixels::{self, PixelTensor};
use muzzle_id::{synthetic, training, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Argument(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Decode { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn quality(q: u8) -> PyResult<QualityLevel> {
    QualityLevel::new(q).map_err(to_py)
}

/// Orthonormal 8x8 DCT of a row-major block of 64 samples.
#[pyfunction]
fn block_dct_forward(values: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(compression::block_dct_forward(&values).map_err(to_py)?.to_vec())
}

#[pyfunction]
fn block_dct_inverse(values: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(compression::block_dct_inverse(&values).map_err(to_py)?.to_vec())
}

/// Luma quantization table at quality `q`, row-major.
#[pyfunction]
fn luma_table(q: u8) -> PyResult<Vec<u16>> {
    Ok(compression::QuantizationTable::luma(quality(q)?).entries().to_vec())
}

/// Encodes an image file with the reference codec and returns the stream.
#[pyfunction]
fn compress_image_reference<'py>(py: Python<'py>, path: PathBuf, q: u8) -> PyResult<Bound<'py, PyBytes>> {
    let img = pixels::load_image(&path).map_err(to_py)?;
    let (bytes, _) = codec::compress_image_reference(&img, quality(q)?).map_err(to_py)?;
    Ok(PyBytes::new(py, &bytes))
}

/// Decodes a reference-codec stream to `(width, height, rgb8 bytes)`.
#[pyfunction]
fn decode_reference<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(usize, usize, Bound<'py, PyBytes>)> {
    let img: PixelTensor = codec::decode(data).map_err(to_py)?;
    let rgb = img.to_rgb8();
    Ok((img.width(), img.height(), PyBytes::new(py, rgb.as_raw())))
}

/// PSNR in dB between two image files of equal size; `None` when identical.
#[pyfunction]
fn psnr(a: PathBuf, b: PathBuf) -> PyResult<Option<f64>> {
    let a = pixels::load_rgb8(&a).map_err(to_py)?;
    let b = pixels::load_rgb8(&b).map_err(to_py)?;
    let (sse, n) = compression::corpus::squared_error(&a, &b).map_err(to_py)?;
    Ok(compression::corpus::psnr_from_mse(sse / n as f64))
}

/// Scans a corpus and splits it; returns `(classes, train_paths, test_paths)`.
#[pyfunction]
#[pyo3(signature = (root, train_fraction = 0.7, seed = 0))]
fn split_corpus(root: PathBuf, train_fraction: f64, seed: u64) -> PyResult<(Vec<String>, Vec<PathBuf>, Vec<PathBuf>)> {
    let manifest = dataset::scan_corpus(&root).map_err(to_py)?;
    let cfg = SplitConfig { train_fraction, seed };
    cfg.validate().map_err(to_py)?;
    let split = dataset::stratified_split(&manifest, &cfg).map_err(to_py)?;
    let paths = split.to_paths();
    Ok((manifest.classes().to_vec(), paths.train, paths.test))
}

#[pyfunction]
#[pyo3(signature = (history, patience = 5, min_delta = 0.001))]
fn should_stop(history: Vec<f64>, patience: usize, min_delta: f64) -> bool {
    training::should_stop(&history, patience, min_delta)
}

#[pyfunction]
#[pyo3(signature = (backbone_outputs = 1000, hidden_dim = 256, num_classes = 268))]
fn head_parameter_count(backbone_outputs: usize, hidden_dim: usize, num_classes: usize) -> usize {
    HeadSpec {
        hidden_dim,
        num_classes,
        ..HeadSpec::default()
    }
    .parameter_count(backbone_outputs)
}

#[pyfunction]
#[pyo3(signature = (out, classes = 12, per_class = 20, seed = 0))]
fn write_synthetic_corpus(out: PathBuf, classes: usize, per_class: usize, seed: u64) -> PyResult<()> {
    let spec = synthetic::SyntheticSpec {
        classes,
        images_per_class: per_class,
        seed,
        ..Default::default()
    };
    synthetic::write_corpus(&out, &spec).map_err(to_py)
}

/// Runs the sweep described by a config file and returns the results CSV.
#[pyfunction]
fn run_sweep(py: Python<'_>, config: PathBuf) -> PyResult<String> {
    py.detach(|| {
        let grid = ExperimentConfig::load(&config)?.grid()?;
        let result = experiment::run_grid(&grid)?;
        Ok(experiment::results_csv(&result))
    })
    .map_err(to_py)
}

/// A trained checkpoint answering identification queries.
#[pyclass(module = "muzzle_id")]
struct Identifier {
    inner: experiment::Identifier,
}

#[pymethods]
impl Identifier {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: experiment::Identifier::open(&checkpoint).map_err(to_py)?,
        })
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes().to_vec()
    }

    /// Returns `(top_k, latency_seconds)` with `top_k` as `(class, probability)` pairs.
    #[pyo3(signature = (image, k = 5))]
    fn identify(&self, image: PathBuf, k: usize) -> PyResult<(Vec<(String, f32)>, f64)> {
        let id = self.inner.identify(&image, k).map_err(to_py)?;
        Ok((id.top_k, id.latency_seconds))
    }
}

#[pymodule]
#[pyo3(name = "muzzle_id")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(block_dct_forward, m)?)?;
    m.add_function(wrap_pyfunction!(block_dct_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(luma_table, m)?)?;
    m.add_function(wrap_pyfunction!(compress_image_reference, m)?)?;
    m.add_function(wrap_pyfunction!(decode_reference, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(split_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(should_stop, m)?)?;
    m.add_function(wrap_pyfunction!(head_parameter_count, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_class::<Identifier>()?;
    Ok(())
}
