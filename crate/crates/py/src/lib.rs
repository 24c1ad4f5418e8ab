//! Python module `cat_py`: detector inference, dataset access and the CLI commands.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cat_cli::{CliError, RunConfig, SeedTarget};
use cat_core::bench::{closed_form_cat_params as closed_form, count_params};
use cat_core::cat::{response_map, CatConfig, StreamMode};
use cat_core::data::{evaluate_ap, load_dataset, Dataset, SampleSplit, ScoredBox};
use cat_core::detector::{BBox, OneShotDetector};
use cat_core::encoding::{sine_position_encoding, DEFAULT_TEMPERATURE};
use cat_core::numerics::Tensor;
use cat_core::train::{load_checkpoint, save_checkpoint};
use cat_core::CatError;

fn to_py(e: CliError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn core_err(e: CatError) -> PyErr {
    to_py(CliError::Core(e))
}

fn run_config(config_toml: Option<&str>) -> PyResult<RunConfig> {
    match config_toml {
        Some(text) => RunConfig::from_toml(text).map_err(to_py),
        None => Ok(RunConfig::desk()),
    }
}

fn image(data: Vec<f64>, height: usize, width: usize) -> PyResult<Tensor> {
    Tensor::new(vec![3, height, width], data).map_err(core_err)
}

/// A detector built from a TOML run config (the desk config by default).
#[pyclass(name = "Detector")]
struct PyDetector {
    inner: OneShotDetector,
    config: RunConfig,
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (config_toml=None, seed=None))]
    fn new(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut config = run_config(config_toml)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let inner = OneShotDetector::new(config.detector.clone(), config.seed).map_err(core_err)?;
        Ok(PyDetector { inner, config })
    }

    #[getter]
    fn num_params(&self) -> usize {
        count_params(&self.inner).total
    }

    #[getter]
    fn cat_params(&self) -> usize {
        count_params(&self.inner).cat
    }

    fn load(&mut self, path: &str) -> PyResult<()> {
        load_checkpoint(Path::new(path), &mut self.inner, &self.config.train).map_err(core_err)?;
        Ok(())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(Path::new(path), &self.inner, None).map_err(core_err)
    }

    /// Detections as `(x1, y1, x2, y2, score)`; images are flat `3×H×W` lists in `[0, 1]`.
    fn detect(
        &self,
        py: Python<'_>,
        target: Vec<f64>,
        height: usize,
        width: usize,
        query: Vec<f64>,
        query_height: usize,
        query_width: usize,
    ) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
        let t = image(target, height, width)?;
        let q = image(query, query_height, query_width)?;
        let dets = py.allow_threads(|| self.inner.detect(&t, &q)).map_err(core_err)?;
        Ok(dets
            .into_iter()
            .map(|d| (d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score))
            .collect())
    }

    /// Normalized response maps of the CAT input and each layer output.
    fn response_maps(
        &self,
        target: Vec<f64>,
        height: usize,
        width: usize,
        query: Vec<f64>,
        query_height: usize,
        query_width: usize,
    ) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let t = image(target, height, width)?;
        let q = image(query, query_height, query_width)?;
        let trace = self.inner.target_trace(&t, &q).map_err(core_err)?;
        trace
            .iter()
            .map(|f| {
                let m = response_map(f).map_err(core_err)?;
                Ok(m.data().chunks(m.shape()[1]).map(|r| r.to_vec()).collect())
            })
            .collect()
    }
}

/// A loaded, checksum-verified dataset directory.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: load_dataset(Path::new(path)).map_err(core_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    #[pyo3(signature = (split=None))]
    fn ids(&self, split: Option<&str>) -> PyResult<Vec<String>> {
        let split: Option<SampleSplit> = split.map(|s| s.parse()).transpose().map_err(core_err)?;
        Ok(self
            .inner
            .samples
            .iter()
            .filter(|s| split.map_or(true, |sp| s.split == sp))
            .map(|s| s.id.clone())
            .collect())
    }

    /// Sample fields with images as flat `3×H×W` float lists.
    fn sample<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyDict>> {
        let s = self
            .inner
            .samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| PyValueError::new_err(format!("no sample named {id}")))?;
        let d = PyDict::new_bound(py);
        d.set_item("id", &s.id)?;
        d.set_item("split", s.split.name())?;
        d.set_item("query_class", s.query_class)?;
        d.set_item("target", s.target.to_tensor().into_data())?;
        d.set_item("height", s.target.height)?;
        d.set_item("width", s.target.width)?;
        d.set_item("query", s.query.to_tensor().into_data())?;
        d.set_item("query_height", s.query.height)?;
        d.set_item("query_width", s.query.width)?;
        let boxes: Vec<[f64; 4]> = s.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect();
        d.set_item("boxes", boxes)?;
        Ok(d)
    }
}

/// The bundled desk run configuration as TOML text.
#[pyfunction]
fn desk_config() -> String {
    RunConfig::desk().to_toml()
}

#[pyfunction]
#[pyo3(signature = (out, config_toml=None, seed=None, force=false))]
fn gen_data(out: &str, config_toml: Option<&str>, seed: Option<u64>, force: bool) -> PyResult<String> {
    let mut cfg = run_config(config_toml)?;
    let o = cat_cli::Overrides {
        seed,
        ..Default::default()
    };
    o.apply(&mut cfg, SeedTarget::Dataset).map_err(to_py)?;
    Ok(cat_cli::cmd_gen_data(&cfg, Path::new(out), force)
        .map_err(to_py)?
        .manifest_sha256)
}

/// Train and return the mean loss of every epoch.
#[pyfunction]
#[pyo3(signature = (data, out, config_toml=None, seed=None, force=false))]
fn train(
    py: Python<'_>,
    data: &str,
    out: &str,
    config_toml: Option<&str>,
    seed: Option<u64>,
    force: bool,
) -> PyResult<Vec<f64>> {
    let mut cfg = run_config(config_toml)?;
    let o = cat_cli::Overrides {
        seed,
        ..Default::default()
    };
    o.apply(&mut cfg, SeedTarget::Model).map_err(to_py)?;
    let summary = py
        .allow_threads(|| cat_cli::cmd_train(&cfg, Path::new(data), Path::new(out), force, None))
        .map_err(to_py)?;
    Ok(summary.epochs.iter().map(|e| e.loss).collect())
}

/// Run the evaluation protocol; returns `(mean AP, mean AP50)`.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, out, split="unseen", config_toml=None))]
fn evaluate(
    py: Python<'_>,
    checkpoint: &str,
    data: &str,
    out: &str,
    split: &str,
    config_toml: Option<&str>,
) -> PyResult<(f64, f64)> {
    let split: SampleSplit = split.parse().map_err(core_err)?;
    let fallback = config_toml.map(|t| run_config(Some(t))).transpose()?;
    let ckpt = Path::new(checkpoint);
    let cfg = cat_cli::config_for_checkpoint(ckpt, fallback.as_ref()).map_err(to_py)?;
    let s = py
        .allow_threads(|| cat_cli::cmd_eval(&cfg, ckpt, Path::new(data), split, Path::new(out)))
        .map_err(to_py)?;
    Ok((s.report.mean_ap, s.report.mean_ap50))
}

/// AP of `(image, [x1, y1, x2, y2], score)` detections against per-image boxes.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou_threshold=0.5))]
fn average_precision(
    detections: Vec<(usize, [f64; 4], f64)>,
    ground_truth: Vec<Vec<[f64; 4]>>,
    iou_threshold: f64,
) -> PyResult<f64> {
    let bx = |b: [f64; 4]| BBox::new(b[0], b[1], b[2], b[3]);
    let dets: Vec<ScoredBox> = detections
        .into_iter()
        .map(|(image, b, score)| ScoredBox {
            image,
            bbox: bx(b),
            score,
        })
        .collect();
    let gt: Vec<Vec<BBox>> = ground_truth
        .into_iter()
        .map(|v| v.into_iter().map(bx).collect())
        .collect();
    evaluate_ap(&dets, &gt, iou_threshold).map_err(core_err)
}

#[pyfunction]
#[pyo3(signature = (d_model, layers, d_ff, two_stream=true, tie_streams=false, projection_bias=false))]
fn closed_form_cat_params(
    d_model: usize,
    layers: usize,
    d_ff: usize,
    two_stream: bool,
    tie_streams: bool,
    projection_bias: bool,
) -> usize {
    closed_form(&CatConfig {
        d_model,
        layers,
        d_ff,
        mode: if two_stream {
            StreamMode::TwoStream
        } else {
            StreamMode::OneStream
        },
        tie_streams,
        projection_bias,
        ..CatConfig::paper()
    })
}

/// `(height·width) × d_model` sine encoding as nested lists.
#[pyfunction]
fn position_encoding(height: usize, width: usize, d_model: usize) -> PyResult<Vec<Vec<f64>>> {
    let pe = sine_position_encoding(height, width, d_model, DEFAULT_TEMPERATURE).map_err(core_err)?;
    Ok(pe.values.data().chunks(d_model).map(|r| r.to_vec()).collect())
}

#[pymodule]
fn cat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDetector>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(desk_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_cat_params, m)?)?;
    m.add_function(wrap_pyfunction!(position_encoding, m)?)?;
    Ok(())
}
