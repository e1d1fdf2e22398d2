//! Python bindings: masks, scene generation, peak utilities, metrics and
//! the end-to-end pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use peakseg::classifier::{self, ScoreMap};
use peakseg::config::PipelineConfig;
use peakseg::mask::{self, BinaryMask, Rle};
use peakseg::metrics::{self, EvalImage, EvalOptions, GtMask, PredMask};
use peakseg::pipeline::{Pipeline, Stage};
use peakseg::pseudo;
use peakseg::scenes;
use peakseg::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Prerequisite(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Audit(_) | Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A binary mask on a fixed grid.
#[pyclass(name = "Mask", module = "peakseg", eq, from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyMask {
    inner: BinaryMask,
}

#[pymethods]
impl PyMask {
    /// Empty mask, or one built from `bits` in row-major order.
    #[new]
    #[pyo3(signature = (height, width, bits = None))]
    fn new(height: usize, width: usize, bits: Option<Vec<bool>>) -> PyResult<Self> {
        let inner = match bits {
            Some(b) => BinaryMask::from_bits(height, width, b),
            None => BinaryMask::new(height, width),
        }
        .map_err(py_err)?;
        Ok(PyMask { inner })
    }

    /// From column-major run lengths starting with background.
    #[staticmethod]
    fn from_rle(size: (usize, usize), counts: Vec<u32>) -> PyResult<Self> {
        let rle = Rle {
            size: [size.0, size.1],
            counts,
        };
        Ok(PyMask {
            inner: BinaryMask::from_rle(&rle).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<bool>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("rows have different lengths"));
        }
        Self::new(h, w, Some(rows.into_iter().flatten().collect()))
    }

    /// `(size, counts)`.
    fn to_rle(&self) -> ((usize, usize), Vec<u32>) {
        let r = self.inner.to_rle();
        ((r.size[0], r.size[1]), r.counts)
    }

    fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.inner.height())
            .map(|r| (0..self.inner.width()).map(|c| self.inner.get(r, c)).collect())
            .collect()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn area(&self) -> usize {
        mask::area(&self.inner)
    }

    /// `(row_min, col_min, row_max, col_max)`, inclusive.
    fn bbox(&self) -> PyResult<(usize, usize, usize, usize)> {
        let b = mask::bbox(&self.inner).map_err(py_err)?;
        Ok((b.row_min, b.col_min, b.row_max, b.col_max))
    }

    fn iou(&self, other: &PyMask) -> PyResult<f64> {
        mask::iou(&self.inner, &other.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Mask({}x{}, area={})", self.inner.height(), self.inner.width(), self.inner.area())
    }
}

fn load_config(config_toml: Option<&str>, overrides: Vec<(String, String)>) -> PyResult<PipelineConfig> {
    PipelineConfig::from_toml_with_overrides(config_toml.unwrap_or(""), &overrides).map_err(py_err)
}

/// Renders scene `index`. Returns a dict with `image_id`, `height`, `width`,
/// `image` (RGB bytes, row-major), `labels`, `instances` as
/// `(class_id, Mask)` and `proposals` as `(Mask, objectness)`.
#[pyfunction]
#[pyo3(signature = (index, config_toml = None))]
fn generate_scene<'py>(py: Python<'py>, index: usize, config_toml: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load_config(config_toml, Vec::new())?.scene;
    let rec = scenes::generate_scene(&cfg, index).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("image_id", &rec.image_id)?;
    d.set_item("height", rec.image.height)?;
    d.set_item("width", rec.image.width)?;
    d.set_item("image", PyBytes::new(py, &rec.image.to_rgb8()))?;
    d.set_item("labels", rec.labels.clone())?;
    let instances: Vec<(usize, PyMask)> = rec
        .instances
        .iter()
        .map(|i| (i.class_id, PyMask { inner: i.mask.clone() }))
        .collect();
    d.set_item("instances", instances)?;
    let proposals: Vec<(PyMask, f64)> = rec
        .proposals
        .iter()
        .map(|p| (PyMask { inner: p.mask.clone() }, p.objectness))
        .collect();
    d.set_item("proposals", proposals)?;
    Ok(d)
}

fn score_map(values: Vec<Vec<f64>>) -> PyResult<ScoreMap> {
    let h = values.len();
    let w = values.first().map_or(0, |r| r.len());
    if h == 0 || w == 0 || values.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular grid"));
    }
    Ok(ScoreMap::new(h, w, values.into_iter().flatten().collect()))
}

/// Strict local maxima within an `r`-sided window, highest first.
#[pyfunction]
fn stimulate_peaks(values: Vec<Vec<f64>>, r: usize) -> PyResult<Vec<(usize, usize)>> {
    if r % 2 == 0 {
        return Err(PyValueError::new_err("window size must be odd"));
    }
    Ok(classifier::stimulate_peaks(&score_map(values)?, r))
}

/// Mean value at `peaks`, or the global maximum if `peaks` is empty.
#[pyfunction]
fn peak_score(values: Vec<Vec<f64>>, peaks: Vec<(usize, usize)>) -> PyResult<f64> {
    let map = score_map(values)?;
    if peaks.iter().any(|&(i, j)| i >= map.height || j >= map.width) {
        return Err(PyValueError::new_err("peak outside the map"));
    }
    Ok(classifier::peak_score(&map, &peaks))
}

#[pyfunction]
fn multilabel_loss(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(classifier::multilabel_loss(&scores, &labels))
}

/// Probability of picking each candidate, proportional to objectness.
#[pyfunction]
fn selection_probabilities(objectness: Vec<f64>) -> Vec<f64> {
    pseudo::selection_probabilities(&objectness)
}

type PyGt = (usize, PyMask);
type PyPred = (usize, f64, PyMask);

/// Scores predictions against ground truth. `images` is a list of
/// `(ground_truth, predictions)` pairs, with ground truth as
/// `(class_id, Mask)` and predictions as `(class_id, score, Mask)`.
/// Returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (images, num_classes, score_threshold = 0.5))]
fn evaluate(images: Vec<(Vec<PyGt>, Vec<PyPred>)>, num_classes: usize, score_threshold: f64) -> PyResult<String> {
    let mut area = 0;
    let imgs: Vec<EvalImage> = images
        .into_iter()
        .enumerate()
        .map(|(k, (gts, preds))| {
            if let Some((_, m)) = gts.first() {
                area = m.inner.height() * m.inner.width();
            }
            EvalImage {
                image_id: format!("{k:06}"),
                gts: gts.into_iter().map(|(c, m)| GtMask { class_id: c, mask: m.inner }).collect(),
                preds: preds
                    .into_iter()
                    .map(|(c, s, m)| PredMask {
                        class_id: c,
                        score: s,
                        mask: m.inner,
                    })
                    .collect(),
            }
        })
        .collect();
    let report = metrics::evaluate(
        &imgs,
        &EvalOptions {
            stage: "python",
            split: "-",
            config_hash: "",
            num_classes,
            image_area: area.max(1),
            count_score_threshold: score_threshold,
        },
    )
    .map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    Stage::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown stage `{name}`")))
}

/// Runs pipeline stages (all by default) into `out_dir`. Returns the
/// ground-truth read count of each stage.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml = None, overrides = None, stages = None, allow_stale = false))]
fn run_pipeline(
    out_dir: PathBuf,
    config_toml: Option<&str>,
    overrides: Option<Vec<(String, String)>>,
    stages: Option<Vec<String>>,
    allow_stale: bool,
) -> PyResult<Vec<(String, u64)>> {
    let cfg = load_config(config_toml, overrides.unwrap_or_default())?;
    let stages = match stages {
        Some(names) => names.iter().map(|n| parse_stage(n)).collect::<PyResult<Vec<_>>>()?,
        None => Stage::ALL.to_vec(),
    };
    let mut p = Pipeline::new(cfg, &out_dir, allow_stale);
    for s in stages {
        p.run(s).map_err(py_err)?;
    }
    Ok(p.audit.iter().map(|(s, n)| (s.name().to_string(), *n)).collect())
}

/// The default configuration as TOML text.
#[pyfunction]
fn default_config() -> String {
    PipelineConfig::default().to_toml()
}

#[pymodule]
#[pyo3(name = "peakseg")]
fn peakseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(stimulate_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(peak_score, m)?)?;
    m.add_function(wrap_pyfunction!(multilabel_loss, m)?)?;
    m.add_function(wrap_pyfunction!(selection_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
