//! Python bindings: boxes and overlap, scene generation, the detector,
//! training, inference, evaluation and weight files.
//!
//! Images cross the boundary as flat `float` lists in channel-major order
//! (`3 * size * size` values in [0, 1]).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use textdet::detector::{self as det, DetectorConfig};
use textdet::geometry::{self as geo, Detection, IouMode};
use textdet::params::ModelParams;
use textdet::tensor::{Shape, Tensor};
use textdet::toolkit::{self, GenConfig, SceneSample};

fn py_err(e: textdet::Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for textdet::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Oriented rectangle: centre, width, height and rotation in radians.
#[pyclass(module = "textdet_py", name = "OrientedBox", from_py_object)]
#[derive(Clone, Copy)]
struct PyBox(geo::OrientedBox);

#[pymethods]
impl PyBox {
    #[new]
    #[pyo3(signature = (cx, cy, w, h, theta = 0.0))]
    fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> PyResult<Self> {
        geo::OrientedBox::new(cx, cy, w, h, theta).py().map(PyBox)
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx
    }
    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy
    }
    #[getter]
    fn w(&self) -> f64 {
        self.0.w
    }
    #[getter]
    fn h(&self) -> f64 {
        self.0.h
    }
    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn corners(&self) -> Vec<(f64, f64)> {
        self.0.corners().to_vec()
    }

    fn __repr__(&self) -> String {
        let b = self.0;
        format!(
            "OrientedBox(cx={}, cy={}, w={}, h={}, theta={})",
            b.cx, b.cy, b.w, b.h, b.theta
        )
    }
}

/// Intersection over union; `rotated=False` compares enclosing rectangles.
#[pyfunction]
#[pyo3(signature = (a, b, rotated = true))]
fn iou(a: PyBox, b: PyBox, rotated: bool) -> PyResult<f64> {
    let mode = if rotated { IouMode::Rotated } else { IouMode::Enclosing };
    geo::iou(&a.0, &b.0, mode).py()
}

fn detections(boxes: &[PyBox], scores: &[f64]) -> PyResult<Vec<Detection>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    boxes
        .iter()
        .zip(scores)
        .map(|(b, &s)| Detection::new(b.0, s).py())
        .collect()
}

/// Non-maximum suppression on rotated overlap; returns kept `(box, score)` pairs.
#[pyfunction]
fn nms(boxes: Vec<PyBox>, scores: Vec<f64>, threshold: f64) -> PyResult<Vec<(PyBox, f64)>> {
    let dets = detections(&boxes, &scores)?;
    Ok(geo::nms(&dets, threshold)
        .into_iter()
        .map(|d| (PyBox(d.bbox), d.score))
        .collect())
}

/// Regression targets `(tx, ty, tw, th, ttheta)` of `gt` relative to `anchor`.
#[pyfunction]
fn encode_offsets(gt: PyBox, anchor: PyBox) -> PyResult<[f64; 5]> {
    Ok(geo::encode_offsets(&gt.0, &anchor.0).py()?.to_array())
}

#[pyfunction]
fn decode_offsets(offsets: [f64; 5], anchor: PyBox) -> PyBox {
    PyBox(geo::decode_offsets(&geo::BoxOffsets::from_array(offsets), &anchor.0))
}

/// A synthetic image with its word boxes and text mask.
#[pyclass(module = "textdet_py", name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene(SceneSample);

#[pymethods]
impl PyScene {
    #[getter]
    fn size(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn boxes(&self) -> Vec<PyBox> {
        self.0.boxes.iter().copied().map(PyBox).collect()
    }

    /// Flat channel-major RGB values.
    fn image(&self) -> Vec<f32> {
        self.0.image.data().to_vec()
    }

    /// Flat row-major 0/1 text mask.
    fn mask(&self) -> Vec<f32> {
        self.0.mask.data().to_vec()
    }
}

#[pyfunction]
#[pyo3(signature = (seed, size = 128, max_words = 4, max_rotation = 0.0))]
fn generate_scene(seed: u64, size: usize, max_words: usize, max_rotation: f64) -> PyResult<PyScene> {
    let cfg = GenConfig {
        size,
        max_words,
        max_rotation,
        ..GenConfig::default()
    };
    toolkit::generate_scene(seed, &cfg).py().map(PyScene)
}

/// Writes scenes as a dataset directory (images, box files, masks).
#[pyfunction]
fn write_dataset(dir: PathBuf, scenes: Vec<PyScene>) -> PyResult<()> {
    let samples: Vec<SceneSample> = scenes.into_iter().map(|s| s.0).collect();
    toolkit::write_dataset(&dir, &samples).py()
}

#[pyfunction]
fn read_dataset(dir: PathBuf) -> PyResult<Vec<PyScene>> {
    Ok(toolkit::read_dataset(&dir).py()?.into_iter().map(PyScene).collect())
}

/// Model parameters (32-bit).
#[pyclass(module = "textdet_py", name = "Params", from_py_object)]
#[derive(Clone)]
struct PyParams(ModelParams<f32>);

#[pymethods]
impl PyParams {
    fn names(&self) -> Vec<String> {
        self.0.names().map(str::to_owned).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn element_count(&self) -> usize {
        self.0.element_count()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        toolkit::save_weights(&self.0, path).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        toolkit::load_weights(path).py().map(PyParams)
    }

    fn __eq__(&self, other: &PyParams) -> bool {
        self.0.iter().eq(other.0.iter())
    }
}

fn load_config(config: &str) -> PyResult<DetectorConfig> {
    match config {
        "desk" => Ok(DetectorConfig::desk()),
        "full_scale" => Ok(DetectorConfig::full_scale()),
        path => DetectorConfig::load(std::path::Path::new(path)).py(),
    }
}

/// The detector for a configuration: `"desk"`, `"full_scale"` or a TOML path.
#[pyclass(module = "textdet_py", name = "Detector", from_py_object)]
#[derive(Clone)]
struct PyDetector(det::Detector);

impl PyDetector {
    fn image(&self, values: Vec<f32>) -> PyResult<Tensor<f32>> {
        let s = self.0.input_size();
        Tensor::from_vec(Shape::new(1, 3, s, s), values).py()
    }
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (config = "desk", attention = None))]
    fn new(config: &str, attention: Option<bool>) -> PyResult<Self> {
        let mut cfg = load_config(config)?;
        if let Some(a) = attention {
            cfg.attention.enabled = a;
        }
        det::Detector::new(cfg).py().map(PyDetector)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.0.input_size()
    }

    #[getter]
    fn has_attention(&self) -> bool {
        self.0.has_attention()
    }

    fn anchor_count(&self) -> usize {
        self.0.anchors().len()
    }

    /// The default-box dump (`summary=True` keeps only the per-layer headers).
    #[pyo3(signature = (summary = true))]
    fn anchors(&self, summary: bool) -> String {
        self.0.anchors().dump(summary)
    }

    fn init_params(&self, seed: u64) -> PyResult<PyParams> {
        self.0.init_params(seed).py().map(PyParams)
    }

    fn zero_params(&self) -> PyResult<PyParams> {
        self.0.zero_params().py().map(PyParams)
    }

    /// Detections of one image as `(box, score)` pairs.
    #[pyo3(signature = (image, params, conf = None, nms = None))]
    fn detect(
        &self,
        image: Vec<f32>,
        params: &PyParams,
        conf: Option<f64>,
        nms: Option<f64>,
    ) -> PyResult<Vec<(PyBox, f64)>> {
        let img = self.image(image)?;
        let mut inf = self.0.config().inference;
        inf.conf_threshold = conf.unwrap_or(inf.conf_threshold);
        inf.nms_threshold = nms.unwrap_or(inf.nms_threshold);
        let dets = det::detect(&self.0, &[&img], &params.0, &inf).py()?;
        Ok(dets[0].iter().map(|d| (PyBox(d.bbox), d.score)).collect())
    }

    /// Text probability map of one image at input resolution, row-major.
    fn attention_map(&self, image: Vec<f32>, params: &PyParams) -> PyResult<Vec<f32>> {
        let img = self.image(image)?;
        let out = self.0.forward(&[&img], &params.0).py()?;
        out.attention
            .map(|m| m.alpha_pos.data().to_vec())
            .ok_or_else(|| PyValueError::new_err("attention is disabled in this configuration"))
    }
}

/// SGD training state for a detector.
#[pyclass(module = "textdet_py", name = "Trainer")]
struct PyTrainer(det::Trainer);

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (detector, seed = 0, augment = true))]
    fn new(detector: &PyDetector, seed: u64, augment: bool) -> PyResult<Self> {
        let mut cfg = detector.0.config().clone();
        cfg.augment.enabled = augment;
        let d = det::Detector::new(cfg).py()?;
        det::Trainer::new(d, seed).py().map(PyTrainer)
    }

    #[getter]
    fn step(&self) -> usize {
        self.0.step()
    }

    /// Runs `steps` updates on batches drawn from `scenes`; returns each total loss.
    fn train(&mut self, scenes: Vec<PyScene>, steps: usize) -> PyResult<Vec<f64>> {
        let data: Vec<SceneSample> = scenes.into_iter().map(|s| s.0).collect();
        (0..steps)
            .map(|_| self.0.train_on(&data).py().map(|r| r.loss.total))
            .collect()
    }

    fn params(&self) -> PyParams {
        PyParams(self.0.params().clone())
    }
}

/// Precision, recall and F-measure of per-image `(box, score)` lists
/// against per-image ground-truth boxes.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou = 0.5, rotated = true))]
fn evaluate(
    detections: Vec<Vec<(PyBox, f64)>>,
    ground_truth: Vec<Vec<PyBox>>,
    iou: f64,
    rotated: bool,
) -> PyResult<(f64, f64, f64)> {
    let dets = detections
        .into_iter()
        .map(|v| {
            v.into_iter()
                .map(|(b, s)| Detection::new(b.0, s).py())
                .collect::<PyResult<Vec<_>>>()
        })
        .collect::<PyResult<Vec<_>>>()?;
    let gts: Vec<Vec<geo::OrientedBox>> = ground_truth
        .into_iter()
        .map(|v| v.into_iter().map(|b| b.0).collect())
        .collect();
    let mode = if rotated { IouMode::Rotated } else { IouMode::Enclosing };
    let r = toolkit::evaluate_detections(&dets, &gts, iou, mode).py()?;
    Ok((r.precision, r.recall, r.f_measure))
}

#[pymodule]
fn textdet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(encode_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(decode_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
