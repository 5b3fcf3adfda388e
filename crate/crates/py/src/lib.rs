//! Python bindings: masks, connectivity cubes, the model, fusion and metrics.

use std::path::PathBuf;

use ::connseg::checkpoint::{load_model, save_model};
use ::connseg::codec::{self, ConnectivityCube};
use ::connseg::dataset::{self, Manifest, SyntheticSpec};
use ::connseg::metrics::{self, InstanceSet, ScoreMap, BETA2, DEFAULT_GRID, DEFAULT_IOU};
use ::connseg::model::{ConnNet, Head, PredictorConfig};
use ::connseg::training::TrainConfig;
use ::connseg::tta::{self, FusionPlan, Prediction};
use ::connseg::{BinaryMask, PatternKind};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: ::connseg::Error) -> PyErr {
    match e {
        ::connseg::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ::connseg::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn pattern(name: &str) -> PyResult<PatternKind> {
    name.parse().py()
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>, what: &str) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(format!("{what}: {e}"))),
    }
}

/// Binary saliency mask.
#[pyclass(name = "Mask", module = "connseg", eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct PyMask(BinaryMask);

#[pymethods]
impl PyMask {
    /// Builds a mask from rows of truthy values.
    #[new]
    fn new(rows: Vec<Vec<bool>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("rows must all have the same length"));
        }
        Ok(Self(BinaryMask::new(h, w, rows.concat()).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(dataset::load_mask(path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::save_mask(&self.0, path).py()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn rows(&self) -> Vec<Vec<bool>> {
        self.0.data().chunks(self.0.width().max(1)).map(<[bool]>::to_vec).collect()
    }

    fn count_salient(&self) -> usize {
        self.0.count_salient()
    }

    fn hflip(&self) -> Self {
        Self(self.0.hflip())
    }

    /// Copy without pixels that have no salient neighbor under `pattern`.
    #[pyo3(signature = (pattern = "n8"))]
    fn without_isolated(&self, pattern: &str) -> PyResult<Self> {
        let mut m = self.0.clone();
        m.remove_isolated(self::pattern(pattern)?);
        Ok(Self(m))
    }

    fn __repr__(&self) -> String {
        format!("Mask({}x{}, {} salient)", self.0.height(), self.0.width(), self.0.count_salient())
    }
}

/// H×W×C connectivity cube with values in [0, 1].
#[pyclass(name = "Cube", module = "connseg", eq, from_py_object)]
#[derive(Clone, PartialEq)]
struct PyCube(ConnectivityCube);

#[pymethods]
impl PyCube {
    /// `values` is pixel-major: index `(i * width + j) * channels + c`.
    #[new]
    fn new(height: usize, width: usize, pattern: &str, values: Vec<f32>) -> PyResult<Self> {
        Ok(Self(ConnectivityCube::new(height, width, self::pattern(pattern)?, values).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(dataset::read_ccub(path).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::write_ccub(&self.0, path).py()
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self(dataset::decode_ccub(data).py()?))
    }

    fn to_bytes(&self) -> Vec<u8> {
        dataset::encode_ccub(&self.0)
    }

    /// `(height, width, channels)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height(), self.0.width(), self.0.channels())
    }

    #[getter]
    fn pattern(&self) -> String {
        self.0.pattern().to_string()
    }

    fn values(&self) -> Vec<f32> {
        self.0.values().to_vec()
    }

    fn get(&self, row: usize, col: usize, channel: usize) -> PyResult<f32> {
        if row >= self.0.height() || col >= self.0.width() || channel >= self.0.channels() {
            return Err(PyValueError::new_err("cube index out of range"));
        }
        Ok(self.0.get(row, col, channel))
    }

    /// Maps a prediction on a mirrored image back to the original geometry.
    fn unflip(&self) -> Self {
        Self(tta::unflip_cube(&self.0))
    }

    /// Per-pixel scores whose `> t` binarization equals `decode(cube, t, k)`.
    #[pyo3(signature = (k = 1))]
    fn pixel_scores(&self, k: usize) -> PyResult<Vec<f32>> {
        codec::pixel_scores(&self.0, k).py()
    }

    fn __repr__(&self) -> String {
        format!("Cube({}x{}x{}, {})", self.0.height(), self.0.width(), self.0.channels(), self.0.pattern())
    }
}

#[pyfunction]
#[pyo3(signature = (mask, pattern = "n8"))]
fn encode(mask: &PyMask, pattern: &str) -> PyResult<PyCube> {
    Ok(PyCube(codec::encode(&mask.0, self::pattern(pattern)?)))
}

#[pyfunction]
#[pyo3(signature = (cube, t = 0.5, k = 1))]
fn decode(cube: &PyCube, t: f64, k: usize) -> PyResult<PyMask> {
    Ok(PyMask(codec::decode(&cube.0, t, k).py()?))
}

/// Element-wise mean of same-shaped cubes.
#[pyfunction]
fn fuse(cubes: Vec<PyCube>) -> PyResult<PyCube> {
    let cubes: Vec<ConnectivityCube> = cubes.into_iter().map(|c| c.0).collect();
    Ok(PyCube(codec::fuse_cubes(&cubes).py()?))
}

/// ConnNet-mini predictor.
#[pyclass(name = "Model", module = "connseg")]
struct PyModel(ConnNet);

fn predict_image(model: &ConnNet, image: PathBuf, plan: Option<&str>) -> PyResult<(Prediction, FusionPlan)> {
    let plan: FusionPlan = match plan {
        None => FusionPlan::default(),
        Some(t) => FusionPlan::from_json(t).py()?,
    };
    let x = dataset::image_to_tensor(&dataset::load_image(image).py()?);
    Ok((tta::fused_prediction(model, &x, &plan).py()?, plan))
}

#[pymethods]
impl PyModel {
    /// Fresh model; `config` is the JSON of the model configuration.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: PredictorConfig = from_json(config, "model config")?;
        Ok(Self(ConnNet::new(cfg, seed).py()?))
    }

    /// Reads a CNW1 checkpoint; the config defaults to the JSON sidecar.
    #[staticmethod]
    #[pyo3(signature = (path, config = None))]
    fn load(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let cfg = config.map(|c| PredictorConfig::from_json(c).py()).transpose()?;
        Ok(Self(load_model(&path, cfg).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.0, &path).py()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    /// `"n4"`, `"n8"`, `"n12"` for connectivity heads, `"segmentation"` otherwise.
    #[getter]
    fn head(&self) -> String {
        match self.0.config().head {
            Head::Connectivity { pattern } => pattern.to_string(),
            Head::Segmentation => "segmentation".into(),
        }
    }

    fn config(&self) -> PyResult<String> {
        serde_json::to_string(self.0.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Binary mask under a fusion plan (JSON; default 5 scales with flips).
    #[pyo3(signature = (image, plan = None))]
    fn predict(&self, py: Python<'_>, image: PathBuf, plan: Option<&str>) -> PyResult<PyMask> {
        py.detach(|| {
            let (pred, plan) = predict_image(&self.0, image, plan)?;
            Ok(PyMask(pred.to_mask(plan.t, plan.k).py()?))
        })
    }

    /// Fused connectivity cube; fails for segmentation heads.
    #[pyo3(signature = (image, plan = None))]
    fn predict_cube(&self, py: Python<'_>, image: PathBuf, plan: Option<&str>) -> PyResult<PyCube> {
        py.detach(|| match predict_image(&self.0, image, plan)?.0 {
            Prediction::Connectivity(c) => Ok(PyCube(c)),
            Prediction::Saliency(_) => Err(PyValueError::new_err("segmentation head has no cube")),
        })
    }

    /// Row-major per-pixel scores in [0, 1] for either head.
    #[pyo3(signature = (image, plan = None))]
    fn predict_scores(&self, py: Python<'_>, image: PathBuf, plan: Option<&str>) -> PyResult<Vec<f32>> {
        py.detach(|| Ok(predict_image(&self.0, image, plan)?.0.score_map().scores().to_vec()))
    }

    fn __repr__(&self) -> String {
        format!("Model(head={}, params={})", self.head(), self.0.param_count())
    }
}

/// Trains on a manifest and writes checkpoints and the log into `out_dir`.
/// Returns the trained model and `(step, loss, val_maxF)` rows.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, model_config = None, train_config = None))]
#[allow(clippy::type_complexity)]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    out_dir: PathBuf,
    model_config: Option<&str>,
    train_config: Option<&str>,
) -> PyResult<(PyModel, Vec<(usize, f64, Option<f64>)>)> {
    let model_cfg: PredictorConfig = from_json(model_config, "model config")?;
    let train_cfg: TrainConfig = from_json(train_config, "train config")?;
    model_cfg.validate().py()?;
    train_cfg.validate().py()?;
    py.detach(|| {
        let manifest = Manifest::read(&manifest).py()?;
        std::fs::create_dir_all(&out_dir).map_err(|e| PyOSError::new_err(format!("{}: {e}", out_dir.display())))?;
        let (model, report) = ::connseg::training::train(&manifest, &model_cfg, &train_cfg, &out_dir, &mut |_| {}).py()?;
        let log = report.log.iter().map(|r| (r.step, r.loss, r.val_max_f)).collect();
        Ok((PyModel(model), log))
    })
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, spec = None))]
fn generate_synthetic(py: Python<'_>, out_dir: PathBuf, spec: Option<&str>) -> PyResult<PathBuf> {
    let spec = match spec {
        None => SyntheticSpec::default(),
        Some(t) => SyntheticSpec::from_json(t).py()?,
    };
    py.detach(|| {
        dataset::generate_synthetic(&spec, &out_dir).py()?;
        Ok(out_dir.join("manifest.csv"))
    })
}

#[pyfunction]
#[pyo3(signature = (precision, recall, beta2 = BETA2))]
fn f_beta(precision: f64, recall: f64, beta2: f64) -> PyResult<f64> {
    metrics::f_beta(precision, recall, beta2).py()
}

fn score_map(scores: Vec<f32>, gt: &BinaryMask) -> PyResult<ScoreMap> {
    ScoreMap::saliency(gt.height(), gt.width(), scores).py()
}

/// Max F-measure of row-major scores against a mask: `(maxF, best_t)`.
#[pyfunction]
#[pyo3(signature = (scores, ground_truth, grid = DEFAULT_GRID))]
fn max_f(scores: Vec<f32>, ground_truth: &PyMask, grid: usize) -> PyResult<(f64, f64)> {
    let r = metrics::max_f_measure(
        &score_map(scores, &ground_truth.0)?,
        &ground_truth.0,
        &metrics::threshold_grid(grid).py()?,
    )
    .py()?;
    Ok((r.max_f, r.best_t))
}

/// Max F-measure of a cube against a mask: `(maxF, best_t)`.
#[pyfunction]
#[pyo3(signature = (cube, ground_truth, grid = DEFAULT_GRID))]
fn cube_max_f(cube: &PyCube, ground_truth: &PyMask, grid: usize) -> PyResult<(f64, f64)> {
    let r = metrics::max_f_measure(
        &ScoreMap::connectivity(&cube.0),
        &ground_truth.0,
        &metrics::threshold_grid(grid).py()?,
    )
    .py()?;
    Ok((r.max_f, r.best_t))
}

#[pyfunction]
fn iou(a: &PyMask, b: &PyMask) -> PyResult<f64> {
    metrics::iou(&a.0, &b.0).py()
}

/// Mask average precision of scored instance predictions.
#[pyfunction]
#[pyo3(signature = (predictions, ground_truth, threshold = DEFAULT_IOU))]
fn map_r(predictions: Vec<(PyMask, f64)>, ground_truth: Vec<PyMask>, threshold: f64) -> PyResult<f64> {
    let set = InstanceSet {
        predictions: predictions.into_iter().map(|(m, s)| (m.0, s)).collect(),
        ground_truth: ground_truth.into_iter().map(|m| m.0).collect(),
    };
    metrics::map_r(&set, threshold).py()
}

/// Finite-difference check; returns `(name, relative_error, passed)` rows.
#[pyfunction]
#[pyo3(signature = (config = None, seed = 0, eps = 1e-5))]
fn gradcheck(py: Python<'_>, config: Option<&str>, seed: u64, eps: f64) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg: PredictorConfig = from_json(config, "model config")?;
    py.detach(|| {
        let out = ::connseg::verify::gradcheck_suite(&cfg, seed, eps).py()?;
        Ok(out.iter().map(|o| (o.name.clone(), o.report.max_rel_error, o.passed())).collect())
    })
}

#[pymodule(name = "connseg")]
fn connseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMask>()?;
    m.add_class::<PyCube>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(f_beta, m)?)?;
    m.add_function(wrap_pyfunction!(max_f, m)?)?;
    m.add_function(wrap_pyfunction!(cube_max_f, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(map_r, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
