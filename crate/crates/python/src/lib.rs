//! Python bindings: metrics, configuration, synthetic samples and the
//! completion model. Point clouds cross the boundary as lists of `[x, y, z]`.

use std::path::PathBuf;

use pcc_core::encoder::ImageTensor;
use pcc_core::geometry::{chamfer_distance, fps_indices, fscore, Point3, PointCloud};
use pcc_core::training::{self, build_sample, load_checkpoint, ShapeKind};
use pcc_core::{AblationVariant, CompletionModel, PipelineConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: pcc_core::Error) -> PyErr {
    match e {
        pcc_core::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cloud(points: Vec<Point3>) -> PyResult<PointCloud> {
    PointCloud::new(points).map_err(py_err)
}

#[pyfunction]
fn chamfer(pred: Vec<Point3>, gt: Vec<Point3>) -> PyResult<f64> {
    Ok(chamfer_distance(&cloud(pred)?, &cloud(gt)?))
}

/// Returns `(f1, precision, recall)`.
#[pyfunction]
#[pyo3(signature = (pred, gt, tau = 0.001))]
fn f_score(pred: Vec<Point3>, gt: Vec<Point3>, tau: f64) -> PyResult<(f64, f64, f64)> {
    let r = fscore(&cloud(pred)?, &cloud(gt)?, tau).map_err(py_err)?;
    Ok((r.f1, r.precision, r.recall))
}

#[pyfunction]
#[pyo3(signature = (points, k, seed = 0))]
fn farthest_point_sample(points: Vec<Point3>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    fps_indices(&cloud(points)?, k, seed).map_err(py_err)
}

#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    /// `preset` is `"desk"` or `"compact"`; `toml` overrides it when given.
    #[new]
    #[pyo3(signature = (preset = "desk", toml = None))]
    fn new(preset: &str, toml: Option<&str>) -> PyResult<Self> {
        let inner = match (toml, preset) {
            (Some(text), _) => PipelineConfig::from_toml_str(text).map_err(py_err)?,
            (None, "desk") => PipelineConfig::default(),
            (None, "compact") => PipelineConfig::compact(),
            (None, other) => return Err(PyValueError::new_err(format!("unknown preset {other}"))),
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn n_coarse(&self) -> usize {
        self.inner.n_coarse()
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        (self.inner.encoder.height, self.inner.encoder.width)
    }
}

/// One synthetic sample: image pixels (row-major RGB in [0, 1]), partial and
/// ground-truth clouds.
#[pyclass(name = "Sample", get_all)]
struct PySample {
    category: String,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    partial: Vec<Point3>,
    gt: Vec<Point3>,
}

#[pyfunction]
#[pyo3(signature = (config, category, seed = 0))]
fn synth(config: &PyConfig, category: &str, seed: u64) -> PyResult<PySample> {
    let kind = ShapeKind::parse(category)
        .ok_or_else(|| PyValueError::new_err(format!("unknown category {category}")))?;
    let s = build_sample(&config.inner, kind, seed).map_err(py_err)?;
    Ok(PySample {
        category: kind.name().to_string(),
        height: s.image.height(),
        width: s.image.width(),
        pixels: s.image.pixels().to_vec(),
        partial: s.partial.into_points(),
        gt: s.gt.into_points(),
    })
}

/// Writes a synthetic dataset and returns the number of samples.
#[pyfunction]
fn gen_data(config: &PyConfig, out: PathBuf) -> PyResult<usize> {
    let manifest = training::gen_data(&config.inner, &out).map_err(py_err)?;
    Ok(manifest.entries.len())
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: CompletionModel<f32>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model for `variant` (`full`, `no-recon-loss`,
    /// `i2p-only`, `p2p-only`).
    #[new]
    #[pyo3(signature = (config, variant = "full", seed = 0))]
    fn new(config: &PyConfig, variant: &str, seed: u64) -> PyResult<Self> {
        let variant: AblationVariant = variant.parse().map_err(py_err)?;
        let inner = CompletionModel::new(&config.inner.arch(), variant, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).and_then(|c| c.model()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.inner.store.iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    /// Returns `(completion, stages)`; `stages` holds the coarse cloud and
    /// every refinement stage, empty for variants without a refiner.
    fn complete(
        &self,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        partial: Vec<Point3>,
    ) -> PyResult<(Vec<Point3>, Vec<Vec<Point3>>)> {
        let image = ImageTensor::new(height, width, pixels).map_err(py_err)?;
        let c = self.inner.complete(&image, &cloud(partial)?).map_err(py_err)?;
        let stages = c
            .trace
            .as_ref()
            .map(|t| t.stages.iter().map(|s| s.points().to_vec()).collect())
            .unwrap_or_default();
        Ok((c.output().points().to_vec(), stages))
    }
}

#[pymodule]
fn pcc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(f_score, m)?)?;
    m.add_function(wrap_pyfunction!(farthest_point_sample, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
