//! Python bindings: room simulation, preprocessing, network inference and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use soundfield::dataset::{load_field, DatasetManifest};
use soundfield::eval::{baseline_reconstruct, trial_arrangement, BaselineMethod};
use soundfield::grid::{FieldTensor, FrequencyGrid, GridSpec};
use soundfield::metrics::{field_metrics, rescale};
use soundfield::modal::{Damping, ModalModel, RoomSpec};
use soundfield::nn::{checkpoint, predict, UNetWeights};
use soundfield::preprocess::{prepare, MicArrangement, Observations};
use soundfield::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Corrupt { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// The 40 analysis frequencies in Hz.
#[pyfunction]
fn frequency_grid() -> Vec<f64> {
    FrequencyGrid::standard().frequencies
}

#[pyclass(name = "Room", module = "soundfield_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRoom {
    inner: RoomSpec,
}

#[pymethods]
impl PyRoom {
    #[new]
    #[pyo3(signature = (l_x, l_y, l_z, source, t60 = 0.6))]
    fn new(l_x: f64, l_y: f64, l_z: f64, source: (f64, f64), t60: f64) -> PyResult<Self> {
        let mut inner = RoomSpec::new(l_x, l_y, l_z, source).map_err(to_py)?;
        inner.t60 = t60;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dimensions(&self) -> (f64, f64, f64) {
        (self.inner.l_x, self.inner.l_y, self.inner.l_z)
    }

    #[getter]
    fn source(&self) -> (f64, f64) {
        self.inner.source
    }

    /// Simulated magnitude field on the 32 x 32 grid at every analysis frequency.
    #[pyo3(signature = (damping = "dimensional"))]
    fn magnitude_field(&self, py: Python<'_>, damping: &str) -> PyResult<PyField> {
        let damping: Damping = damping.parse().map_err(PyValueError::new_err)?;
        let model = ModalModel {
            damping,
            ..ModalModel::default()
        };
        let room = self.inner;
        let field = py
            .detach(|| model.magnitude_field(&room, &GridSpec::default(), &FrequencyGrid::standard()))
            .map_err(to_py)?;
        Ok(PyField { inner: field })
    }

    fn __repr__(&self) -> String {
        let r = &self.inner;
        format!(
            "Room({:.3}, {:.3}, {:.3}, source=({:.3}, {:.3}))",
            r.l_x, r.l_y, r.l_z, r.source.0, r.source.1
        )
    }
}

#[pyclass(name = "Field", module = "soundfield_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyField {
    inner: FieldTensor,
}

#[pymethods]
impl PyField {
    /// Reads one room of a dataset directory.
    #[staticmethod]
    fn load(dataset: PathBuf, room_id: usize) -> PyResult<Self> {
        let manifest = DatasetManifest::load(&dataset).map_err(to_py)?;
        Ok(Self {
            inner: load_field(&manifest, room_id).map_err(to_py)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn n_freq(&self) -> usize {
        self.inner.n_freq()
    }

    #[getter]
    fn room(&self) -> PyRoom {
        PyRoom { inner: self.inner.room }
    }

    /// Row-major `n x n` magnitudes of bin `k`.
    fn slice(&self, k: usize) -> PyResult<Vec<f32>> {
        if k >= self.inner.n_freq() {
            return Err(PyIndexError::new_err(format!("bin {k} out of range")));
        }
        Ok(self.inner.slice(k).to_vec())
    }

    /// Every value, bin-major.
    fn values(&self) -> Vec<f32> {
        self.inner.values().to_vec()
    }

    /// Magnitude at row `j`, column `i`, bin `k`.
    fn get(&self, j: usize, i: usize, k: usize) -> PyResult<f32> {
        let n = self.inner.n();
        if j >= n || i >= n || k >= self.inner.n_freq() {
            return Err(PyIndexError::new_err(format!("({j}, {i}, {k}) out of range")));
        }
        Ok(self.inner.get(j, i, k))
    }
}

#[pyclass(name = "Arrangement", module = "soundfield_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyArrangement {
    inner: MicArrangement,
}

#[pymethods]
impl PyArrangement {
    /// Distinct `(i, j)` cells of the 8 x 8 microphone grid.
    #[new]
    fn new(points: Vec<(usize, usize)>) -> PyResult<Self> {
        Ok(Self {
            inner: MicArrangement::new(points).map_err(to_py)?,
        })
    }

    /// The arrangement the evaluation protocol draws for this trial.
    #[staticmethod]
    #[pyo3(signature = (n_mic, seed = 0, room_id = 0, arrangement_id = 0))]
    fn sample(n_mic: usize, seed: u64, room_id: usize, arrangement_id: usize) -> PyResult<Self> {
        Ok(Self {
            inner: trial_arrangement(seed, room_id, n_mic, arrangement_id).map_err(to_py)?,
        })
    }

    #[getter]
    fn points(&self) -> Vec<(usize, usize)> {
        self.inner.points().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.n_mic()
    }
}

/// Network input for `field` observed at `arrangement`: `(values, mask)`, each
/// bin-major over the 32 x 32 grid.
#[pyfunction]
fn network_input(field: &PyField, arrangement: &PyArrangement) -> PyResult<(Vec<f32>, Vec<f32>)> {
    let obs = Observations::from_field(&field.inner, &arrangement.inner);
    let input = prepare(&obs).map_err(to_py)?;
    Ok((input.s_irr, input.mask.to_tensor()))
}

#[pyclass(name = "Model", module = "soundfield_py", frozen)]
struct PyModel {
    weights: UNetWeights<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            weights: checkpoint::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.weights.config.depth
    }

    /// Network estimate of `field` from its samples at `arrangement`, rescaled to
    /// the observed magnitudes.
    fn reconstruct(&self, py: Python<'_>, field: &PyField, arrangement: &PyArrangement) -> PyResult<PyField> {
        let obs = Observations::from_field(&field.inner, &arrangement.inner);
        let truth = &field.inner;
        let weights = &self.weights;
        let out = py.detach(|| {
            let input = prepare(&obs)?;
            let pred = predict(weights, &[&input])?;
            rescale(&pred[0], &obs, truth).map(|(f, _)| f)
        });
        Ok(PyField {
            inner: out.map_err(to_py)?,
        })
    }
}

/// Interpolation baseline (`"nearest"` or `"idw"`) from the samples at `arrangement`.
#[pyfunction]
fn baseline(field: &PyField, arrangement: &PyArrangement, method: &str) -> PyResult<PyField> {
    let method: BaselineMethod = method.parse().map_err(to_py)?;
    let obs = Observations::from_field(&field.inner, &arrangement.inner);
    Ok(PyField {
        inner: baseline_reconstruct(method, &obs, &field.inner),
    })
}

/// Per-bin `(nmse_db, mssim)`; NMSE is `None` where the true slice is all zero.
#[pyfunction]
fn metrics(truth: &PyField, pred: &PyField) -> PyResult<(Vec<Option<f64>>, Vec<f64>)> {
    let m = field_metrics(&truth.inner, &pred.inner).map_err(to_py)?;
    Ok((m.nmse.db, m.mssim))
}

/// Training loss of one sample; all three sequences share one length.
#[pyfunction]
#[pyo3(signature = (pred, target, mask, weight_missing = 12.0))]
fn loss(pred: Vec<f64>, target: Vec<f64>, mask: Vec<f64>, weight_missing: f64) -> PyResult<f64> {
    soundfield::training::loss(&pred, &target, &mask, weight_missing).map_err(to_py)
}

#[pymodule]
pub fn soundfield_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRoom>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyArrangement>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(frequency_grid, m)?)?;
    m.add_function(wrap_pyfunction!(network_input, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    Ok(())
}
