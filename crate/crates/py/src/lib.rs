//! Python bindings for the `labelprop` propagation engine.

use std::collections::BTreeMap;
use std::path::PathBuf;

use labelprop::eval::pixel_accuracy;
use labelprop::refine::{training_frames, MAX_CYCLE_LENGTH};
use labelprop::{
    generate, horizon_curve, propagate as propagate_labels, standard_benchmark, train, ConfusionMatrix, Error,
    EvalJob, GateConfig, HorizonConfig, IgnorePolicy, Method, PropagateConfig, TrainConfig,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn policy(exclude_ignore: bool) -> IgnorePolicy {
    if exclude_ignore {
        IgnorePolicy::Excluded
    } else {
        IgnorePolicy::AsClass
    }
}

fn parse_method(name: &str) -> PyResult<Method> {
    name.parse().map_err(py_err)
}

/// Grid of class ids with a reserved ignore id.
#[pyclass(name = "LabelMap", module = "labelprop_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyLabelMap(labelprop::LabelMap);

#[pymethods]
impl PyLabelMap {
    #[new]
    #[pyo3(signature = (width, height, num_classes, data, ignore_id = 255))]
    fn new(width: usize, height: usize, num_classes: usize, data: Vec<u8>, ignore_id: u8) -> PyResult<Self> {
        labelprop::LabelMap::new(width, height, num_classes, ignore_id, data).map(Self).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn ignore_id(&self) -> u8 {
        self.0.ignore_id()
    }

    /// Row-major class ids.
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.data())
    }

    fn get(&self, x: usize, y: usize) -> PyResult<u8> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) outside the map")));
        }
        Ok(self.0.get(x, y))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        labelprop::flowio::write_label_image(&self.0, path).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, num_classes, ignore_id = 255))]
    fn load(path: PathBuf, num_classes: usize, ignore_id: u8) -> PyResult<Self> {
        labelprop::flowio::read_label_image(path, num_classes, ignore_id).map(Self).map_err(py_err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("LabelMap({}x{}, classes={})", self.0.width(), self.0.height(), self.0.num_classes())
    }
}

/// A synthetic sequence with frames, ground-truth labels and flows.
#[pyclass(name = "Sequence", module = "labelprop_py", frozen, skip_from_py_object)]
pub struct PySequence(labelprop::Sequence);

#[pymethods]
impl PySequence {
    /// The standard benchmark scene for `seed`.
    #[staticmethod]
    fn benchmark(seed: u64) -> PyResult<Self> {
        generate(&standard_benchmark(seed)).map(Self).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.dims().0
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.dims().1
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn annotated_index(&self) -> usize {
        self.0.annotated_index
    }

    fn labels(&self, k: usize) -> PyResult<PyLabelMap> {
        self.0
            .labels
            .get(k)
            .cloned()
            .map(PyLabelMap)
            .ok_or_else(|| PyValueError::new_err(format!("frame {k} outside a {}-frame sequence", self.0.len())))
    }
}

/// Motion and semantic noise oracles.
#[pyclass(name = "Oracles", module = "labelprop_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyOracles(labelprop::Oracles);

#[pymethods]
impl PyOracles {
    #[staticmethod]
    fn perfect() -> Self {
        Self(labelprop::Oracles::perfect())
    }

    /// Standard benchmark noise.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn benchmark(seed: u64) -> Self {
        Self(labelprop::Oracles::benchmark(seed))
    }

    fn reseeded(&self, seed: u64) -> Self {
        Self(self.0.reseeded(seed))
    }
}

/// Weights of the label refiner.
#[pyclass(name = "RefinerParams", module = "labelprop_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyRefinerParams(labelprop::RefinerParams);

#[pymethods]
impl PyRefinerParams {
    #[staticmethod]
    #[pyo3(signature = (num_classes, seed = 0))]
    fn init(num_classes: usize, seed: u64) -> PyResult<Self> {
        labelprop::RefinerParams::init(num_classes, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        labelprop::RefinerParams::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step
    }
}

/// Propagates the labels of frame `t`; returns `{offset: LabelMap}` for offsets in ±1..=horizon.
#[pyfunction]
#[pyo3(signature = (sequence, t, method, horizon, oracles = None, refiner = None, tau = 0.10))]
fn propagate(
    sequence: &PySequence,
    t: usize,
    method: &str,
    horizon: usize,
    oracles: Option<&PyOracles>,
    refiner: Option<&PyRefinerParams>,
    tau: f32,
) -> PyResult<BTreeMap<i64, PyLabelMap>> {
    let mut cfg = PropagateConfig::new(parse_method(method)?, horizon);
    cfg.gate = GateConfig::with_tau(tau);
    let oracles = oracles.map_or_else(labelprop::Oracles::perfect, |o| o.0.clone());
    let out = propagate_labels(&sequence.0, t, &cfg, &oracles, refiner.map(|r| &r.0)).map_err(py_err)?;
    Ok(out.into_iter().map(|(k, v)| (k, PyLabelMap(v))).collect())
}

/// Trains a refiner on every labelled frame with enough context; returns `(params, loss_trace)`.
#[pyfunction]
#[pyo3(signature = (sequences, steps = 500, lr = 0.01, seed = 0, oracles = None))]
fn train_refiner(
    sequences: Vec<PyRef<'_, PySequence>>,
    steps: usize,
    lr: f32,
    seed: u64,
    oracles: Option<&PyOracles>,
) -> PyResult<(PyRefinerParams, Vec<f64>)> {
    let seqs: Vec<labelprop::Sequence> = sequences.iter().map(|s| s.0.clone()).collect();
    let c = seqs.first().map(|s| s.num_classes()).ok_or_else(|| PyValueError::new_err("no sequences"))?;
    let frames = training_frames(&seqs, MAX_CYCLE_LENGTH);
    let cfg = TrainConfig { steps, lr, seed, ..TrainConfig::default() };
    let oracles = oracles.map_or_else(|| labelprop::Oracles::benchmark(0), |o| o.0.clone());
    let init = labelprop::RefinerParams::init(c, seed).map_err(py_err)?;
    let out = train(&init, &frames, &cfg, &oracles).map_err(py_err)?;
    Ok((PyRefinerParams(out.params), out.loss_trace))
}

/// mIoU per method and offset: `{method: {offset: miou}}`, pooled over sequences.
#[pyfunction]
#[pyo3(signature = (sequences, methods, horizon, oracles = None, refiner = None, exclude_ignore = false, threads = 1))]
fn evaluate(
    sequences: Vec<PyRef<'_, PySequence>>,
    methods: Vec<String>,
    horizon: usize,
    oracles: Option<&PyOracles>,
    refiner: Option<&PyRefinerParams>,
    exclude_ignore: bool,
    threads: usize,
) -> PyResult<BTreeMap<String, BTreeMap<i64, Option<f64>>>> {
    let methods = methods.iter().map(|m| parse_method(m)).collect::<PyResult<Vec<_>>>()?;
    let base = oracles.map_or_else(|| labelprop::Oracles::benchmark(0), |o| o.0.clone());
    let jobs: Vec<EvalJob> = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| EvalJob {
            name: format!("seq{i}"),
            sequence: &s.0,
            annotated_index: s.0.annotated_index,
            oracles: base.reseeded(i as u64),
        })
        .collect();
    let mut cfg = HorizonConfig::new(methods, horizon);
    cfg.policy = policy(exclude_ignore);
    let report = horizon_curve(&jobs, &cfg, &[], refiner.map(|r| &r.0), threads).map_err(py_err)?;
    Ok(report
        .curves
        .iter()
        .map(|c| (c.method.to_string(), c.offsets.iter().map(|o| (o.offset, o.matrix.miou())).collect()))
        .collect())
}

/// mIoU of one prediction; `None` when no class has a nonzero union.
#[pyfunction]
#[pyo3(signature = (pred, gt, exclude_ignore = false))]
fn miou(pred: &PyLabelMap, gt: &PyLabelMap, exclude_ignore: bool) -> PyResult<Option<f64>> {
    let mut cm = ConfusionMatrix::new(gt.0.num_classes(), gt.0.ignore_id(), policy(exclude_ignore));
    cm.accumulate(&pred.0, &gt.0).map_err(py_err)?;
    Ok(cm.miou())
}

/// Fraction of non-ignore ground-truth pixels predicted correctly.
#[pyfunction]
fn accuracy(pred: &PyLabelMap, gt: &PyLabelMap) -> PyResult<f64> {
    let (hit, total) = pixel_accuracy(&pred.0, &gt.0).map_err(py_err)?;
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

#[pymodule]
fn labelprop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLabelMap>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyOracles>()?;
    m.add_class::<PyRefinerParams>()?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(train_refiner, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add("METHODS", Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    Ok(())
}
