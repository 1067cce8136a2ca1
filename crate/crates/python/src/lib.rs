//! Python bindings for `subpt`.
//!
//! Configs take keyword arguments with the same keys as the config files;
//! values are passed through `str()` and parsed on the Rust side.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

create_exception!(_subpt, SubptError, PyException);

fn err(e: subpt::Error) -> PyErr {
    SubptError::new_err(e.to_string())
}

fn apply_kwargs(
    kwargs: Option<&Bound<'_, PyDict>>,
    mut set: impl FnMut(&str, &str) -> subpt::Result<bool>,
) -> PyResult<()> {
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            if !set(&key, &value).map_err(err)? {
                return Err(SubptError::new_err(format!(
                    "ConfigInvalid: unknown config key {key:?}"
                )));
            }
        }
    }
    Ok(())
}

fn entries_dict<'py>(py: Python<'py>, entries: Vec<(&'static str, String)>) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in entries {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pyclass(name = "TrainConfig", module = "subpt._subpt", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig(subpt::TrainConfig);

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = subpt::TrainConfig::default();
        apply_kwargs(kwargs, |k, v| cfg.set(k, v))?;
        Ok(Self(cfg))
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let value = value.str()?.to_string();
        if self.0.set(key, &value).map_err(err)? {
            Ok(())
        } else {
            Err(SubptError::new_err(format!(
                "ConfigInvalid: unknown config key {key:?}"
            )))
        }
    }

    /// Config keys mapped to their canonical text values.
    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        entries_dict(py, self.0.entries())
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(err)
    }

    #[getter]
    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.0.fingerprint())
    }
}

#[pyclass(name = "SynthConfig", module = "subpt._subpt", from_py_object)]
#[derive(Clone)]
struct PySynthConfig(subpt::SynthConfig);

#[pymethods]
impl PySynthConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = subpt::SynthConfig::default();
        apply_kwargs(kwargs, |k, v| cfg.set(k, v))?;
        Ok(Self(cfg))
    }

    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        entries_dict(py, self.0.entries())
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(err)
    }
}

#[pyclass(name = "Encoder", module = "subpt._subpt", from_py_object)]
#[derive(Clone)]
struct PyEncoder(subpt::Encoder);

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (seed, d, m, hidden, out, class_gain = 1.0))]
    fn new(seed: u64, d: usize, m: usize, hidden: usize, out: usize, class_gain: f64) -> PyResult<Self> {
        subpt::Encoder::build_with_class_gain(seed, d, m, hidden, out, class_gain)
            .map(Self)
            .map_err(err)
    }

    /// The encoder a `TrainConfig` builds for a given feature dimension.
    #[staticmethod]
    fn for_config(cfg: &PyTrainConfig, feature_dim: usize) -> PyResult<Self> {
        cfg.0.build_encoder(feature_dim).map(Self).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn tag(&self) -> String {
        self.0.tag()
    }

    /// Unit-norm text feature of one class under a flat `d * M` prompt.
    fn encode_text(&self, prompt: Vec<f64>, class_embedding: Vec<f64>) -> PyResult<Vec<f64>> {
        let p = subpt::PromptState::new(self.0.token_dim(), self.0.token_count(), prompt).map_err(err)?;
        let c = subpt::ClassEmbedding::new(class_embedding).map_err(err)?;
        let f = self.0.encode_text(&p, &c).map_err(err)?;
        Ok(f.as_slice().to_vec())
    }
}

#[pyclass(name = "SyntheticTask", module = "subpt._subpt", from_py_object)]
#[derive(Clone)]
struct PyTask(subpt::SyntheticTask);

#[pymethods]
impl PyTask {
    /// Generates a task; with an encoder, generalizable directions are
    /// aligned to its zero-shot features.
    #[staticmethod]
    #[pyo3(signature = (cfg, encoder = None))]
    fn generate(cfg: &PySynthConfig, encoder: Option<&PyEncoder>) -> PyResult<Self> {
        match encoder {
            Some(e) => subpt::generate_task_for(&cfg.0, &e.0),
            None => subpt::generate_task(&cfg.0),
        }
        .map(Self)
        .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        subpt::SyntheticTask::load(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        subpt::SyntheticTask::from_text(text, "<python>").map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn n_base(&self) -> usize {
        self.0.n_base()
    }

    #[getter]
    fn n_novel(&self) -> usize {
        self.0.n_novel()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.0.feature_dim()
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.0.train.len()
    }

    #[getter]
    fn aligned_to(&self) -> Option<String> {
        self.0.aligned_to.clone()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

#[pyclass(name = "Trajectory", module = "subpt._subpt", from_py_object)]
#[derive(Clone)]
struct PyTrajectory(subpt::Trajectory);

#[pymethods]
impl PyTrajectory {
    #[new]
    #[pyo3(signature = (rows, fingerprint = String::new()))]
    fn new(rows: Vec<Vec<f64>>, fingerprint: String) -> PyResult<Self> {
        let p = rows.first().map_or(0, Vec::len);
        subpt::Trajectory::from_rows(p, fingerprint, rows)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        subpt::Trajectory::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().to_vec()
    }

    #[getter]
    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.0.fingerprint().to_string()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Subspace", module = "subpt._subpt", from_py_object)]
#[derive(Clone)]
struct PySubspace(subpt::Subspace);

#[pymethods]
impl PySubspace {
    /// Subspace spanned by caller-supplied orthonormal rows.
    #[staticmethod]
    fn from_basis(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let m = subpt::DenseMatrix::from_rows(&rows).map_err(err)?;
        subpt::Subspace::from_basis(m).map(Self).map_err(err)
    }

    #[staticmethod]
    fn full(param_dim: usize) -> PyResult<Self> {
        subpt::Subspace::full(param_dim).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        subpt::Subspace::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn project(&self, g: Vec<f64>) -> PyResult<Vec<f64>> {
        subpt::project(&self.0, &g).map_err(err)
    }

    fn basis(&self) -> Vec<Vec<f64>> {
        self.0.basis().iter_rows().map(<[f64]>::to_vec).collect()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.0.rank()
    }

    #[getter]
    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.0.eigenvalues().to_vec()
    }

    #[getter]
    fn variance_ratios(&self) -> Vec<f64> {
        self.0.variance_ratios().to_vec()
    }

    #[getter]
    fn window(&self) -> (usize, usize) {
        self.0.window()
    }
}

#[pyclass(name = "RunResult", module = "subpt._subpt", from_py_object)]
#[derive(Clone)]
struct PyRunResult(subpt::RunResult);

#[pymethods]
impl PyRunResult {
    #[getter]
    fn trajectory(&self) -> PyTrajectory {
        PyTrajectory(self.0.trajectory.clone())
    }

    #[getter]
    fn final_prompt(&self) -> Vec<f64> {
        self.0.final_prompt.as_slice().to_vec()
    }

    #[getter]
    fn subspace(&self) -> Option<PySubspace> {
        self.0.subspace.clone().map(PySubspace)
    }

    /// One dict per epoch, keyed by the metrics CSV columns.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let list = PyList::empty(py);
        for m in &self.0.metrics {
            let d = PyDict::new(py);
            d.set_item("epoch", m.epoch)?;
            d.set_item("train_loss", m.train_loss)?;
            d.set_item("train_acc", m.train_acc)?;
            d.set_item("base_test_acc", m.base_test_acc)?;
            d.set_item("novel_test_acc", m.novel_test_acc)?;
            d.set_item("grad_norm_raw", m.grad_norm_raw)?;
            d.set_item("grad_norm_projected", m.grad_norm_projected)?;
            d.set_item("nfl_loss", m.nfl_loss)?;
            list.append(d)?;
        }
        Ok(list)
    }

    fn metrics_csv(&self) -> String {
        subpt::trainer::metrics_csv(&self.0.metrics)
    }
}

fn encoder_for(
    cfg: &subpt::TrainConfig,
    task: &subpt::SyntheticTask,
    enc: Option<&PyEncoder>,
) -> PyResult<subpt::Encoder> {
    match enc {
        Some(e) => Ok(e.0.clone()),
        None => cfg.build_encoder(task.feature_dim()).map_err(err),
    }
}

/// Trains a prompt; the encoder defaults to the one the config builds.
#[pyfunction]
#[pyo3(signature = (cfg, task, encoder = None, subspace = None))]
fn train(
    py: Python<'_>,
    cfg: &PyTrainConfig,
    task: &PyTask,
    encoder: Option<&PyEncoder>,
    subspace: Option<&PySubspace>,
) -> PyResult<PyRunResult> {
    let enc = encoder_for(&cfg.0, &task.0, encoder)?;
    let (c, t, s) = (&cfg.0, &task.0, subspace.map(|s| &s.0));
    py.detach(|| subpt::train(c, t, &enc, s)).map(PyRunResult).map_err(err)
}

/// Plain run, PCA over the early window, projected rerun.
/// Returns `(stage1, subspace, stage3)`.
#[pyfunction]
#[pyo3(signature = (cfg, task, encoder = None))]
fn subpt_pipeline(
    py: Python<'_>,
    cfg: &PyTrainConfig,
    task: &PyTask,
    encoder: Option<&PyEncoder>,
) -> PyResult<(PyRunResult, PySubspace, PyRunResult)> {
    let enc = encoder_for(&cfg.0, &task.0, encoder)?;
    let (c, t) = (&cfg.0, &task.0);
    let p = py.detach(|| subpt::subpt_pipeline(c, t, &enc)).map_err(err)?;
    Ok((PyRunResult(p.stage1), PySubspace(p.subspace), PyRunResult(p.stage3)))
}

#[pyfunction]
fn pca_fit(traj: &PyTrajectory, window: (usize, usize), r: usize) -> PyResult<PySubspace> {
    subpt::pca_fit(&traj.0, window, r).map(PySubspace).map_err(err)
}

#[pyfunction]
fn leading_alignment(a: &PySubspace, b: &PySubspace) -> PyResult<f64> {
    subpt::leading_alignment(&a.0, &b.0).map_err(err)
}

/// Returns a dict with `alignment`, `early_ratios` and `later_ratios`.
#[pyfunction]
#[pyo3(signature = (traj, early, later, r = 1))]
fn analyze_orthogonality<'py>(
    py: Python<'py>,
    traj: &PyTrajectory,
    early: (usize, usize),
    later: (usize, usize),
    r: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let rep = subpt::analyze_orthogonality(&traj.0, early, later, r).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("alignment", rep.alignment)?;
    d.set_item("early_ratios", rep.early_ratios)?;
    d.set_item("later_ratios", rep.later_ratios)?;
    Ok(d)
}

/// Symmetric eigendecomposition; eigenvalues descending, eigenvectors as rows.
#[pyfunction]
fn eig_sym(matrix: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = subpt::DenseMatrix::from_rows(&matrix).map_err(err)?;
    let e = subpt::eig_sym(&m).map_err(err)?;
    let vecs = e.eigenvectors.iter_rows().map(<[f64]>::to_vec).collect();
    Ok((e.eigenvalues, vecs))
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_command(py: Python<'_>, argv: Vec<String>) -> i32 {
    py.detach(|| subpt::cli::run_command(&argv))
}

#[pymodule]
fn _subpt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SubptError", m.py().get_type::<SubptError>())?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PySynthConfig>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PySubspace>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(subpt_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(pca_fit, m)?)?;
    m.add_function(wrap_pyfunction!(leading_alignment, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_orthogonality, m)?)?;
    m.add_function(wrap_pyfunction!(eig_sym, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
