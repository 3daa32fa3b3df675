//! Python bindings: entanglement specs and operators, single blocks, the
//! refinement bounds, training runs and the invariant suite.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use entangle_core::blocks::{self, BlockParams, LstmMode, LstmState};
use entangle_core::entangle::{self as ent, EntanglementSpec};
use entangle_core::harness::check::{run_checks, CheckOptions};
use entangle_core::harness::{train, ExperimentConfig, RunStatus};
use entangle_core::rng::SeededRng;
use entangle_core::{linalg, refine, DenseMatrix, Error};

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(py_err)
}

/// A dense row-major array of f64.
#[pyclass(name = "Tensor", module = "entangle", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: entangle_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: entangle_core::Tensor::new(&shape, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn randn(shape: Vec<usize>, seed: u64) -> Self {
        Self {
            inner: entangle_core::Tensor::randn(&shape, 1.0, &mut SeededRng::new(seed)),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn norm(&self) -> f64 {
        self.inner.l2_norm()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "EntanglementSpec", module = "entangle", from_py_object)]
#[derive(Clone)]
struct PySpec {
    inner: EntanglementSpec,
}

#[pymethods]
impl PySpec {
    /// Parses `"kind=spatial gamma=0.5 k=3 c=4"` (a bare kind also works).
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: text.parse().map_err(py_err)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn effective_gamma(&self) -> f64 {
        self.inner.effective_gamma()
    }

    fn sized(&self, width: usize) -> Self {
        Self {
            inner: self.inner.sized(width),
        }
    }

    /// The `n x n` matrix for vector kinds, or the kernel tensor for conv kinds.
    fn materialize(&self) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: ent::materialize(&self.inner).map_err(py_err)?,
        })
    }

    fn kernel_file(&self) -> PyResult<String> {
        let values = ent::materialize(&self.inner).map_err(py_err)?;
        Ok(ent::format_kernel_file(&self.inner, &values))
    }

    fn spectrum<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = ent::spectrum_report(&self.inner).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("spec", r.spec)?;
        d.set_item("eigenvalues", r.eigenvalues)?;
        d.set_item("singular_values", r.singular_values)?;
        d.set_item("spectral_norm", r.spectral_norm)?;
        d.set_item("is_orthogonal", r.is_orthogonal)?;
        d.set_item("tap_l1", r.tap_l1)?;
        d.set_item("tap_l2", r.tap_l2)?;
        Ok(d)
    }

    /// Applies the skip operator to `x`, `[..., n]` for vector kinds and
    /// `[h, w, c]` / `[b, h, w, c]` / `[t, c]` for conv kinds.
    fn apply(&self, x: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: blocks::apply_entanglement(&self.inner, &x.inner).map_err(py_err)?,
        })
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("EntanglementSpec('{}')", self.inner)
    }
}

/// One block with its parameters and fixed skip operator.
#[pyclass(name = "Block", module = "entangle")]
struct PyBlock {
    inner: BlockParams,
}

fn parse_mode(mode: &str) -> PyResult<LstmMode> {
    mode.parse().map_err(py_err)
}

#[pymethods]
impl PyBlock {
    #[staticmethod]
    #[pyo3(signature = (width, hidden, spec, seed=0))]
    fn mlp_residual(width: usize, hidden: usize, spec: &PySpec, seed: u64) -> PyResult<Self> {
        let b = BlockParams::mlp_residual(width, hidden, &spec.inner.sized(width), &mut SeededRng::new(seed));
        Ok(Self { inner: b.map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (channels, spec, seed=0))]
    fn conv_residual(channels: usize, spec: &PySpec, seed: u64) -> PyResult<Self> {
        let b = BlockParams::conv_residual(channels, &spec.inner.sized(channels), &mut SeededRng::new(seed));
        Ok(Self { inner: b.map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (d, spec, seed=0))]
    fn transformer_encoder(d: usize, spec: &PySpec, seed: u64) -> PyResult<Self> {
        let b = BlockParams::transformer_encoder(d, &spec.inner.sized(d), &mut SeededRng::new(seed));
        Ok(Self { inner: b.map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (input, hidden, spec, mode="entangle_then_gate", seed=0))]
    fn lstm_cell(input: usize, hidden: usize, spec: &PySpec, mode: &str, seed: u64) -> PyResult<Self> {
        let b = BlockParams::lstm_cell(
            input,
            hidden,
            &spec.inner.sized(hidden),
            parse_mode(mode)?,
            &mut SeededRng::new(seed),
        );
        Ok(Self { inner: b.map_err(py_err)? })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|(n, _)| n.clone()).collect()
    }

    fn set_param(&mut self, name: &str, value: &PyTensor) -> PyResult<()> {
        self.inner.set_param(name, value.inner.clone()).map_err(py_err)
    }

    fn fingerprint(&self) -> String {
        self.inner.entangler_fingerprint()
    }

    /// Residual blocks: `(y, f(x))`. Encoders: `(y, None)`.
    fn forward(&self, x: &PyTensor) -> PyResult<(PyTensor, Option<PyTensor>)> {
        match self.inner.kind() {
            blocks::BlockKind::TransformerEncoder => {
                let y = blocks::transformer_encoder_forward(&x.inner, &self.inner).map_err(py_err)?;
                Ok((PyTensor { inner: y }, None))
            }
            _ => {
                let (y, f) = blocks::residual_forward(&x.inner, &self.inner).map_err(py_err)?;
                Ok((PyTensor { inner: y }, Some(PyTensor { inner: f })))
            }
        }
    }

    /// One LSTM step; returns the new `(c, h)`.
    fn step(&self, c: &PyTensor, h: &PyTensor, x: &PyTensor) -> PyResult<(PyTensor, PyTensor)> {
        let state = LstmState::new(c.inner.clone(), h.inner.clone()).map_err(py_err)?;
        let next = blocks::lstm_step(&state, &x.inner, &self.inner).map_err(py_err)?;
        Ok((PyTensor { inner: next.c }, PyTensor { inner: next.h }))
    }
}

#[pyfunction]
fn make_dense_gamma(n: usize, gamma: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&ent::make_dense_gamma(n, gamma).map_err(py_err)?))
}

#[pyfunction]
#[pyo3(signature = (n, seed=0))]
fn make_orthogonal_gamma(n: usize, seed: u64) -> Vec<Vec<f64>> {
    to_rows(&ent::make_orthogonal_gamma(n, seed))
}

#[pyfunction]
fn eig_symmetric(matrix: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    linalg::eig_symmetric(&from_rows(matrix)?).map_err(py_err)
}

#[pyfunction]
fn singular_values(matrix: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(linalg::singular_values(&from_rows(matrix)?))
}

/// `(lower, upper)` bounds on `(‖f‖ / ‖xΓ‖)²`; upper is `inf` at `γ = 1`.
#[pyfunction]
fn lemma1_bounds(f_norm: f64, x_norm: f64, gamma: f64, spectral_norm: f64) -> PyResult<(f64, f64)> {
    refine::lemma1_bounds(f_norm, x_norm, gamma, spectral_norm).map_err(py_err)
}

/// Trains from config text and returns the run's metrics.
#[pyfunction]
#[pyo3(signature = (config, seed=0))]
fn train_run<'py>(py: Python<'py>, config: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let cfg: ExperimentConfig = config.parse().map_err(py_err)?;
    let m = py.detach(|| train(&cfg, seed)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("seed", m.seed)?;
    d.set_item("config_hash", m.config_hash)?;
    d.set_item("entanglement", m.entanglement)?;
    d.set_item("best_test_acc", m.best_test_acc)?;
    d.set_item("wall_time_secs", m.wall_time_secs)?;
    let status = match m.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Diverged { epoch } => format!("diverged at epoch {epoch}"),
        RunStatus::Failed { reason } => format!("failed: {reason}"),
    };
    d.set_item("status", status)?;
    d.set_item("entanglement_unchanged", m.entanglement_unchanged)?;
    let epochs: Vec<(usize, f64, f64, f64)> = m
        .epochs
        .iter()
        .map(|e| (e.epoch, e.train_loss, e.train_acc, e.test_acc))
        .collect();
    d.set_item("epochs", epochs)?;
    Ok(d)
}

/// Runs the invariant suite; returns `(id, name, passed, detail)` per criterion.
#[pyfunction]
#[pyo3(signature = (perturb=None))]
fn check(py: Python<'_>, perturb: Option<&str>) -> PyResult<Vec<(usize, String, bool, String)>> {
    let perturb = perturb.map(|k| k.parse()).transpose().map_err(py_err)?;
    let results = py.detach(|| run_checks(&CheckOptions { perturb }));
    Ok(results
        .into_iter()
        .map(|r| (r.id, r.name.to_string(), r.passed, r.detail))
        .collect())
}

#[pymodule]
fn entangle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PySpec>()?;
    m.add_class::<PyBlock>()?;
    m.add_function(wrap_pyfunction!(make_dense_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(make_orthogonal_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(eig_symmetric, m)?)?;
    m.add_function(wrap_pyfunction!(singular_values, m)?)?;
    m.add_function(wrap_pyfunction!(lemma1_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    Ok(())
}
