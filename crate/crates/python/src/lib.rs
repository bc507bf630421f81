//! Python bindings: chain kinematics, controller algebra, the reaching
//! environment and the experiment commands.

use std::path::PathBuf;

use adaptive_vmc::env::{decode_action, Coordination, ReachingEnv, VmcConfiguration};
use adaptive_vmc::harness::{self, Controller, ExperimentConfig};
use adaptive_vmc::vmc::{self, GainBounds};
use adaptive_vmc::{ChainModel, Error, JointVector};
use nalgebra::Vector3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Parse { .. } | Error::DimensionMismatch { .. } | Error::LinkOutOfRange { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(to_py(py, x)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn serialize<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let json = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &json)
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::from(v)
}

/// Serial-link chain model.
#[pyclass(name = "Chain", module = "adaptive_vmc_py")]
struct PyChain {
    inner: ChainModel,
}

#[pymethods]
impl PyChain {
    /// `builtin:planar3`, `builtin:panda`, or a chain file path.
    #[staticmethod]
    fn load(source: &str) -> PyResult<Self> {
        ChainModel::load(source).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn dof(&self) -> usize {
        self.inner.dof()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    /// World position of the control point of `link`.
    fn link_point_position(&self, q: Vec<f64>, link: usize) -> PyResult<[f64; 3]> {
        let p = self.inner.link_point_position(&JointVector::from_vec(q), link).map_err(py_err)?;
        Ok([p.x, p.y, p.z])
    }

    /// 3×n translational Jacobian of the control point of `link`, row-major.
    fn jacobian(&self, q: Vec<f64>, link: usize) -> PyResult<Vec<Vec<f64>>> {
        let j = self.inner.geometric_jacobian(&JointVector::from_vec(q), link).map_err(py_err)?;
        Ok((0..3).map(|r| j.row(r).iter().copied().collect()).collect())
    }

    fn gravity_torques(&self, q: Vec<f64>) -> PyResult<Vec<f64>> {
        let t = self.inner.gravity_torques(&JointVector::from_vec(q)).map_err(py_err)?;
        Ok(t.iter().copied().collect())
    }

    fn potential_energy(&self, q: Vec<f64>) -> PyResult<f64> {
        self.inner.potential_energy(&JointVector::from_vec(q)).map_err(py_err)
    }
}

/// Reaching task built from an experiment config.
#[pyclass(name = "ReachingEnv", module = "adaptive_vmc_py")]
struct PyEnv {
    inner: ReachingEnv,
}

#[pymethods]
impl PyEnv {
    /// `vmc` is `"E"`, `"6-E"` or `"4-6-E"`; defaults to the config's choice.
    #[new]
    #[pyo3(signature = (config_path, vmc=None))]
    fn new(config_path: PathBuf, vmc: Option<&str>) -> PyResult<Self> {
        let cfg = ExperimentConfig::load(&config_path).map_err(py_err)?;
        let v = match vmc {
            Some(s) => VmcConfiguration::parse(s).map_err(py_err)?,
            None => cfg.run.vmc_configuration,
        };
        let inner = cfg.env(Coordination::Policy(v)).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Force fixed coordination weights, or `None` to return control to the policy.
    #[pyo3(signature = (alpha=None, beta=None, vmc="4-6-E"))]
    fn set_coordination(&mut self, alpha: Option<f64>, beta: Option<f64>, vmc: &str) -> PyResult<()> {
        let c = match (alpha, beta) {
            (Some(alpha), Some(beta)) => Coordination::Fixed { alpha, beta },
            (None, None) => Coordination::Policy(VmcConfiguration::parse(vmc).map_err(py_err)?),
            _ => return Err(PyValueError::new_err("give both alpha and beta, or neither")),
        };
        self.inner.set_coordination(c);
        Ok(())
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed).0
    }

    /// Returns `(observation, reward, done, info)`.
    fn step<'py>(&mut self, py: Python<'py>, action: Vec<f64>) -> PyResult<(Vec<f64>, f64, bool, Bound<'py, PyDict>)> {
        let out = self.inner.step(&action).map_err(py_err)?;
        let info = PyDict::new(py);
        info.set_item("error", out.error)?;
        info.set_item("f_rep_norm", out.f_rep_norm)?;
        info.set_item("fault", out.fault)?;
        Ok((out.observation.0, out.reward, out.done, info))
    }

    fn target(&self) -> [f64; 3] {
        let t = self.inner.target();
        [t.x, t.y, t.z]
    }

    /// Summary of the current episode as a dict.
    fn summarize(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = self.inner.summarize().map_err(py_err)?;
        serialize(py, &s)
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        adaptive_vmc::env::OBS_DIM
    }

    #[getter]
    fn action_dim(&self) -> usize {
        adaptive_vmc::env::ACTION_DIM
    }
}

/// Experiment config with the harness commands.
#[pyclass(name = "Experiment", module = "adaptive_vmc_py")]
struct PyExperiment {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = ExperimentConfig::load(&path).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.run.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.run.seeds = seeds;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.paths.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.paths.out_dir = dir;
    }

    #[setter]
    fn set_iterations(&mut self, n: Option<usize>) {
        self.inner.run.iterations = n;
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    /// Train every seed; returns one list of iteration metrics per seed.
    fn train(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let runs = harness::cmd_train(&self.inner).map_err(py_err)?;
        let metrics: Vec<_> = runs.iter().map(|r| &r.metrics).collect();
        serialize(py, &metrics)
    }

    /// Evaluate a checkpoint, or the fixed-gain baseline when `None`.
    #[pyo3(signature = (checkpoint=None))]
    fn eval(&self, py: Python<'_>, checkpoint: Option<PathBuf>) -> PyResult<Py<PyAny>> {
        let r = harness::cmd_eval(&self.inner, checkpoint.as_deref()).map_err(py_err)?;
        serialize(py, &r.overall)
    }

    /// Coordination sweep; returns the list of grid cells.
    #[pyo3(signature = (checkpoint=None))]
    fn sweep(&self, py: Python<'_>, checkpoint: Option<PathBuf>) -> PyResult<Py<PyAny>> {
        let r = harness::cmd_sweep(&self.inner, checkpoint.as_deref()).map_err(py_err)?;
        serialize(py, &r.cells)
    }

    /// Train and evaluate each configured VMC configuration.
    fn compare(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let r = harness::cmd_compare(&self.inner).map_err(py_err)?;
        serialize(py, &r.rows)
    }

    /// Deterministic evaluation of a checkpoint without writing files.
    #[pyo3(signature = (checkpoint, seed=0, episodes=10))]
    fn evaluate_checkpoint(&self, py: Python<'_>, checkpoint: PathBuf, seed: u64, episodes: usize) -> PyResult<Py<PyAny>> {
        let controller = Controller::load(&checkpoint).map_err(py_err)?;
        let mut env = self
            .inner
            .env(Coordination::Policy(self.inner.run.vmc_configuration))
            .map_err(py_err)?;
        let eps = harness::evaluate(&mut env, &controller, seed, episodes).map_err(py_err)?;
        serialize(py, &harness::EvalSummary::of(&eps))
    }
}

/// `(w4, w6, wE)` for coordination factors `alpha`, `beta`.
#[pyfunction]
fn component_weights(alpha: f64, beta: f64) -> (f64, f64, f64) {
    vmc::component_weights(alpha, beta)
}

/// Spring-damper force `kp (p_tar - p) - kd pdot`.
#[pyfunction]
fn virtual_force(kp: f64, kd: f64, p: [f64; 3], pdot: [f64; 3], p_tar: [f64; 3]) -> [f64; 3] {
    let f = vmc::virtual_force(kp, kd, &vec3(p), &vec3(pdot), &vec3(p_tar));
    [f.x, f.y, f.z]
}

/// Map a raw 8-vector policy action to gains and weights under default bounds.
#[pyfunction]
fn decode(py: Python<'_>, raw: Vec<f64>) -> PyResult<Py<PyAny>> {
    let a = decode_action(&raw, &GainBounds::default()).map_err(py_err)?;
    let d = PyDict::new(py);
    let kp: Vec<f64> = a.gains.0.iter().map(|g| g.kp).collect();
    let kd: Vec<f64> = a.gains.0.iter().map(|g| g.kd).collect();
    d.set_item("kp", kp)?;
    d.set_item("kd", kd)?;
    d.set_item("alpha", a.weights.alpha)?;
    d.set_item("beta", a.weights.beta)?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y must have the same length"));
    }
    Ok(harness::spearman(&x, &y))
}

#[pymodule]
fn adaptive_vmc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChain>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(component_weights, m)?)?;
    m.add_function(wrap_pyfunction!(virtual_force, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add("SCHEMA_VERSION", harness::SCHEMA_VERSION)?;
    Ok(())
}
