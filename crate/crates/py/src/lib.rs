//! Python module `ckil`: environments, demonstrations, density estimates,
//! training, evaluation and the consistency probe.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use ckil::demos::{self, ScriptedExpert, Trajectory, TupleBuffer};
use ckil::density::{precompute_counts, precompute_densities, ActionDistance, KernelConfig};
use ckil::env::{self, env_spec, EnvId, GridSpec};
use ckil::eval::{self, Actor, BandwidthRule, EvalMode, LearnedPolicy, SyntheticMdp};
use ckil::policy::{action_probs, argmax_action, sample_action};
use ckil::rng::rng_from;
use ckil::train::{train_bc, train_ckil, LossRecord, StopReason, TrainConfig};

fn err(e: ckil::Error) -> PyErr {
    use ckil::Error::*;
    match e {
        Io(e) => PyOSError::new_err(e.to_string()),
        Numeric(_) | Integrity(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn env_id(name: &str) -> PyResult<EnvId> {
    name.parse().map_err(err)
}

/// Converts any serializable value to plain Python objects via JSON.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Initial state for `env` under `seed`.
#[pyfunction]
#[pyo3(signature = (env, seed=0))]
fn reset(env: &str, seed: u64) -> PyResult<Vec<f64>> {
    Ok(env::reset(env_id(env)?, seed))
}

/// One transition: `(next_state, reward, terminated, truncated)`.
#[pyfunction]
#[pyo3(signature = (env, state, action, step_index=0))]
fn step(env: &str, state: Vec<f64>, action: usize, step_index: usize) -> PyResult<(Vec<f64>, f64, bool, bool)> {
    let r = env::step(env_id(env)?, &state, action, step_index).map_err(err)?;
    Ok((r.next_state, r.reward, r.terminated, r.truncated))
}

/// `{state_dim, action_count, state_bounds, max_episode_steps}`.
#[pyfunction]
fn spec<'py>(py: Python<'py>, env: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &env_spec(env_id(env)?))
}

/// Cell index of `state` on a uniform grid over the environment bounds.
#[pyfunction]
#[pyo3(signature = (env, state, cells=15))]
fn discretize(env: &str, state: Vec<f64>, cells: usize) -> PyResult<usize> {
    let grid = GridSpec::uniform(&env_spec(env_id(env)?), cells).map_err(err)?;
    Ok(grid.discretize(&state))
}

#[pyclass(module = "ckil")]
struct Environment {
    inner: env::Environment,
}

#[pymethods]
impl Environment {
    #[new]
    #[pyo3(signature = (env, seed=0))]
    fn new(env: &str, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: env::Environment::new(env_id(env)?, seed) })
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed).to_vec()
    }

    fn step(&mut self, action: usize) -> PyResult<(Vec<f64>, f64, bool, bool)> {
        let r = self.inner.step(action).map_err(err)?;
        Ok((r.next_state, r.reward, r.terminated, r.truncated))
    }

    #[getter]
    fn state(&self) -> Vec<f64> {
        self.inner.state().to_vec()
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.is_done()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }
}

/// A set of demonstration episodes.
#[pyclass(module = "ckil")]
struct Dataset {
    env: EnvId,
    episodes: Vec<Trajectory>,
}

#[pymethods]
impl Dataset {
    /// Rolls out the scripted expert for `env`; `epsilon` mixes in uniform actions.
    #[staticmethod]
    #[pyo3(signature = (env, n_traj, seed=0, epsilon=0.0))]
    fn generate(env: &str, n_traj: usize, seed: u64, epsilon: f64) -> PyResult<Self> {
        let id = env_id(env)?;
        let expert = ScriptedExpert::new(id, epsilon).map_err(err)?;
        Ok(Self { env: id, episodes: demos::generate_dataset(id, &expert, n_traj, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(env: &str, path: PathBuf) -> PyResult<Self> {
        Ok(Self { env: env_id(env)?, episodes: demos::load_dataset(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        demos::save_dataset(&self.episodes, &path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.episodes.len()
    }

    #[getter]
    fn env(&self) -> &'static str {
        self.env.as_str()
    }

    /// Episode `i` as `(states, actions)`.
    fn episode(&self, i: usize) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let t = self.episodes.get(i).ok_or_else(|| PyValueError::new_err(format!("no episode {i}")))?;
        Ok(t.steps.iter().cloned().unzip())
    }

    /// Number of `(s, a, s', a')` tuples the episodes yield.
    fn tuple_count(&self) -> usize {
        demos::extract_tuples(&self.episodes).len()
    }
}

fn estimator(env: EnvId, kind: &str, h: (f64, f64, f64), action_dist: &str, cells: usize) -> PyResult<eval::Estimator> {
    let spec = env_spec(env);
    match kind {
        "kernel" => {
            let mode: ActionDistance = action_dist.parse().map_err(err)?;
            let cfg = KernelConfig::new(h.0, h.1, h.2, mode, spec.state_dim, spec.action_count).map_err(err)?;
            Ok(eval::Estimator::Kernel(cfg))
        }
        "counting" => Ok(eval::Estimator::Counting { cells }),
        other => Err(PyValueError::new_err(format!("unknown estimator `{other}`"))),
    }
}

/// `(p_hat, t_hat)` at every tuple of the standardized buffer built from `dataset`.
#[pyfunction]
#[pyo3(signature = (dataset, estimator="kernel", h1=0.25, h2=0.25, h3=0.25, action_dist="exact_match", grid_cells=15))]
fn estimate(
    dataset: &Dataset,
    estimator: &str,
    h1: f64,
    h2: f64,
    h3: f64,
    action_dist: &str,
    grid_cells: usize,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let est = self::estimator(dataset.env, estimator, (h1, h2, h3), action_dist, grid_cells)?;
    let grid = est.grid(dataset.env).map_err(err)?;
    let buffer = demos::to_buffer_with(&dataset.episodes, env_spec(dataset.env).action_count, true, grid.clone()).map_err(err)?;
    let cache = match (&est, grid) {
        (eval::Estimator::Kernel(cfg), _) => precompute_densities(&buffer, cfg),
        (_, Some(g)) => precompute_counts(&buffer, &g),
        _ => unreachable!(),
    }
    .map_err(err)?;
    Ok((cache.p_hat, cache.t_hat))
}

/// A trained policy with the observation transform it was fitted on.
#[pyclass(module = "ckil")]
struct Policy {
    env: EnvId,
    inner: LearnedPolicy,
    history: Vec<LossRecord>,
    stop: StopReason,
}

fn mode(name: &str) -> PyResult<EvalMode> {
    name.parse().map_err(err)
}

#[pymethods]
impl Policy {
    #[getter]
    fn env(&self) -> &'static str {
        self.env.as_str()
    }

    /// Action distribution at a raw environment state.
    fn action_probs(&self, state: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(action_probs(&self.inner.params, &self.inner.preprocessor.features(&state)).map_err(err)?.probs)
    }

    #[pyo3(signature = (state, greedy=false, seed=0))]
    fn act(&self, state: Vec<f64>, greedy: bool, seed: u64) -> PyResult<usize> {
        let dist = action_probs(&self.inner.params, &self.inner.preprocessor.features(&state)).map_err(err)?;
        Ok(if greedy { argmax_action(&dist) } else { sample_action(&dist, &mut rng_from(seed)) })
    }

    /// `{mean_return, std_return, n_episodes, returns, policy_mode}`.
    #[pyo3(signature = (episodes=300, mode="sampled", seed=0))]
    fn evaluate<'py>(&self, py: Python<'py>, episodes: usize, mode: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let report = eval::evaluate(self.env, &Actor::Learned(&self.inner, self::mode(mode)?), episodes, seed).map_err(err)?;
        to_py(py, &report)
    }

    /// Per-iteration loss records.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.history)
    }

    #[getter]
    fn stop_reason<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.stop)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.len()
    }
}

/// Fits a CKIL (`algo="ckil"`) or behavioral-cloning (`algo="bc"`) policy.
#[pyfunction]
#[pyo3(signature = (
    dataset, algo="ckil", lam=0.1, lr=1e-3, batch=256, iters=20000, patience=2000, width=64, seed=0,
    estimator="kernel", h1=0.25, h2=0.25, h3=0.25, action_dist="exact_match", grid_cells=15
))]
#[allow(clippy::too_many_arguments)]
fn train(
    dataset: &Dataset,
    algo: &str,
    lam: f64,
    lr: f64,
    batch: usize,
    iters: usize,
    patience: usize,
    width: usize,
    seed: u64,
    estimator: &str,
    h1: f64,
    h2: f64,
    h3: f64,
    action_dist: &str,
    grid_cells: usize,
) -> PyResult<Policy> {
    let cfg = TrainConfig {
        lambda: lam,
        learning_rate: lr,
        batch_size: batch,
        max_iters: iters,
        patience,
        width,
        seed,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(err)?;
    let est = self::estimator(dataset.env, estimator, (h1, h2, h3), action_dist, grid_cells)?;
    let (buffer, outcome): (TupleBuffer, _) = match algo {
        "ckil" => {
            let (buffer, cache) = est.prepare(dataset.env, &dataset.episodes).map_err(err)?;
            let out = train_ckil(&buffer, &cache, &cfg).map_err(err)?;
            (buffer, out)
        }
        "bc" => {
            let grid = est.grid(dataset.env).map_err(err)?;
            let buffer =
                demos::to_buffer_with(&dataset.episodes, env_spec(dataset.env).action_count, true, grid).map_err(err)?;
            let out = train_bc(&buffer, &cfg).map_err(err)?;
            (buffer, out)
        }
        other => return Err(PyValueError::new_err(format!("unknown algorithm `{other}` (expected ckil or bc)"))),
    };
    Ok(Policy {
        env: dataset.env,
        inner: LearnedPolicy::new(outcome.params, &buffer),
        history: outcome.history,
        stop: outcome.stop,
    })
}

/// Evaluates the scripted expert (`baseline="expert"`) or uniform random actions.
#[pyfunction]
#[pyo3(signature = (env, baseline="expert", episodes=300, epsilon=0.0, seed=0))]
fn evaluate_baseline<'py>(
    py: Python<'py>,
    env: &str,
    baseline: &str,
    episodes: usize,
    epsilon: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let id = env_id(env)?;
    let actor = match baseline {
        "expert" => Actor::Expert(ScriptedExpert::new(id, epsilon).map_err(err)?),
        "random" => Actor::Random,
        other => return Err(PyValueError::new_err(format!("unknown baseline `{other}`"))),
    };
    to_py(py, &eval::evaluate(id, &actor, episodes, seed).map_err(err)?)
}

/// Tuned per-environment settings used by the reproduction sweeps.
#[pyfunction]
fn preset<'py>(py: Python<'py>, env: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &ckil::experiments::preset(env_id(env)?))
}

/// Mean absolute error of the kernel transition estimate for each `n`.
#[pyfunction]
#[pyo3(signature = (n=vec![100, 1000, 10000], sigma=None, h_ref=None, replicates=5, seed=0))]
fn consistency_probe<'py>(
    py: Python<'py>,
    n: Vec<usize>,
    sigma: Option<f64>,
    h_ref: Option<f64>,
    replicates: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let d = SyntheticMdp::default();
    let mdp = SyntheticMdp { sigma: sigma.unwrap_or(d.sigma), ..d };
    let r = BandwidthRule::default();
    let rule = BandwidthRule { h_ref: h_ref.unwrap_or(r.h_ref), ..r };
    to_py(py, &eval::consistency_probe(&mdp, &n, &rule, replicates, seed).map_err(err)?)
}

#[pymodule]
#[pyo3(name = "ckil")]
pub fn ckil_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(reset, m)?)?;
    m.add_function(wrap_pyfunction!(step, m)?)?;
    m.add_function(wrap_pyfunction!(spec, m)?)?;
    m.add_function(wrap_pyfunction!(discretize, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_probe, m)?)?;
    m.add_class::<Environment>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Policy>()?;
    Ok(())
}
