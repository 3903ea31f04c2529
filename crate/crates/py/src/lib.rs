//! Python bindings for `energy_policy`.
//!
//! Build with `cargo build -p energy-policy-py --release --features extension-module`
//! and import the resulting shared library as `energy_policy`.

use std::path::PathBuf;

use energy_policy::cli::RunConfig;
use energy_policy::data::{self, DemoDataset, ModePolicy, NormKind};
use energy_policy::energy::{self, DiscreteDistribution};
use energy_policy::env::{EnvName, EnvSpec};
use energy_policy::policy::{AdaLnMode, EnergyPolicyModel, HeadKind, ObservationWindow, PolicyConfig};
use energy_policy::tensor::{NoiseDist, Rng};
use energy_policy::train::{self as tr, TrainConfig};
use energy_policy::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Corrupt { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for energy_policy::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Demonstration episodes for one environment.
#[pyclass(name = "Dataset", module = "energy_policy", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(DemoDataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (env, episodes, seed=0, mode_policy="balanced", jitter=None))]
    fn generate(env: &str, episodes: usize, seed: u64, mode_policy: &str, jitter: Option<f64>) -> PyResult<Self> {
        let mut spec = EnvSpec::by_name(EnvName::parse(env).py()?);
        if let Some(j) = jitter {
            spec.expert_jitter = j;
        }
        let policy = ModePolicy::parse(mode_policy).py()?;
        data::generate_dataset(&spec, episodes, seed, policy).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        data::dataset_load(path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::dataset_save(&self.0, path).py()
    }

    #[getter]
    fn env(&self) -> &'static str {
        self.0.env.name.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.0.total_steps()
    }

    /// Episodes per mode; the last entry counts unlabeled episodes.
    fn mode_histogram(&self) -> Vec<usize> {
        self.0.mode_histogram()
    }

    /// `(observations, actions)` of episode `i` in raw units.
    fn episode(&self, i: usize) -> PyResult<(Rows, Rows)> {
        let ep = self
            .0
            .episodes
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("episode {i} out of range")))?;
        Ok((ep.observations.clone(), ep.actions.clone()))
    }

    fn __len__(&self) -> usize {
        self.0.episodes.len()
    }
}

/// A policy network (backbone plus energy, l2 or ddpm head).
#[pyclass(name = "Policy", module = "energy_policy")]
struct PyPolicy(EnergyPolicyModel);

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (d_obs=2, d_action=2, head="energy", pred_horizon=16, exec_horizon=8, d_model=64, head_width=128, alpha=1.0, noise="u05", adaln_mode="adaln", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d_obs: usize,
        d_action: usize,
        head: &str,
        pred_horizon: usize,
        exec_horizon: usize,
        d_model: usize,
        head_width: usize,
        alpha: f64,
        noise: &str,
        adaln_mode: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = PolicyConfig {
            d_obs,
            d_action,
            head_kind: HeadKind::parse(head).py()?,
            pred_horizon,
            exec_horizon,
            d_model,
            head_width,
            alpha,
            noise_dist: NoiseDist::parse(noise).py()?,
            adaln_mode: AdaLnMode::parse(adaln_mode).py()?,
            init_seed: seed,
            ..Default::default()
        };
        EnergyPolicyModel::new(cfg).py().map(Self)
    }

    /// Build from a TOML document in the CLI config format (`[policy]` table).
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let rc = RunConfig::from_toml(text).py()?;
        EnergyPolicyModel::new(rc.policy).py().map(Self)
    }

    fn count_params(&self) -> usize {
        self.0.count_params()
    }

    #[getter]
    fn head(&self) -> &'static str {
        self.0.head_kind().name()
    }

    fn config_toml(&self) -> String {
        let rc = RunConfig {
            policy: self.0.config().clone(),
            ..Default::default()
        };
        rc.to_toml()
    }

    /// Sample one action chunk for a normalized observation window.
    #[pyo3(signature = (window, seed=0))]
    fn predict_chunk(&self, window: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let w = ObservationWindow::new(&window).py()?;
        let chunk = self.0.predict_chunk(&w, &mut Rng::new(seed)).py()?;
        Ok((0..chunk.horizon()).map(|t| chunk.row(t).to_vec()).collect())
    }

    /// `(backbone, head)` call counts since the last reset.
    fn call_counts(&self) -> (usize, usize) {
        let c = self.0.counts();
        (c.backbone, c.head)
    }

    fn reset_counts(&self) {
        self.0.reset_counts()
    }
}

/// Training loop state; resumable through checkpoints.
#[pyclass(name = "Trainer", module = "energy_policy")]
struct PyTrainer(tr::Trainer);

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (policy, dataset, epochs=200, batch_size=256, learning_rate=1e-4, seed=0))]
    fn new(
        policy: &PyPolicy,
        dataset: &PyDataset,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
            ..Default::default()
        };
        tr::Trainer::new(policy.0.clone(), &dataset.0, cfg).py().map(Self)
    }

    #[staticmethod]
    fn resume(ckpt: &PyCheckpoint, dataset: &PyDataset, epochs: usize) -> PyResult<Self> {
        let cfg = TrainConfig {
            epochs,
            ..ckpt.0.train.clone()
        };
        tr::Trainer::resume(&ckpt.0, &dataset.0, cfg).py().map(Self)
    }

    /// Run one epoch and return its mean loss.
    fn train_epoch(&mut self) -> PyResult<f64> {
        self.0.train_epoch().py()
    }

    /// Train to the configured epoch count; returns the full loss curve.
    fn run(&mut self) -> PyResult<Vec<f64>> {
        self.0.run(|_| Ok(())).py()?;
        Ok(self.0.loss_curve.iter().map(|r| r.mean_loss).collect())
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.0.epoch
    }

    fn checkpoint(&self) -> PyCheckpoint {
        PyCheckpoint(self.0.checkpoint())
    }

    fn policy(&self) -> PyPolicy {
        PyPolicy(self.0.model.clone())
    }
}

/// Saved policy with its normalization statistics and training state.
#[pyclass(name = "Checkpoint", module = "energy_policy")]
struct PyCheckpoint(tr::Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        tr::checkpoint_load(path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        tr::checkpoint_save(&self.0, path).py()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.0.epoch
    }

    #[getter]
    fn env(&self) -> &'static str {
        self.0.env.name.as_str()
    }

    fn policy(&self) -> PyResult<PyPolicy> {
        self.0.model().py().map(PyPolicy)
    }

    fn loss_curve(&self) -> Vec<f64> {
        self.0.loss_curve.iter().map(|r| r.mean_loss).collect()
    }

    fn normalize_obs(&self, obs: Vec<f64>) -> Vec<f64> {
        self.0.norm_stats.normalize(&obs, NormKind::Obs)
    }

    fn denormalize_action(&self, action: Vec<f64>) -> Vec<f64> {
        self.0.norm_stats.denormalize(&action, NormKind::Action)
    }

    /// Roll the policy out `episodes` times; returns the success rate.
    #[pyo3(signature = (episodes=50, seed=0))]
    fn evaluate(&self, episodes: usize, seed: u64) -> PyResult<f64> {
        let model = self.0.model().py()?;
        let mut p = tr::ModelPolicy::new(&model, self.0.norm_stats.clone());
        Ok(tr::evaluate_success(&mut p, &self.0.env, episodes, seed).py()?.success_rate)
    }

    /// Mode counts from repeated rollouts off the fixed start.
    #[pyo3(signature = (samples=50, seed=0))]
    fn coverage<'py>(&self, py: Python<'py>, samples: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let model = self.0.model().py()?;
        let mut p = tr::ModelPolicy::new(&model, self.0.norm_stats.clone());
        let c = tr::mode_coverage(&mut p, &self.0.env, samples, seed).py()?;
        let d = PyDict::new(py);
        for (m, n) in c.counts.iter().enumerate() {
            d.set_item(self.0.env.mode_name(m), n)?;
        }
        d.set_item("unclassified", c.unclassified)?;
        d.set_item("success_rate", c.summary.success_rate)?;
        d.set_item("wall_hits", c.summary.wall_hits())?;
        Ok(d)
    }
}

/// Exact expected energy score of a discrete distribution at `y`.
#[pyfunction]
#[pyo3(signature = (atoms, weights, y, alpha=1.0))]
fn discrete_score(atoms: Vec<Vec<f64>>, weights: Vec<f64>, y: Vec<f64>, alpha: f64) -> PyResult<f64> {
    let p = DiscreteDistribution::new(atoms, weights).py()?;
    energy::closed_form_discrete_score(&p, &y, alpha).py()
}

/// Empirical energy score of samples against an observation.
#[pyfunction]
#[pyo3(signature = (samples, y, alpha=1.0))]
fn energy_score(samples: Vec<Vec<f64>>, y: Vec<f64>, alpha: f64) -> PyResult<f64> {
    energy::energy_score_empirical(&samples, &y, alpha).py()
}

/// Energy distance between two sample sets.
#[pyfunction]
#[pyo3(signature = (p, q, alpha=1.0))]
fn energy_distance(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>, alpha: f64) -> PyResult<f64> {
    energy::energy_distance(&p, &q, alpha).py()
}

#[pymodule]
#[pyo3(name = "energy_policy")]
fn energy_policy_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(discrete_score, m)?)?;
    m.add_function(wrap_pyfunction!(energy_score, m)?)?;
    m.add_function(wrap_pyfunction!(energy_distance, m)?)?;
    Ok(())
}
