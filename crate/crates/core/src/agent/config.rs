use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::improve::ImproveConfig;
use crate::mki::MkiConfig;
use crate::nn::OptimizerKind;
use crate::np::NpConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolatorKind {
    Np,
    Mki,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub env: String,
    pub interpolator: InterpolatorKind,
    /// Number of iterations `K`.
    pub iterations: usize,
    /// Rollout horizon `T`; 0 uses the environment's `max_steps`.
    pub horizon: usize,
    /// Global behavior standard deviation.
    pub sigma: f64,
    pub seed: u64,
    pub episodes_per_iteration: usize,
    pub eval_episodes: usize,
    /// Act with the NP's predictive std instead of the global sigma.
    pub np_sigma: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            env: "point_mass_1d".into(),
            interpolator: InterpolatorKind::Mki,
            iterations: 150,
            horizon: 0,
            sigma: 0.5,
            seed: 0,
            episodes_per_iteration: 1,
            eval_episodes: 5,
            np_sigma: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    /// Rollout episodes kept; 0 keeps everything.
    pub capacity: usize,
    /// Size `c` of the synthetic initial context.
    pub initial_points: usize,
    /// `mu0`; defaults to zeros.
    pub initial_mean: Option<Vec<f64>>,
    /// `sigma0`; defaults to the global sigma.
    pub initial_std: Option<Vec<f64>>,
    /// Pseudo-episodes the initial context is split into.
    pub initial_splits: usize,
    /// Context subsample size during training.
    pub max_context_points: usize,
    /// Context subsample size when acting.
    pub policy_context_points: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection {
            capacity: 64,
            initial_points: 32,
            initial_mean: None,
            initial_std: None,
            initial_splits: 4,
            max_context_points: 128,
            policy_context_points: 1024,
        }
    }
}

impl MemorySection {
    pub fn capacity(&self) -> Option<usize> {
        (self.capacity > 0).then_some(self.capacity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Leave-one-out passes over the memory per iteration.
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub value_hidden: Vec<usize>,
    pub value_epochs: usize,
    pub value_batch_size: usize,
    pub value_learning_rate: f64,
    /// Recent episodes the value net is refit on each iteration.
    pub value_episodes: usize,
    /// Feed the remaining-horizon fraction to the value net.
    pub value_time_feature: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 1,
            optimizer: OptimizerKind::Adam,
            learning_rate: 3e-4,
            value_hidden: vec![64, 64],
            value_epochs: 50,
            value_batch_size: 32,
            value_learning_rate: 1e-3,
            value_episodes: 4,
            value_time_feature: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReinforceSection {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub normalize_advantages: bool,
}

impl Default for ReinforceSection {
    fn default() -> Self {
        ReinforceSection {
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            normalize_advantages: true,
        }
    }
}

/// Full configuration of a single run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub memory: MemorySection,
    pub improve: ImproveConfig,
    pub train: TrainSection,
    pub np: NpConfig,
    pub mki: MkiConfig,
    pub reinforce: ReinforceSection,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} must be non-negative, got {v}"
        )))
    }
}

fn at_least_one(name: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be at least 1")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        at_least_one("run.iterations", self.run.iterations)?;
        at_least_one(
            "run.episodes_per_iteration",
            self.run.episodes_per_iteration,
        )?;
        at_least_one("run.eval_episodes", self.run.eval_episodes)?;
        positive("run.sigma", self.run.sigma)?;
        at_least_one("memory.initial_points", self.memory.initial_points)?;
        at_least_one("memory.initial_splits", self.memory.initial_splits)?;
        at_least_one("memory.max_context_points", self.memory.max_context_points)?;
        at_least_one(
            "memory.policy_context_points",
            self.memory.policy_context_points,
        )?;
        if let Some(s) = &self.memory.initial_std {
            for v in s {
                positive("memory.initial_std", *v)?;
            }
        }
        self.improve.validate()?;
        non_negative("train.learning_rate", self.train.learning_rate)?;
        non_negative("train.value_learning_rate", self.train.value_learning_rate)?;
        at_least_one("train.value_batch_size", self.train.value_batch_size)?;
        non_negative("reinforce.learning_rate", self.reinforce.learning_rate)?;
        at_least_one("np.r_dim", self.np.r_dim)?;
        at_least_one("np.z_dim", self.np.z_dim)?;
        positive("mki.kernel_scale", self.mki.kernel_scale)?;
        crate::env::make_env(&self.run.env)?;
        Ok(())
    }
}
