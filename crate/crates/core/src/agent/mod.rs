//! The outer loop: train the interpolator on the memory, act with it, improve
//! what was experienced, store it. Also hosts the REINFORCE comparator.

mod checkpoint;
mod config;
mod reinforce;
mod trainer;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    InterpolatorKind, MemorySection, ReinforceSection, RunConfig, RunSection, TrainSection,
};
pub use reinforce::ReinforceRunner;
pub use trainer::{context_seed, train_leave_one_out};

use crate::env::{make_env, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::harness::percentile;
use crate::improve::{aggregate_sigma, annotate_episode, fit_value, ValueNet};
use crate::memory::{
    initial_context, sample_context, ContextPoint, Episode, Experience, ReplayMemory,
};
use crate::mki::{MkiModel, PreparedMki};
use crate::nn::{Optimizer, Trainable};
use crate::np::NpModel;
use crate::policy::GaussianStats;
use crate::rng::{self, derive_seed, Stream};

/// Everything reported about one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: u64,
    /// Undiscounted return of the training rollout (mean when several).
    pub episode_return: f64,
    pub episode_len: usize,
    pub eval_returns: Vec<f64>,
    pub eval_mean: f64,
    pub eval_p20: f64,
    pub eval_p80: f64,
    /// `None` when no improvement direction existed.
    pub eta: Option<f64>,
    /// Episode-mean KL of the improved means (0 for REINFORCE).
    pub mean_kl: f64,
    /// Supervised loss per (epoch, held-out episode).
    pub loss_trace: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Fingerprint of the parameters that produced the training rollout.
    pub model_hash: u64,
    pub wall_clock: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Sample actions from the behavior Gaussian.
    Sample,
    /// Act with the mean, drawing no noise.
    Mean,
}

/// Runs one episode of at most `horizon` steps. The start state comes from
/// the `Env` stream and action noise from the `Policy` stream of `seed`.
/// Stored actions are the unclipped samples; the environment clips.
pub fn rollout<F>(
    env: &dyn Environment,
    mut policy: F,
    horizon: usize,
    seed: u64,
    mode: RolloutMode,
) -> Result<Episode>
where
    F: FnMut(&[f64]) -> Result<GaussianStats>,
{
    let mut state = env.reset(derive_seed(seed, Stream::Env, 0));
    let mut noise = rng::stream(seed, Stream::Policy, 0);
    let mut experiences = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let behavior = policy(&state)?;
        let action = behavior.act(&mut noise, mode == RolloutMode::Mean);
        let tr = env.step(&state, &action)?;
        experiences.push(Experience::new(state, action, behavior, tr.reward));
        state = tr.next_state;
        if tr.terminal {
            break;
        }
    }
    Ok(Episode::new(experiences, 0))
}

/// The learned interpolator.
#[derive(Clone, Debug, PartialEq)]
pub enum Interpolator {
    Np(NpModel),
    Mki(MkiModel),
}

impl Interpolator {
    pub fn new(config: &RunConfig, spec: &EnvSpec, seed: u64) -> Result<Self> {
        Ok(match config.run.interpolator {
            InterpolatorKind::Np => Interpolator::Np(NpModel::new(
                spec.state_dim,
                spec.action_dim,
                &config.np,
                seed,
            )?),
            InterpolatorKind::Mki => {
                Interpolator::Mki(MkiModel::new(spec.state_dim, &config.mki, seed)?)
            }
        })
    }

    pub fn kind(&self) -> InterpolatorKind {
        match self {
            Interpolator::Np(_) => InterpolatorKind::Np,
            Interpolator::Mki(_) => InterpolatorKind::Mki,
        }
    }

    /// Supervised loss (ELBO for NP, MSE for MKI) and its gradient.
    pub fn loss_and_grad(
        &self,
        context: &[ContextPoint<'_>],
        targets: &[ContextPoint<'_>],
        z_seed: u64,
    ) -> Result<(f64, Vec<f64>)> {
        match self {
            Interpolator::Np(m) => {
                let l = m.elbo_loss(context, targets, z_seed)?;
                Ok((l.loss, l.grad))
            }
            Interpolator::Mki(m) => m.loss(context, targets),
        }
    }

    /// Freezes the model on a context for acting.
    pub fn prepare<'a>(&'a self, context: &[ContextPoint<'a>]) -> Result<PreparedInterpolator<'a>> {
        Ok(match self {
            Interpolator::Np(m) => PreparedInterpolator::Np {
                model: m,
                z: m.encode(context)?.mean,
            },
            Interpolator::Mki(m) => PreparedInterpolator::Mki(m.prepare(context)?),
        })
    }
}

impl Trainable for Interpolator {
    fn num_params(&self) -> usize {
        match self {
            Interpolator::Np(m) => m.num_params(),
            Interpolator::Mki(m) => m.num_params(),
        }
    }

    fn flat_params(&self) -> Vec<f64> {
        match self {
            Interpolator::Np(m) => m.flat_params(),
            Interpolator::Mki(m) => m.flat_params(),
        }
    }

    fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        match self {
            Interpolator::Np(m) => m.set_flat_params(values),
            Interpolator::Mki(m) => m.set_flat_params(values),
        }
    }
}

/// An interpolator conditioned on a fixed context.
pub enum PreparedInterpolator<'a> {
    /// NP acting uses the posterior mean of `z`.
    Np {
        model: &'a NpModel,
        z: Vec<f64>,
    },
    Mki(PreparedMki<'a, 'a>),
}

impl PreparedInterpolator<'_> {
    /// Behavior Gaussian at `state`. The std is the global `sigma`, or the
    /// NP's own predictive std floored at `sigma_min` when `np_sigma` is set.
    pub fn behavior(
        &self,
        state: &[f64],
        sigma: &[f64],
        sigma_min: &[f64],
        np_sigma: bool,
    ) -> Result<GaussianStats> {
        match self {
            PreparedInterpolator::Np { model, z } => {
                let out = model.decode(z, state)?;
                let std = if np_sigma {
                    out.std
                        .iter()
                        .zip(sigma_min)
                        .map(|(s, m)| s.max(*m))
                        .collect()
                } else {
                    sigma.to_vec()
                };
                GaussianStats::new(out.mean, std)
            }
            PreparedInterpolator::Mki(p) => GaussianStats::new(p.predict(state)?, sigma.to_vec()),
        }
    }
}

/// Summary statistics of evaluation returns.
pub(crate) fn eval_stats(returns: &[f64]) -> (f64, f64, f64) {
    let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
    (mean, percentile(returns, 0.2), percentile(returns, 0.8))
}

pub(crate) fn resolve_horizon(config: &RunConfig, spec: &EnvSpec) -> usize {
    if config.run.horizon == 0 {
        spec.max_steps
    } else {
        config.run.horizon
    }
}

pub(crate) fn new_value_net(
    config: &RunConfig,
    state_dim: usize,
    horizon: usize,
    seed: u64,
) -> ValueNet {
    let init = derive_seed(seed, Stream::Init, 3);
    if config.train.value_time_feature {
        ValueNet::with_horizon(state_dim, &config.train.value_hidden, horizon, init)
    } else {
        ValueNet::new(state_dim, &config.train.value_hidden, init)
    }
}

/// The most recent episodes' `(value input, return)` pairs, refit every
/// iteration.
#[derive(Clone, Debug, Default)]
pub(crate) struct ValueReplay {
    capacity: usize,
    episodes: std::collections::VecDeque<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl ValueReplay {
    pub(crate) fn new(capacity: usize) -> Self {
        ValueReplay {
            capacity: capacity.max(1),
            episodes: Default::default(),
        }
    }

    pub(crate) fn push(&mut self, value: &ValueNet, episode: &Episode, returns: Vec<f64>) {
        let inputs = episode
            .experiences()
            .iter()
            .enumerate()
            .map(|(t, e)| value.input(&e.state, t))
            .collect();
        self.episodes.push_back((inputs, returns));
        while self.episodes.len() > self.capacity {
            self.episodes.pop_front();
        }
    }

    pub(crate) fn fit(
        &self,
        value: &mut ValueNet,
        config: &RunConfig,
        optimizer: &mut Optimizer,
        seed: u64,
    ) -> Result<()> {
        let inputs: Vec<&[f64]> = self
            .episodes
            .iter()
            .flat_map(|(x, _)| x.iter().map(|v| v.as_slice()))
            .collect();
        let targets: Vec<f64> = self
            .episodes
            .iter()
            .flat_map(|(_, q)| q.iter().copied())
            .collect();
        fit_value(
            value,
            &inputs,
            &targets,
            config.train.value_epochs,
            config.train.value_batch_size,
            optimizer,
            seed,
        )?;
        Ok(())
    }
}

/// Start states of the evaluation rollouts: the same for every iteration.
pub(crate) fn eval_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|i| derive_seed(seed, Stream::Eval, i))
        .collect()
}

const ACT_SLOT: u64 = 0xFF_FFFF;
const EVAL_SLOT: u64 = 0xFF_FFFE;

/// State of one IMeL run.
pub struct ImelRunner {
    pub config: RunConfig,
    pub seed: u64,
    pub env: Box<dyn Environment>,
    pub memory: ReplayMemory,
    pub model: Interpolator,
    pub value: ValueNet,
    pub sigma: Vec<f64>,
    sigma_min: Vec<f64>,
    horizon: usize,
    model_opt: Optimizer,
    value_opt: Optimizer,
    value_replay: ValueReplay,
    /// Iterations completed.
    pub k: u64,
}

impl ImelRunner {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let env = make_env(&config.run.env)?;
        let spec = env.spec().clone();
        let sigma = vec![config.run.sigma; spec.action_dim];
        let sigma_min: Vec<f64> = spec.action_range().iter().map(|r| 0.05 * r).collect();
        let mean = config
            .memory
            .initial_mean
            .clone()
            .unwrap_or_else(|| vec![0.0; spec.action_dim]);
        let std = config
            .memory
            .initial_std
            .clone()
            .unwrap_or_else(|| sigma.clone());
        let mut memory = initial_context(
            &spec,
            config.memory.initial_points,
            &mean,
            &std,
            config.memory.capacity(),
            seed,
        )?;
        memory.split_initial(config.memory.initial_splits);
        let model = Interpolator::new(config, &spec, seed)?;
        let horizon = resolve_horizon(config, &spec);
        let value = new_value_net(config, spec.state_dim, horizon, seed);
        let model_opt = Optimizer::new(
            config.train.optimizer,
            config.train.learning_rate,
            model.num_params(),
        );
        let value_opt = Optimizer::adam(config.train.value_learning_rate, value.num_params());
        Ok(ImelRunner {
            horizon,
            config: config.clone(),
            seed,
            env,
            memory,
            model,
            value,
            sigma,
            sigma_min,
            model_opt,
            value_opt,
            value_replay: ValueReplay::new(config.train.value_episodes),
            k: 0,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        self.env.spec()
    }

    fn policy_context(&self, slot: u64) -> Result<Vec<ContextPoint<'_>>> {
        let k = self.k + 1;
        sample_context(
            &self.memory,
            self.config.memory.policy_context_points,
            context_seed(self.seed, k, slot),
        )
    }

    /// One iteration: train on the current memory, roll out with the trained
    /// model, annotate, fit the value net, store, evaluate.
    pub fn iteration(&mut self) -> Result<IterationRecord> {
        let start = Instant::now();
        let k = self.k + 1;
        let loss_trace = train_leave_one_out(
            &mut self.model,
            &self.memory,
            self.config.train.epochs,
            &mut self.model_opt,
            self.config.memory.max_context_points,
            self.seed,
            k,
        )?;
        let model_hash = self.model.fingerprint();

        let n_eps = self.config.run.episodes_per_iteration;
        let mut episodes = Vec::with_capacity(n_eps);
        {
            let context = self.policy_context(ACT_SLOT)?;
            let prepared = self.model.prepare(&context)?;
            for e in 0..n_eps as u64 {
                let episode_seed = derive_seed(self.seed, Stream::Policy, (k << 8) | e);
                let mut ep = rollout(
                    self.env.as_ref(),
                    |s| {
                        prepared.behavior(s, &self.sigma, &self.sigma_min, self.config.run.np_sigma)
                    },
                    self.horizon,
                    episode_seed,
                    RolloutMode::Sample,
                )?;
                ep.iteration = k;
                ep.model_hash = model_hash;
                episodes.push(ep);
            }
        }

        let mut eta = None;
        let mut kl = 0.0;
        let mut sigma_star = Vec::new();
        for ep in &mut episodes {
            let imp = annotate_episode(ep, &self.value, &self.config.improve)?;
            if imp.eta.is_none() {
                log::warn!("iteration {k}: no improvement direction; stored means unchanged");
            }
            eta = eta.or(imp.eta);
            kl += imp.mean_kl / n_eps as f64;
            sigma_star.extend(imp.sigma_star);
        }

        for ep in &episodes {
            let returns = ep
                .experiences()
                .iter()
                .map(|e| e.annotation().expect("annotated").mc_return)
                .collect();
            self.value_replay.push(&self.value, ep, returns);
        }
        self.value_replay.fit(
            &mut self.value,
            &self.config,
            &mut self.value_opt,
            derive_seed(self.seed, Stream::ValueFit, k),
        )?;

        if self.config.improve.update_sigma && !sigma_star.is_empty() {
            let upd = aggregate_sigma(&sigma_star, &self.sigma_min);
            if upd.clamped {
                log::warn!("iteration {k}: sigma clamped at its floor");
            }
            self.sigma = upd.sigma;
        }

        let episode_return =
            episodes.iter().map(|e| e.episode_return()).sum::<f64>() / n_eps as f64;
        let episode_len = episodes.iter().map(|e| e.len()).sum::<usize>() / n_eps;
        for ep in episodes {
            self.memory.push_episode(ep)?;
        }
        self.k = k;

        let eval_returns = self.evaluate()?;
        let (eval_mean, eval_p20, eval_p80) = eval_stats(&eval_returns);
        Ok(IterationRecord {
            k,
            episode_return,
            episode_len,
            eval_returns,
            eval_mean,
            eval_p20,
            eval_p80,
            eta,
            mean_kl: kl,
            loss_trace,
            sigma: self.sigma.clone(),
            model_hash,
            wall_clock: start.elapsed().as_secs_f64(),
        })
    }

    /// Deterministic-mean rollouts from the fixed evaluation start states,
    /// conditioned on the current memory.
    pub fn evaluate(&self) -> Result<Vec<f64>> {
        let context = sample_context(
            &self.memory,
            self.config.memory.policy_context_points,
            context_seed(self.seed, self.k, EVAL_SLOT),
        )?;
        let prepared = self.model.prepare(&context)?;
        eval_seeds(self.seed, self.config.run.eval_episodes)
            .into_iter()
            .map(|s| {
                rollout(
                    self.env.as_ref(),
                    |x| {
                        prepared.behavior(x, &self.sigma, &self.sigma_min, self.config.run.np_sigma)
                    },
                    self.horizon,
                    s,
                    RolloutMode::Mean,
                )
                .map(|ep| ep.episode_return())
            })
            .collect()
    }

    pub fn save_checkpoint(&self, dir: &std::path::Path) -> Result<()> {
        checkpoint::save(self, dir)
    }

    pub fn load_checkpoint(dir: &std::path::Path) -> Result<Self> {
        checkpoint::load(dir)
    }
}

/// The three compared algorithms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "imel-np")]
    ImelNp,
    #[serde(rename = "imel-mki")]
    ImelMki,
    #[serde(rename = "reinforce")]
    Reinforce,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::ImelNp, Algorithm::ImelMki, Algorithm::Reinforce];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ImelNp => "imel-np",
            Algorithm::ImelMki => "imel-mki",
            Algorithm::Reinforce => "reinforce",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{name}`")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Records of a finished (or truncated) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<IterationRecord>,
    /// Set when training diverged and the run was cut short.
    pub diverged: Option<String>,
}

/// Runs `config.run.iterations` iterations of `algorithm`, handing every
/// record to `observe` as it is produced. A checkpoint is written every
/// `checkpoint_every` iterations when a directory is given.
pub fn run_algorithm(
    algorithm: Algorithm,
    config: &RunConfig,
    seed: u64,
    checkpoint: Option<(&std::path::Path, usize)>,
    mut observe: impl FnMut(&IterationRecord),
) -> Result<RunOutcome> {
    let mut records = Vec::with_capacity(config.run.iterations);
    let mut diverged = None;
    match algorithm {
        Algorithm::ImelNp | Algorithm::ImelMki => {
            let mut cfg = config.clone();
            cfg.run.interpolator = if algorithm == Algorithm::ImelNp {
                InterpolatorKind::Np
            } else {
                InterpolatorKind::Mki
            };
            let mut runner = ImelRunner::new(&cfg, seed)?;
            for _ in 0..cfg.run.iterations {
                match runner.iteration() {
                    Ok(rec) => {
                        observe(&rec);
                        records.push(rec);
                    }
                    Err(e @ (Error::TrainingDiverged(_) | Error::Diverged(_))) => {
                        log::warn!("seed {seed}: {e}; run truncated");
                        diverged = Some(e.to_string());
                        break;
                    }
                    Err(e) => return Err(e),
                }
                if let Some((dir, every)) = checkpoint {
                    if every > 0 && runner.k % every as u64 == 0 {
                        runner.save_checkpoint(&dir.join(format!("ckpt_{:05}", runner.k)))?;
                    }
                }
            }
        }
        Algorithm::Reinforce => {
            let mut runner = ReinforceRunner::new(config, seed)?;
            for _ in 0..config.run.iterations {
                match runner.iteration() {
                    Ok(rec) => {
                        observe(&rec);
                        records.push(rec);
                    }
                    Err(e @ (Error::TrainingDiverged(_) | Error::Diverged(_))) => {
                        log::warn!("seed {seed}: {e}; run truncated");
                        diverged = Some(e.to_string());
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(RunOutcome { records, diverged })
}
