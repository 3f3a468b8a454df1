//! Non-parametric policy improvement.
//!
//! Each experience gets an improved mean `mu* = mu + eta * A * (a - mu) / sigma^2`,
//! one policy-gradient step on the behavior mean. The step size `eta` is
//! solved in closed form so that the episode-mean KL divergence between the
//! improved and the behavior Gaussians equals the budget `epsilon` exactly:
//!
//! ```text
//! eta = sqrt(2 T epsilon / sum_t sum_d A_t^2 (a_td - mu_td)^2 / sigma_td^6)
//! ```

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::memory::{Annotation, Episode};
use crate::nn::{self, Activation, NetParams, Optimizer, Trainable};
use crate::policy::kl_equal_sigma;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImproveConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Episode-mean KL budget.
    pub epsilon: f64,
    pub use_gae: bool,
    pub update_sigma: bool,
    /// Discount the first reward too (`q_t = sum_{l>=1} gamma^l r_{t+l}`).
    pub literal_return_index: bool,
}

impl Default for ImproveConfig {
    fn default() -> Self {
        ImproveConfig {
            gamma: 0.99,
            lambda: 0.95,
            epsilon: 0.05,
            use_gae: true,
            update_sigma: false,
            literal_return_index: false,
        }
    }
}

impl ImproveConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.gamma) {
            return Err(Error::Config(format!(
                "improve.gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if !in_unit(self.lambda) {
            return Err(Error::Config(format!(
                "improve.lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "improve.epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Discounted returns with the first reward undiscounted:
/// `q_t = sum_{l>=0} gamma^l r_{t+1+l}`, where `rewards[t]` is the reward
/// observed after action `a_t`.
pub fn mc_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// The variant that also discounts the first reward: `gamma * mc_returns`.
pub fn mc_returns_literal(rewards: &[f64], gamma: f64) -> Vec<f64> {
    mc_returns(rewards, gamma)
        .into_iter()
        .map(|q| gamma * q)
        .collect()
}

/// State-value network. Its raw output is de-normalized by `offset + scale * net(s)`;
/// refitting renormalizes the output layer so the represented function is
/// unchanged by a statistics update.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    pub params: NetParams,
    pub offset: f64,
    pub scale: f64,
    /// Output statistics have been set by a fit.
    pub calibrated: bool,
    /// When set, the net also sees the fraction of the horizon remaining.
    pub horizon: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    pub initial_mse: f64,
    pub final_mse: f64,
}

impl ValueNet {
    pub fn new(state_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let shapes = nn::mlp_shapes(state_dim, hidden, 1, Activation::Tanh, Activation::Identity);
        ValueNet {
            params: nn::init_params(&shapes, seed),
            offset: 0.0,
            scale: 1.0,
            calibrated: false,
            horizon: None,
        }
    }

    /// Value of `(state, time step)` for finite-horizon returns. The extra
    /// input is `1 - t / horizon`.
    pub fn with_horizon(state_dim: usize, hidden: &[usize], horizon: usize, seed: u64) -> Self {
        let mut net = ValueNet::new(state_dim + 1, hidden, seed);
        net.horizon = Some(horizon.max(1));
        net
    }

    /// Network input for `state` at step `t`.
    pub fn input(&self, state: &[f64], t: usize) -> Vec<f64> {
        let mut x = state.to_vec();
        if let Some(h) = self.horizon {
            x.push(1.0 - t as f64 / h as f64);
        }
        x
    }

    pub fn value_at(&self, state: &[f64], t: usize) -> Result<f64> {
        self.value(&self.input(state, t))
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.offset + self.scale * self.params.forward(state)?[0])
    }

    /// Changes the output statistics while preserving every prediction.
    pub fn renormalize(&mut self, offset: f64, scale: f64) {
        let (w0, b0) = self.params.last_layer_offsets();
        let ratio = self.scale / scale;
        for w in &mut self.params.values[w0..b0] {
            *w *= ratio;
        }
        let b = &mut self.params.values[b0];
        *b = (self.scale * *b + self.offset - offset) / scale;
        self.offset = offset;
        self.scale = scale;
    }

    /// Mean squared error in normalized units and its parameter gradient.
    pub fn loss_and_grad(&self, states: &[&[f64]], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len("value targets", states.len(), targets.len())?;
        let mut grad = vec![0.0; self.params.num_params()];
        let mut loss = 0.0;
        let n = states.len().max(1) as f64;
        for (s, q) in states.iter().zip(targets) {
            let trace = self.params.forward_trace(s)?;
            let err = trace.output()[0] - (q - self.offset) / self.scale;
            loss += err * err / n;
            self.params
                .backward_trace(&trace, &[2.0 * err / n], &mut grad)?;
        }
        Ok((loss, grad))
    }

    pub fn mse(&self, states: &[&[f64]], targets: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (s, q) in states.iter().zip(targets) {
            let e = self.value(s)? - q;
            acc += e * e;
        }
        Ok(acc / states.len().max(1) as f64)
    }
}

impl ValueNet {
    pub fn write_snapshot<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "imel-value 1")?;
        writeln!(w, "offset {:?}", self.offset)?;
        writeln!(w, "scale {:?}", self.scale)?;
        writeln!(w, "calibrated {}", u8::from(self.calibrated))?;
        writeln!(w, "horizon {}", self.horizon.unwrap_or(0))?;
        self.params.write_snapshot(w)
    }

    pub fn read_snapshot<R: std::io::BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = nn::SnapshotLines { inner: r };
        if lines.next_line()? != "imel-value 1" {
            return Err(Error::format("value snapshot", "bad header"));
        }
        let offset: f64 = lines.keyed("offset")?;
        let scale: f64 = lines.keyed("scale")?;
        let calibrated: u8 = lines.keyed("calibrated")?;
        let horizon: usize = lines.keyed("horizon")?;
        let params = NetParams::read_snapshot(lines.inner)?;
        check_len("value net output", 1, params.output_dim())?;
        Ok(ValueNet {
            params,
            offset,
            scale,
            calibrated: calibrated == 1,
            horizon: (horizon > 0).then_some(horizon),
        })
    }
}

impl Trainable for ValueNet {
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.params.values.clone()
    }

    fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        self.params.set_flat_params(values)
    }
}

/// Regresses the value net onto `(state, return)` pairs with minibatch
/// passes. Output statistics are reset to the batch mean/std first.
pub fn fit_value(
    net: &mut ValueNet,
    states: &[&[f64]],
    targets: &[f64],
    epochs: usize,
    batch_size: usize,
    optimizer: &mut Optimizer,
    seed: u64,
) -> Result<FitReport> {
    check_len("value targets", states.len(), targets.len())?;
    let initial_mse = net.mse(states, targets)?;
    if epochs == 0 || states.is_empty() {
        return Ok(FitReport {
            initial_mse,
            final_mse: initial_mse,
        });
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / n;
    let scale = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
    if net.calibrated {
        net.renormalize(mean, scale);
    } else {
        // start from the batch mean
        let (w0, _) = net.params.last_layer_offsets();
        net.params.values[w0..].iter_mut().for_each(|v| *v = 0.0);
        net.offset = mean;
        net.scale = scale;
        net.calibrated = true;
    }

    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut rng = rng::seeded(seed);
    let mut batch_states = Vec::with_capacity(batch_size);
    let mut batch_targets = Vec::with_capacity(batch_size);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            batch_states.clear();
            batch_targets.clear();
            for &i in chunk {
                batch_states.push(states[i]);
                batch_targets.push(targets[i]);
            }
            let (loss, grad) = net.loss_and_grad(&batch_states, &batch_targets)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged("value loss is not finite".into()));
            }
            net.params.apply_step(optimizer, &grad)?;
        }
    }
    let final_mse = net.mse(states, targets)?;
    log::debug!("value fit: mse {initial_mse:.4e} -> {final_mse:.4e}, target variance {var:.4e}");
    if !final_mse.is_finite() {
        return Err(Error::TrainingDiverged("value loss is not finite".into()));
    }
    Ok(FitReport {
        initial_mse,
        final_mse,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Advantages {
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Advantage estimates for one episode. The value after the last step is
/// taken as zero, both for GAE bootstrapping and for the plain
/// return-minus-baseline branch. `states[t]` is the state at step `t`, which
/// a time-aware value net also receives.
pub fn advantages(
    states: &[&[f64]],
    rewards: &[f64],
    value_net: &ValueNet,
    config: &ImproveConfig,
) -> Result<Advantages> {
    check_len("episode rewards", states.len(), rewards.len())?;
    let returns = if config.literal_return_index {
        mc_returns_literal(rewards, config.gamma)
    } else {
        mc_returns(rewards, config.gamma)
    };
    let values: Vec<f64> = states
        .iter()
        .enumerate()
        .map(|(t, s)| value_net.value_at(s, t))
        .collect::<Result<_>>()?;
    let advantages = if config.use_gae {
        gae(rewards, &values, config.gamma, config.lambda)
    } else {
        returns.iter().zip(&values).map(|(q, v)| q - v).collect()
    };
    Ok(Advantages {
        returns,
        advantages,
    })
}

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}` with
/// `delta_t = r_{t+1} + gamma V(s_{t+1}) - V(s_t)` and `V(s_T) = 0`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut out = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        out[t] = acc;
    }
    out
}

/// Closed-form step size meeting the KL budget on average over the episode.
pub fn step_size_eta<V: AsRef<[f64]>>(
    advantages: &[f64],
    actions: &[V],
    means: &[V],
    stds: &[V],
    epsilon: f64,
) -> Result<f64> {
    let t = advantages.len();
    check_len("eta actions", t, actions.len())?;
    check_len("eta means", t, means.len())?;
    check_len("eta stds", t, stds.len())?;
    let mut denom = 0.0;
    for i in 0..t {
        let (a, m, s) = (actions[i].as_ref(), means[i].as_ref(), stds[i].as_ref());
        let a2 = advantages[i] * advantages[i];
        for d in 0..a.len() {
            let dev = a[d] - m[d];
            denom += a2 * dev * dev / s[d].powi(6);
        }
    }
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::NoImprovementDirection);
    }
    let eta = (2.0 * t as f64 * epsilon / denom).sqrt();
    if !eta.is_finite() {
        return Err(Error::NoImprovementDirection);
    }
    Ok(eta)
}

/// `mu + eta * A * (a - mu) / sigma^2`, elementwise.
pub fn improved_mean(
    mean: &[f64],
    std: &[f64],
    action: &[f64],
    advantage: f64,
    eta: f64,
) -> Vec<f64> {
    mean.iter()
        .zip(std)
        .zip(action)
        .map(|((m, s), a)| m + eta * advantage * (a - m) / (s * s))
        .collect()
}

/// `sigma + eta * ((a - mu)^2 - sigma^2) / sigma^3`, elementwise. Carries no
/// advantage factor.
pub fn improved_sigma(std: &[f64], mean: &[f64], action: &[f64], eta: f64) -> Vec<f64> {
    std.iter()
        .zip(mean)
        .zip(action)
        .map(|((s, m), a)| s + eta * ((a - m) * (a - m) - s * s) / (s * s * s))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaUpdate {
    pub sigma: Vec<f64>,
    /// Some dimension fell below `sigma_min` and was floored.
    pub clamped: bool,
}

/// Per-dimension mean of per-step sigmas, floored at `sigma_min`.
pub fn aggregate_sigma(per_step: &[Vec<f64>], sigma_min: &[f64]) -> SigmaUpdate {
    let dim = sigma_min.len();
    let n = per_step.len().max(1) as f64;
    let mut sigma = vec![0.0; dim];
    for s in per_step {
        for (acc, v) in sigma.iter_mut().zip(s) {
            *acc += v / n;
        }
    }
    let mut clamped = false;
    for (s, floor) in sigma.iter_mut().zip(sigma_min) {
        if !(*s >= *floor) {
            if *s <= 0.0 {
                log::warn!("sigma update went non-positive ({s}); clamping to {floor}");
            }
            *s = *floor;
            clamped = true;
        }
    }
    SigmaUpdate { sigma, clamped }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Improvement {
    /// `None` when the episode offered no improvement direction; every
    /// improved mean then equals its behavior mean.
    pub eta: Option<f64>,
    /// Episode-mean KL between improved and behavior means.
    pub mean_kl: f64,
    /// Per-step improved sigmas (empty unless `update_sigma`).
    pub sigma_star: Vec<Vec<f64>>,
}

/// Writes return, advantage and improved mean into every experience of a
/// raw episode.
pub fn annotate_episode(
    episode: &mut Episode,
    value_net: &ValueNet,
    config: &ImproveConfig,
) -> Result<Improvement> {
    if episode.is_partially_annotated() {
        return Err(Error::AlreadyAnnotated);
    }
    if episode.is_empty() {
        return Err(Error::Config("cannot annotate an empty episode".into()));
    }
    let exps = episode.experiences();
    let states: Vec<&[f64]> = exps.iter().map(|e| e.state.as_slice()).collect();
    let rewards: Vec<f64> = exps.iter().map(|e| e.reward).collect();
    let adv = advantages(&states, &rewards, value_net, config)?;
    let actions: Vec<&[f64]> = exps.iter().map(|e| e.action.as_slice()).collect();
    let means: Vec<&[f64]> = exps.iter().map(|e| e.behavior.mean.as_slice()).collect();
    let stds: Vec<&[f64]> = exps.iter().map(|e| e.behavior.std.as_slice()).collect();
    let eta = match step_size_eta(&adv.advantages, &actions, &means, &stds, config.epsilon) {
        Ok(eta) => Some(eta),
        Err(Error::NoImprovementDirection) => None,
        Err(e) => return Err(e),
    };

    let mut kl_sum = 0.0;
    let mut sigma_star = Vec::new();
    let n = episode.len();
    for (t, e) in episode.experiences_mut().iter_mut().enumerate() {
        let mu_star = match eta {
            Some(eta) => improved_mean(
                &e.behavior.mean,
                &e.behavior.std,
                &e.action,
                adv.advantages[t],
                eta,
            ),
            None => e.behavior.mean.clone(),
        };
        kl_sum += kl_equal_sigma(&mu_star, &e.behavior.mean, &e.behavior.std);
        if config.update_sigma {
            if let Some(eta) = eta {
                sigma_star.push(improved_sigma(
                    &e.behavior.std,
                    &e.behavior.mean,
                    &e.action,
                    eta,
                ));
            }
        }
        e.annotate(Annotation {
            mc_return: adv.returns[t],
            advantage: adv.advantages[t],
            improved_mean: mu_star,
        })?;
    }
    episode.eta = eta;
    Ok(Improvement {
        eta,
        mean_kl: kl_sum / n as f64,
        sigma_star,
    })
}
