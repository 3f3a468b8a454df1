use std::time::Instant;

use super::{
    eval_seeds, eval_stats, new_value_net, resolve_horizon, rollout, IterationRecord, RolloutMode,
    RunConfig, ValueReplay,
};
use crate::env::{make_env, Environment};
use crate::error::Result;
use crate::improve::{advantages, ValueNet};
use crate::nn::{self, Activation, NetParams, Optimizer, Trainable};
use crate::policy::GaussianStats;
use crate::rng::{derive_seed, Stream};

/// Gaussian policy with an MLP mean and the global fixed std, trained by
/// REINFORCE with the same value baseline and advantage estimator as IMeL.
pub struct ReinforceRunner {
    pub config: RunConfig,
    pub seed: u64,
    pub env: Box<dyn Environment>,
    pub policy: NetParams,
    pub value: ValueNet,
    pub sigma: Vec<f64>,
    horizon: usize,
    policy_opt: Optimizer,
    value_opt: Optimizer,
    value_replay: ValueReplay,
    pub k: u64,
}

impl ReinforceRunner {
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let env = make_env(&config.run.env)?;
        let spec = env.spec().clone();
        let shapes = nn::mlp_shapes(
            spec.state_dim,
            &config.reinforce.hidden,
            spec.action_dim,
            Activation::Tanh,
            Activation::Identity,
        );
        let mut rng = crate::rng::stream(seed, Stream::Init, 4);
        let mut policy = nn::init_params_with(&shapes, &mut rng);
        // start from the zero mean, like the initial context
        let (w0, _) = policy.last_layer_offsets();
        policy.values[w0..].iter_mut().for_each(|v| *v = 0.0);
        let horizon = resolve_horizon(config, &spec);
        let value = new_value_net(config, spec.state_dim, horizon, seed);
        Ok(ReinforceRunner {
            horizon,
            sigma: vec![config.run.sigma; spec.action_dim],
            policy_opt: Optimizer::adam(config.reinforce.learning_rate, policy.num_params()),
            value_opt: Optimizer::adam(config.train.value_learning_rate, value.num_params()),
            config: config.clone(),
            seed,
            env,
            policy,
            value,
            value_replay: ValueReplay::new(config.train.value_episodes),
            k: 0,
        })
    }

    fn behavior(&self, state: &[f64]) -> Result<GaussianStats> {
        GaussianStats::new(self.policy.forward(state)?, self.sigma.clone())
    }

    pub fn iteration(&mut self) -> Result<IterationRecord> {
        let start = Instant::now();
        let k = self.k + 1;
        let model_hash = self.policy.fingerprint();
        let n_eps = self.config.run.episodes_per_iteration;
        let mut episodes = Vec::with_capacity(n_eps);
        for e in 0..n_eps as u64 {
            let episode_seed = derive_seed(self.seed, Stream::Policy, (k << 8) | e);
            episodes.push(rollout(
                self.env.as_ref(),
                |s| self.behavior(s),
                self.horizon,
                episode_seed,
                RolloutMode::Sample,
            )?);
        }

        let mut all_adv = Vec::new();
        let mut returns = Vec::with_capacity(n_eps);
        for ep in &episodes {
            let states: Vec<&[f64]> = ep
                .experiences()
                .iter()
                .map(|e| e.state.as_slice())
                .collect();
            let rewards: Vec<f64> = ep.experiences().iter().map(|e| e.reward).collect();
            let adv = advantages(&states, &rewards, &self.value, &self.config.improve)?;
            all_adv.extend(adv.advantages);
            returns.push(adv.returns);
        }
        let n = all_adv.len() as f64;
        if self.config.reinforce.normalize_advantages && all_adv.len() > 1 {
            let mean = all_adv.iter().sum::<f64>() / n;
            let sd = (all_adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
            for a in &mut all_adv {
                *a = (*a - mean) / sd.max(1e-8);
            }
        }

        // ascend sum_t A_t log pi(a_t | s_t) / n
        let mut grad = vec![0.0; self.policy.num_params()];
        let mut t = 0;
        for ep in &episodes {
            for e in ep.experiences() {
                let trace = self.policy.forward_trace(&e.state)?;
                let upstream: Vec<f64> = e
                    .behavior
                    .score_mean(&e.action)
                    .iter()
                    .map(|s| -all_adv[t] * s / n)
                    .collect();
                self.policy.backward_trace(&trace, &upstream, &mut grad)?;
                t += 1;
            }
        }
        self.policy.apply_step(&mut self.policy_opt, &grad)?;

        for (ep, q) in episodes.iter().zip(returns) {
            self.value_replay.push(&self.value, ep, q);
        }
        self.value_replay.fit(
            &mut self.value,
            &self.config,
            &mut self.value_opt,
            derive_seed(self.seed, Stream::ValueFit, k),
        )?;
        self.k = k;

        let eval_returns = self.evaluate()?;
        let (eval_mean, eval_p20, eval_p80) = eval_stats(&eval_returns);
        Ok(IterationRecord {
            k,
            episode_return: episodes.iter().map(|e| e.episode_return()).sum::<f64>() / n_eps as f64,
            episode_len: episodes.iter().map(|e| e.len()).sum::<usize>() / n_eps,
            eval_returns,
            eval_mean,
            eval_p20,
            eval_p80,
            eta: None,
            mean_kl: 0.0,
            loss_trace: Vec::new(),
            sigma: self.sigma.clone(),
            model_hash,
            wall_clock: start.elapsed().as_secs_f64(),
        })
    }

    pub fn evaluate(&self) -> Result<Vec<f64>> {
        eval_seeds(self.seed, self.config.run.eval_episodes)
            .into_iter()
            .map(|s| {
                rollout(
                    self.env.as_ref(),
                    |x| self.behavior(x),
                    self.horizon,
                    s,
                    RolloutMode::Mean,
                )
                .map(|ep| ep.episode_return())
            })
            .collect()
    }
}
