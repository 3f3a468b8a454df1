use rand::seq::SliceRandom;

use super::Interpolator;
use crate::error::Result;
use crate::memory::{sample_context, ReplayMemory};
use crate::nn::{Optimizer, Trainable};
use crate::rng::{self, derive_seed, Stream};

/// Seed for the context subsample of iteration `k`, slot `slot`
/// (held-out episode index, or a reserved acting/eval slot).
pub fn context_seed(seed: u64, k: u64, slot: u64) -> u64 {
    derive_seed(seed, Stream::Context, (k << 24) | (slot & 0xFF_FFFF))
}

/// Leave-one-out training. For each epoch and each episode `m` in a seeded
/// order: context from every other episode, targets from `m`, one optimizer
/// step. Returns the loss per (epoch, m) in visiting order.
///
/// Subsample and latent seeds depend on `(k, m)` only, so with a zero
/// learning rate every epoch reproduces the same losses.
pub fn train_leave_one_out(
    model: &mut Interpolator,
    memory: &ReplayMemory,
    epochs: usize,
    optimizer: &mut Optimizer,
    max_context_points: usize,
    seed: u64,
    k: u64,
) -> Result<Vec<f64>> {
    let n = memory.num_episodes();
    if n < 2 {
        log::warn!("leave-one-out needs two episodes, memory has {n}; skipping training");
        return Ok(Vec::new());
    }
    let mut trace = Vec::with_capacity(epochs * n);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs as u64 {
        let mut rng = rng::stream(seed, Stream::TrainOrder, (k << 24) | epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for &m in &order {
            let loo = memory.leave_one_out(m)?;
            let context =
                sample_context(&loo, max_context_points, context_seed(seed, k, m as u64))?;
            let targets = loo.targets();
            let z_seed = derive_seed(seed, Stream::LatentSample, (k << 24) | m as u64);
            let (loss, grad) = model.loss_and_grad(&context, &targets, z_seed)?;
            model.apply_step(optimizer, &grad)?;
            trace.push(loss);
        }
    }
    Ok(trace)
}
