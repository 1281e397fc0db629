use magec_autodiff::{Adam, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{TrainConfig, TrainError};
use crate::critic::CriticParams;
use crate::env::Observation;
use crate::policy::{evaluate, ActorParams, PolicyError};

/// One training sample after advantage estimation.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    /// `None` for forced continues, which train only the critic.
    pub observation: Option<&'a Observation>,
    pub state: &'a [f64],
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub actor_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)` for one sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Records the PPO actor loss `−mean(clipped surrogate) − c_H·mean(H)`
/// and returns it with the mean entropy.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    tape: &mut Tape,
    actor: &ActorParams,
    observations: &[&Observation],
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> Result<(Var, Var), PolicyError> {
    let n = observations.len();
    let batch = actor.batch(observations)?;
    let logp = actor.log_probs(tape, &batch)?;
    let (picked, ent) = evaluate(tape, logp, actions)?;
    let old = tape.constant(Tensor::from_vec(n, 1, old_log_probs.to_vec())?);
    let adv = tape.constant(Tensor::from_vec(n, 1, advantages.to_vec())?);
    let log_ratio = tape.sub(picked, old)?;
    let ratio = tape.exp(log_ratio)?;
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let clipped = tape.mul(clipped, adv)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let surrogate = tape.mean(surrogate)?;
    let mean_ent = tape.mean(ent)?;
    let bonus = tape.scale(mean_ent, entropy_coef)?;
    let total = tape.add(surrogate, bonus)?;
    let loss = tape.scale(total, -1.0)?;
    Ok((loss, mean_ent))
}

/// Mean squared error of the critic against `returns`.
pub fn value_loss(
    tape: &mut Tape,
    critic: &CriticParams,
    states: &[&[f64]],
    returns: &[f64],
) -> Result<Var, TrainError> {
    let width = critic.config().input_width();
    let data: Vec<f64> = states.iter().flat_map(|s| s.iter().copied()).collect();
    let x = tape.constant(Tensor::from_vec(states.len(), width, data)?);
    let v = critic.value(tape, x)?;
    let target = tape.constant(Tensor::from_vec(returns.len(), 1, returns.to_vec())?);
    let diff = tape.sub(v, target)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

/// Optimizer state for both networks.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub actor: Adam,
    pub critic: Adam,
}

/// Epochs × minibatches of clipped-surrogate actor updates and
/// squared-error critic updates over `samples` (advantages already
/// normalized). Returns losses averaged over all minibatch passes.
pub fn ppo_update(
    actor: &mut ActorParams,
    critic: &mut CriticParams,
    optim: &mut Optimizers,
    samples: &[Sample<'_>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossStats, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyBuffer);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let chunks = cfg.minibatches.clamp(1, samples.len());
    let mut stats = LossStats::default();
    let (mut actor_passes, mut critic_passes) = (0usize, 0usize);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (mb, idx) in split(&order, chunks).into_iter().enumerate() {
            let acting: Vec<&Sample> = idx
                .iter()
                .map(|&i| &samples[i])
                .filter(|s| s.observation.is_some())
                .collect();
            if !acting.is_empty() {
                let obs: Vec<&Observation> = acting.iter().map(|s| s.observation.expect("acting")).collect();
                let actions: Vec<usize> = acting.iter().map(|s| s.action).collect();
                let old: Vec<f64> = acting.iter().map(|s| s.old_log_prob).collect();
                let adv: Vec<f64> = acting.iter().map(|s| s.advantage).collect();
                let mut tape = Tape::new();
                let (loss, ent) = actor_loss(
                    &mut tape,
                    actor,
                    &obs,
                    &actions,
                    &old,
                    &adv,
                    cfg.clip,
                    cfg.entropy_coef,
                )?;
                let loss_value = tape.value(loss).item()?;
                if !loss_value.is_finite() {
                    return Err(TrainError::NonFinite(format!(
                        "actor loss {loss_value} at epoch {epoch}, minibatch {mb}"
                    )));
                }
                let mut grads = actor.params().zero_grads();
                tape.backward(loss, &mut grads)?;
                if !grads.is_finite() {
                    return Err(TrainError::NonFinite(format!(
                        "actor gradient at epoch {epoch}, minibatch {mb}"
                    )));
                }
                grads.clip_global_norm(cfg.max_grad_norm);
                optim.actor.step(actor.params_mut(), &grads);
                stats.actor_loss += loss_value;
                stats.entropy += tape.value(ent).item()?;
                actor_passes += 1;
            }

            let states: Vec<&[f64]> = idx.iter().map(|&i| samples[i].state).collect();
            let returns: Vec<f64> = idx.iter().map(|&i| samples[i].ret).collect();
            let mut tape = Tape::new();
            let loss = value_loss(&mut tape, critic, &states, &returns)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite(format!(
                    "value loss {loss_value} at epoch {epoch}, minibatch {mb}"
                )));
            }
            let mut grads = critic.params().zero_grads();
            tape.backward(loss, &mut grads)?;
            // The value coefficient scales the critic's share of the joint
            // objective; with disjoint parameters it only rescales its step.
            grads.scale(cfg.value_coef);
            grads.clip_global_norm(cfg.max_grad_norm);
            optim.critic.step(critic.params_mut(), &grads);
            stats.value_loss += loss_value;
            critic_passes += 1;
        }
    }
    if actor_passes > 0 {
        stats.actor_loss /= actor_passes as f64;
        stats.entropy /= actor_passes as f64;
    }
    stats.value_loss /= critic_passes.max(1) as f64;
    Ok(stats)
}

/// Splits `items` into `parts` contiguous runs whose lengths differ by at
/// most one.
fn split(items: &[usize], parts: usize) -> Vec<&[usize]> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}
