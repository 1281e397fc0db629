//! MAPPO with synchronous step skipping and interval-aware advantages.

mod gae;
mod ppo;
mod rollout;

use std::fmt::Write as _;
use std::sync::Arc;

use magec_autodiff::{Adam, AdamConfig, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use gae::{modified_gae, normalize_advantages};
pub use ppo::{
    actor_loss, clipped_surrogate, ppo_update, value_loss, LossStats, Optimizers, Sample,
};
pub use rollout::{collect_episode, collect_rollout, episode_seed, Episode, RolloutEntry};

use crate::critic::{CriticConfig, CriticError, CriticParams};
use crate::env::{EnvConfig, EnvError};
use crate::experiment::{simulate, Controller, ExperimentError};
use crate::graph::PatrolGraph;
use crate::policy::{ActorConfig, ActorParams, PolicyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty rollout buffer")]
    EmptyBuffer,
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Parallel environment copies per iteration.
    pub envs: usize,
    pub episode_len: u64,
    /// Environment-step budget summed over copies.
    pub total_steps: u64,
    pub n_agents: usize,
    pub seed: u64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub max_grad_norm: f64,
    pub actor: ActorConfig,
    pub critic_hidden: usize,
    /// Observation, normalization and reward settings. Attrition is never
    /// applied during training.
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 4,
            minibatches: 4,
            envs: 5,
            episode_len: 200,
            total_steps: 350_000,
            n_agents: 4,
            seed: 0,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            max_grad_norm: 0.5,
            actor: ActorConfig::default(),
            critic_hidden: 128,
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda must lie in (0, 1]");
        }
        if self.episode_len < 2 {
            return bad("episode_len must be at least 2");
        }
        if self.envs == 0 || self.epochs == 0 || self.minibatches == 0 || self.n_agents == 0 {
            return bad("envs, epochs, minibatches and n_agents must be positive");
        }
        if self.actor.max_neighbors != self.env.max_neighbors {
            return bad("actor and environment disagree on max_neighbors");
        }
        if self.actor.layers == 0 || self.actor.hidden == 0 || self.critic_hidden == 0 {
            return bad("network sizes must be positive");
        }
        Ok(())
    }

    /// Environment steps consumed by one iteration.
    pub fn steps_per_iteration(&self) -> u64 {
        self.envs as u64 * self.episode_len
    }

    pub fn iterations(&self) -> u64 {
        self.total_steps / self.steps_per_iteration()
    }

    pub fn critic_config(&self, nodes: usize) -> CriticConfig {
        CriticConfig {
            hidden: self.critic_hidden,
            ..CriticConfig::new(nodes, self.n_agents, self.env.zeta_scale)
        }
    }
}

/// One line of the training metrics file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRow {
    /// Environment steps consumed so far, including this iteration.
    pub step: u64,
    /// Mean over copies and agents of the per-agent episode return.
    pub mean_episode_reward: f64,
    /// Time-averaged ζ̄ of a greedy episode run before this update.
    pub eval_avg_idleness: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub const METRICS_HEADER: &str =
    "step,mean_episode_reward,eval_avg_idleness,actor_loss,value_loss,entropy";

pub fn metrics_csv(rows: &[TrainRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?}",
            r.step, r.mean_episode_reward, r.eval_avg_idleness, r.actor_loss, r.value_loss, r.entropy
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub actor: ActorParams,
    pub critic: CriticParams,
    pub rows: Vec<TrainRow>,
}

/// Advantage-annotated samples of a rollout, per-agent sequences
/// concatenated; advantages of policy decisions normalized per batch.
pub fn build_samples<'a>(
    episodes: &'a [Episode],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Sample<'a>>, TrainError> {
    let mut samples = Vec::new();
    for ep in episodes {
        for agent in 0..ep.agent_returns.len() {
            let idx = ep.agent_indices(agent);
            if idx.is_empty() {
                continue;
            }
            let rewards: Vec<f64> = idx.iter().map(|&i| ep.entries[i].reward).collect();
            let values: Vec<f64> = idx.iter().map(|&i| ep.entries[i].value).collect();
            let dts: Vec<u64> = idx.iter().map(|&i| ep.entries[i].dt).collect();
            let (adv, ret) = modified_gae(&rewards, &values, &dts, 0.0, gamma, lambda)?;
            for (k, &i) in idx.iter().enumerate() {
                let e = &ep.entries[i];
                samples.push(Sample {
                    observation: e.observation.as_ref(),
                    state: &ep.states[e.state],
                    action: e.action,
                    old_log_prob: e.log_prob,
                    advantage: adv[k],
                    ret: ret[k],
                });
            }
        }
    }
    let acting: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].observation.is_some()).collect();
    let mut adv: Vec<f64> = acting.iter().map(|&i| samples[i].advantage).collect();
    normalize_advantages(&mut adv);
    for (&i, a) in acting.iter().zip(adv) {
        samples[i].advantage = a;
    }
    Ok(samples)
}

/// Greedy evaluation used for the training curve: time-averaged ζ̄ over
/// one episode without disturbances.
pub fn greedy_eval(
    graph: &Arc<PatrolGraph>,
    cfg: &TrainConfig,
    actor: &ActorParams,
) -> Result<f64, TrainError> {
    let env = rollout::training_env_config(cfg, cfg.seed);
    let series = simulate(
        graph,
        cfg.n_agents,
        &env,
        &mut Controller::Magec {
            actor,
            stochastic: false,
        },
        cfg.episode_len,
        cfg.seed,
    )?;
    Ok(series.time_averaged_idleness())
}

/// Runs the training loop until the step budget is spent. `on_iteration`
/// sees each new metrics row together with the updated networks.
pub fn train<F>(graph: Arc<PatrolGraph>, cfg: &TrainConfig, mut on_iteration: F) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&TrainRow, &ActorParams, &CriticParams),
{
    cfg.validate()?;
    let mut actor = ActorParams::new(cfg.actor, cfg.seed);
    let mut critic = CriticParams::new(cfg.critic_config(graph.node_count()), cfg.seed.wrapping_add(1));
    let adam = |lr| AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut optim = Optimizers {
        actor: Adam::new(actor.params(), adam(cfg.actor_lr)),
        critic: Adam::new(critic.params(), adam(cfg.critic_lr)),
    };
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(4);
    let mut rows = Vec::new();
    let mut steps = 0;
    for iteration in 0..cfg.iterations() {
        let eval_avg_idleness = greedy_eval(&graph, cfg, &actor)?;
        let episodes = collect_rollout(&graph, cfg, &actor, &critic, iteration)?;
        steps += episodes.iter().map(Episode::env_steps).sum::<u64>();
        let returns: Vec<f64> = episodes.iter().flat_map(|e| e.agent_returns.iter().copied()).collect();
        let mean_episode_reward = returns.iter().sum::<f64>() / returns.len() as f64;
        let samples = build_samples(&episodes, cfg.gamma, cfg.lambda)?;
        let stats = ppo_update(&mut actor, &mut critic, &mut optim, &samples, cfg, &mut shuffle)?;
        let row = TrainRow {
            step: steps,
            mean_episode_reward,
            eval_avg_idleness,
            actor_loss: stats.actor_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
        };
        on_iteration(&row, &actor, &critic);
        rows.push(row);
    }
    Ok(TrainOutcome { actor, critic, rows })
}
