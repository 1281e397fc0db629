use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{TrainConfig, TrainError};
use crate::critic::{critic_features, CriticParams};
use crate::env::{EnvConfig, Observation, PatrolEnv};
use crate::graph::PatrolGraph;
use crate::policy::{sample_action, ActorParams};

/// One agent's record at one decision step.
#[derive(Clone, Debug)]
pub struct RolloutEntry {
    pub agent: usize,
    pub clock: u64,
    /// Index into [`Episode::states`].
    pub state: usize,
    /// Present for policy decisions, absent for forced continues.
    pub observation: Option<Observation>,
    pub action: usize,
    pub log_prob: f64,
    /// Sum of this agent's rewards over the `dt` skipped steps.
    pub reward: f64,
    pub value: f64,
    pub dt: u64,
    pub mask: Vec<bool>,
    pub alive: bool,
}

impl RolloutEntry {
    pub fn forced(&self) -> bool {
        self.observation.is_none()
    }
}

/// A full training episode from one environment copy.
#[derive(Clone, Debug)]
pub struct Episode {
    pub env: usize,
    pub seed: u64,
    /// Time-major; within a decision step, ascending agent id.
    pub entries: Vec<RolloutEntry>,
    /// Critic encodings of every decision-step state.
    pub states: Vec<Vec<f64>>,
    /// Raw per-step rewards indexed by agent id, one row per env step.
    pub step_rewards: Vec<Vec<f64>>,
    /// Per-agent episode return.
    pub agent_returns: Vec<f64>,
}

impl Episode {
    pub fn env_steps(&self) -> u64 {
        self.step_rewards.len() as u64
    }

    /// Entry indices of `agent` in time order.
    pub fn agent_indices(&self, agent: usize) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].agent == agent).collect()
    }
}

pub(super) fn training_env_config(cfg: &TrainConfig, seed: u64) -> EnvConfig {
    EnvConfig {
        attrition: Vec::new(),
        episode_len: cfg.episode_len,
        seed,
        ..cfg.env.clone()
    }
}

/// Runs one episode, sampling the actor at every non-forced decision and,
/// when `skip` is set, advancing synchronously to the next step at which
/// some agent reaches a node (bounded by the episode end).
#[allow(clippy::too_many_arguments)]
pub fn collect_episode(
    graph: &Arc<PatrolGraph>,
    cfg: &TrainConfig,
    actor: &ActorParams,
    critic: &CriticParams,
    env_index: usize,
    seed: u64,
    skip: bool,
) -> Result<Episode, TrainError> {
    let mut env = PatrolEnv::new(graph.clone(), cfg.n_agents, training_env_config(cfg, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let horizon = cfg.episode_len;
    let critic_cfg = critic.config();
    let mut episode = Episode {
        env: env_index,
        seed,
        entries: Vec::new(),
        states: Vec::new(),
        step_rewards: Vec::new(),
        agent_returns: vec![0.0; cfg.n_agents],
    };
    while env.clock() < horizon {
        let living = env.living_agents();
        if living.is_empty() {
            break;
        }
        let state = episode.states.len();
        episode.states.push(critic_features(env.world(), &critic_cfg)?);
        let mut forced = Vec::with_capacity(living.len());
        let mut free_obs = Vec::new();
        for &a in &living {
            let f = env.world().continue_action(a)?;
            if f.is_none() {
                free_obs.push(env.observe(a)?);
            }
            forced.push(f);
        }
        let refs: Vec<&Observation> = free_obs.iter().collect();
        let dists = actor.distributions(&refs)?;
        let clock = env.clock();
        let mut pending = Vec::with_capacity(living.len());
        let mut free = free_obs.into_iter().zip(dists);
        for (&a, f) in living.iter().zip(&forced) {
            let mask = env.world().action_mask(a, cfg.env.max_neighbors)?;
            match f {
                Some(action) => pending.push((a, None, *action, 0.0, mask)),
                None => {
                    let (obs, logp) = free.next().expect("one distribution per free agent");
                    let (action, lp) = sample_action(&logp, &mut rng);
                    pending.push((a, Some(obs), action, lp, mask));
                }
            }
        }
        let actions: Vec<usize> = pending.iter().map(|p| p.2).collect();
        env.commit(&actions)?;
        let dt = if skip {
            env.steps_until_next_action()?.min(horizon - clock)
        } else {
            1
        };
        let mut acc = vec![0.0; cfg.n_agents];
        for _ in 0..dt {
            let out = env.advance();
            for (sum, r) in acc.iter_mut().zip(&out.rewards) {
                *sum += r;
            }
            episode.step_rewards.push(out.rewards);
        }
        for (agent, observation, action, log_prob, mask) in pending {
            episode.agent_returns[agent] += acc[agent];
            episode.entries.push(RolloutEntry {
                agent,
                clock,
                state,
                observation,
                action,
                log_prob,
                reward: acc[agent],
                value: 0.0,
                dt,
                mask,
                alive: true,
            });
        }
    }
    let rows: Vec<&[f64]> = episode.states.iter().map(Vec::as_slice).collect();
    let values = critic.values(&rows)?;
    for e in &mut episode.entries {
        e.value = values[e.state];
    }
    Ok(episode)
}

/// Episode seed of copy `env` in training iteration `iteration`.
pub fn episode_seed(base: u64, iteration: u64, env: usize) -> u64 {
    // SplitMix64 finalizer over the packed coordinates.
    let mut z = base
        .wrapping_add(iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((env as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One episode per environment copy, run in parallel; results keep copy
/// order so the outcome does not depend on thread scheduling.
pub fn collect_rollout(
    graph: &Arc<PatrolGraph>,
    cfg: &TrainConfig,
    actor: &ActorParams,
    critic: &CriticParams,
    iteration: u64,
) -> Result<Vec<Episode>, TrainError> {
    (0..cfg.envs)
        .into_par_iter()
        .map(|e| {
            let seed = episode_seed(cfg.seed, iteration, e);
            collect_episode(graph, cfg, actor, critic, e, seed, true)
        })
        .collect()
}
