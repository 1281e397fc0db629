//! Patrolling simulator: ground truth, per-agent beliefs under lossy
//! telemetry, local graph observations and disturbance injection.

mod belief;
mod config;
mod observation;
mod world;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use belief::{broadcast_and_merge, AgentSighting, BeliefState};
pub use config::{format_attrition, parse_attrition, AttritionEvent, EnvConfig, RewardConfig};
pub use observation::{edge_feature_width, observe, NodeKind, Observation, NODE_FEATURES};
pub use world::{
    average_idleness, idleness_std, local_reward, remaining_steps, terminal_reward,
    worst_idleness, AgentState, Arrival, Location, StepOutcome, WorldState, SPEED,
};

use crate::graph::PatrolGraph;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("at least one agent is required")]
    NoAgents,
    #[error("{agents} agents do not fit on {nodes} nodes")]
    TooManyAgents { agents: usize, nodes: usize },
    #[error("unknown agent {0}")]
    UnknownAgent(usize),
    #[error("agent {0} is dead")]
    DeadAgent(usize),
    #[error("agent {0} is already dead")]
    AlreadyDead(usize),
    #[error("location of agent {0} is not on the graph")]
    InvalidLocation(usize),
    #[error("action {action} is not valid for agent {agent}")]
    InvalidAction { agent: usize, action: usize },
    #[error("expected {expected} actions (one per living agent), got {got}")]
    ActionCountMismatch { expected: usize, got: usize },
    #[error("node {node} has degree {degree} > max_neighbors {max_neighbors}")]
    DegreeExceedsMaxNeighbors {
        node: usize,
        degree: usize,
        max_neighbors: usize,
    },
    #[error("no living agents")]
    NoLivingAgents,
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
}

/// A world plus every agent's belief, driven by an [`EnvConfig`].
///
/// After every clock tick (and at reset) due attrition events fire, then
/// each living agent senses its surroundings and, on telemetry ticks,
/// beliefs are exchanged over the lossy channel.
#[derive(Clone, Debug)]
pub struct PatrolEnv {
    config: EnvConfig,
    world: WorldState,
    beliefs: Vec<BeliefState>,
    comm_rng: ChaCha8Rng,
    next_event: usize,
}

impl PatrolEnv {
    pub fn new(graph: Arc<PatrolGraph>, n_agents: usize, config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        if let Some(e) = config.attrition.iter().find(|e| e.agent >= n_agents) {
            return Err(EnvError::UnknownAgent(e.agent));
        }
        let mut sorted = config.attrition.clone();
        sorted.sort_by_key(|e| (e.step, e.agent));
        let mut ids: Vec<_> = sorted.iter().map(|e| e.agent).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(EnvError::Config {
                line: 0,
                message: "an agent appears twice in the attrition schedule".into(),
            });
        }
        let world = WorldState::reset_with(graph, n_agents, config.seed, config.reward_config())?;
        for v in 0..world.graph().node_count() {
            let degree = world.graph().degree(v);
            if degree > config.max_neighbors {
                return Err(EnvError::DegreeExceedsMaxNeighbors {
                    node: v,
                    degree,
                    max_neighbors: config.max_neighbors,
                });
            }
        }
        let beliefs = (0..n_agents).map(|i| BeliefState::initial(i, &world)).collect();
        let mut comm_rng = ChaCha8Rng::seed_from_u64(config.seed);
        comm_rng.set_stream(1);
        let mut env = Self {
            config: EnvConfig {
                attrition: sorted,
                ..config
            },
            world,
            beliefs,
            comm_rng,
            next_event: 0,
        };
        env.sync();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn graph(&self) -> &Arc<PatrolGraph> {
        self.world.graph()
    }

    pub fn clock(&self) -> u64 {
        self.world.clock()
    }

    pub fn agent_count(&self) -> usize {
        self.world.agents().len()
    }

    pub fn living_agents(&self) -> Vec<usize> {
        self.world.living_agents()
    }

    pub fn belief(&self, agent: usize) -> &BeliefState {
        &self.beliefs[agent]
    }

    pub fn observe(&self, agent: usize) -> Result<Observation, EnvError> {
        let belief = self.beliefs.get(agent).ok_or(EnvError::UnknownAgent(agent))?;
        observe(&self.world, belief, agent, &self.config)
    }

    /// Observations of every living agent, ascending id.
    pub fn observe_all(&self) -> Result<Vec<Observation>, EnvError> {
        self.world.living_agents().into_iter().map(|a| self.observe(a)).collect()
    }

    pub fn commit(&mut self, joint_action: &[usize]) -> Result<(), EnvError> {
        self.world.commit(joint_action)
    }

    pub fn steps_until_next_action(&self) -> Result<u64, EnvError> {
        self.world.steps_until_next_action()
    }

    pub fn advance(&mut self) -> StepOutcome {
        let outcome = self.world.advance();
        self.sync();
        outcome
    }

    pub fn step(&mut self, joint_action: &[usize]) -> Result<StepOutcome, EnvError> {
        self.commit(joint_action)?;
        Ok(self.advance())
    }

    /// Whether the training episode (`episode_len` steps) is over.
    pub fn episode_done(&self) -> bool {
        self.world.clock() >= self.config.episode_len
    }

    /// Mean over living agents and nodes of the age of believed idleness.
    pub fn mean_belief_staleness(&self) -> f64 {
        let living = self.world.living_agents();
        let m = self.world.graph().node_count();
        if living.is_empty() {
            return 0.0;
        }
        let now = self.world.clock();
        let total: u64 = living
            .iter()
            .flat_map(|&a| (0..m).map(move |v| (a, v)))
            .map(|(a, v)| now - self.beliefs[a].node_stamp(v))
            .sum();
        total as f64 / (living.len() * m) as f64
    }

    fn sync(&mut self) {
        let now = self.world.clock();
        while let Some(e) = self.config.attrition.get(self.next_event) {
            if e.step > now {
                break;
            }
            // Validated at construction: each agent dies at most once.
            let _ = self.world.apply_attrition(e.agent);
            self.next_event += 1;
        }
        if now.is_multiple_of(self.config.telemetry_period) {
            broadcast_and_merge(
                &self.world,
                &mut self.beliefs,
                self.config.obs_radius,
                self.config.comm_success,
                &mut self.comm_rng,
            );
        } else {
            for a in self.world.living_agents() {
                self.beliefs[a].sense(&self.world, self.config.obs_radius);
            }
        }
    }
}
