use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EnvError, RewardConfig};
use crate::graph::{NodeId, PatrolGraph, Position};

/// Agent speed in meters per step.
pub const SPEED: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Location {
    AtNode(NodeId),
    /// Travelling `from → to`; `progress` is the covered fraction in `[0, 1]`.
    OnEdge {
        from: NodeId,
        to: NodeId,
        progress: f64,
    },
}

impl Location {
    pub fn position(&self, graph: &PatrolGraph) -> Position {
        match *self {
            Location::AtNode(v) => graph.position(v),
            Location::OnEdge { from, to, progress } => {
                graph.position(from).lerp(graph.position(to), progress)
            }
        }
    }

    /// The node whose neighbor list indexes the agent's actions.
    pub fn decision_node(&self) -> NodeId {
        match *self {
            Location::AtNode(v) => v,
            Location::OnEdge { from, .. } => from,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: usize,
    pub alive: bool,
    pub location: Location,
}

/// Whole steps still needed to finish an edge of length `length` from
/// `progress`. Arrival happens on the step where this count is 1.
pub fn remaining_steps(progress: f64, length: f64) -> u64 {
    let left = (1.0 - progress) * length / SPEED;
    (left - 1e-9).ceil().max(1.0) as u64
}

pub fn average_idleness(idleness: &[f64]) -> f64 {
    if idleness.is_empty() {
        return 0.0;
    }
    idleness.iter().sum::<f64>() / idleness.len() as f64
}

pub fn worst_idleness(idleness: &[f64]) -> f64 {
    idleness.iter().copied().fold(0.0, f64::max)
}

pub fn idleness_std(idleness: &[f64]) -> f64 {
    if idleness.is_empty() {
        return 0.0;
    }
    let mean = average_idleness(idleness);
    (idleness.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / idleness.len() as f64).sqrt()
}

/// Reward for reaching a node with idleness `visited` when the graph mean
/// is `mean`: `visited / (mean + ε)`.
pub fn local_reward(visited: f64, mean: f64, epsilon: f64) -> f64 {
    visited / (mean + epsilon)
}

/// End-of-episode reward `t / (mean + ε)` paid at `t = T - 1`.
pub fn terminal_reward(t: u64, mean: f64, epsilon: f64) -> f64 {
    t as f64 / (mean + epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub agent: usize,
    pub node: NodeId,
    /// Unweighted `r_local` earned by this arrival.
    pub local_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StepOutcome {
    /// Reward per agent id (zero for dead agents).
    pub rewards: Vec<f64>,
    pub arrivals: Vec<Arrival>,
}

/// Ground-truth simulation state.
#[derive(Clone, Debug)]
pub struct WorldState {
    graph: Arc<PatrolGraph>,
    clock: u64,
    idleness: Vec<f64>,
    agents: Vec<AgentState>,
    rewards: RewardConfig,
    seed: u64,
}

impl WorldState {
    /// Fresh state: zero idleness, agent `i` at node `i`, clock 0.
    pub fn reset(graph: Arc<PatrolGraph>, n_agents: usize, seed: u64) -> Result<Self, EnvError> {
        Self::reset_with(graph, n_agents, seed, RewardConfig::default())
    }

    pub fn reset_with(
        graph: Arc<PatrolGraph>,
        n_agents: usize,
        seed: u64,
        rewards: RewardConfig,
    ) -> Result<Self, EnvError> {
        let m = graph.node_count();
        if n_agents == 0 {
            return Err(EnvError::NoAgents);
        }
        if n_agents > m {
            return Err(EnvError::TooManyAgents {
                agents: n_agents,
                nodes: m,
            });
        }
        let agents = (0..n_agents)
            .map(|id| AgentState {
                id,
                alive: true,
                location: Location::AtNode(id % m),
            })
            .collect();
        Ok(Self {
            idleness: vec![0.0; m],
            graph,
            clock: 0,
            agents,
            rewards,
            seed,
        })
    }

    pub fn graph(&self) -> &Arc<PatrolGraph> {
        &self.graph
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn idleness(&self) -> &[f64] {
        &self.idleness
    }

    /// Overwrites idleness values; intended for building test scenarios.
    pub fn set_idleness(&mut self, idleness: &[f64]) {
        assert_eq!(idleness.len(), self.idleness.len());
        assert!(idleness.iter().all(|&z| z >= 0.0));
        self.idleness.copy_from_slice(idleness);
    }

    /// Places an agent directly; intended for building test scenarios.
    pub fn set_location(&mut self, agent: usize, location: Location) -> Result<(), EnvError> {
        if let Location::OnEdge { from, to, progress } = location {
            if self.graph.edge_weight(from, to).is_none() || !(0.0..=1.0).contains(&progress) {
                return Err(EnvError::InvalidLocation(agent));
            }
        }
        self.agent_mut(agent)?.location = location;
        Ok(())
    }

    pub fn reward_config(&self) -> RewardConfig {
        self.rewards
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn agent(&self, id: usize) -> Result<&AgentState, EnvError> {
        self.agents.get(id).ok_or(EnvError::UnknownAgent(id))
    }

    fn agent_mut(&mut self, id: usize) -> Result<&mut AgentState, EnvError> {
        self.agents.get_mut(id).ok_or(EnvError::UnknownAgent(id))
    }

    pub fn living_agents(&self) -> Vec<usize> {
        self.agents.iter().filter(|a| a.alive).map(|a| a.id).collect()
    }

    pub fn living_count(&self) -> usize {
        self.agents.iter().filter(|a| a.alive).count()
    }

    pub fn agent_position(&self, id: usize) -> Result<Position, EnvError> {
        Ok(self.agent(id)?.location.position(&self.graph))
    }

    pub fn average_idleness(&self) -> f64 {
        average_idleness(&self.idleness)
    }

    pub fn worst_idleness(&self) -> f64 {
        worst_idleness(&self.idleness)
    }

    /// Valid actions for an agent over `max_neighbors` slots: the first
    /// `deg` slots at a node, only the current edge's slot when travelling.
    pub fn action_mask(&self, agent: usize, max_neighbors: usize) -> Result<Vec<bool>, EnvError> {
        let a = self.agent(agent)?;
        if !a.alive {
            return Err(EnvError::DeadAgent(agent));
        }
        let mut mask = vec![false; max_neighbors];
        match a.location {
            Location::AtNode(v) => {
                let deg = self.graph.degree(v);
                if deg > max_neighbors {
                    return Err(EnvError::DegreeExceedsMaxNeighbors {
                        node: v,
                        degree: deg,
                        max_neighbors,
                    });
                }
                mask[..deg].iter_mut().for_each(|m| *m = true);
            }
            Location::OnEdge { .. } => {
                let slot = self.continue_action(agent)?.expect("travelling agent");
                if slot >= max_neighbors {
                    return Err(EnvError::DegreeExceedsMaxNeighbors {
                        node: a.location.decision_node(),
                        degree: slot + 1,
                        max_neighbors,
                    });
                }
                mask[slot] = true;
            }
        }
        Ok(mask)
    }

    /// The only legal action of a travelling agent: the index of its
    /// destination in the origin's neighbor list. `None` at a node.
    pub fn continue_action(&self, agent: usize) -> Result<Option<usize>, EnvError> {
        match self.agent(agent)?.location {
            Location::AtNode(_) => Ok(None),
            Location::OnEdge { from, to, .. } => Ok(Some(
                self.graph
                    .view()
                    .neighbor_index(from, to)
                    .expect("agents travel along graph edges"),
            )),
        }
    }

    /// Validates a joint action (one entry per living agent, ascending id)
    /// and commits every agent at a node to its chosen edge. Nothing is
    /// mutated if any action is invalid.
    pub fn commit(&mut self, joint_action: &[usize]) -> Result<(), EnvError> {
        let living = self.living_agents();
        if joint_action.len() != living.len() {
            return Err(EnvError::ActionCountMismatch {
                expected: living.len(),
                got: joint_action.len(),
            });
        }
        let mut targets = Vec::with_capacity(living.len());
        for (&id, &action) in living.iter().zip(joint_action) {
            match self.agents[id].location {
                Location::AtNode(v) => {
                    let to = *self
                        .graph
                        .neighbors(v)
                        .get(action)
                        .ok_or(EnvError::InvalidAction { agent: id, action })?;
                    targets.push(Some((v, to)));
                }
                Location::OnEdge { .. } => {
                    if self.continue_action(id)? != Some(action) {
                        return Err(EnvError::InvalidAction { agent: id, action });
                    }
                    targets.push(None);
                }
            }
        }
        for (&id, target) in living.iter().zip(targets) {
            if let Some((from, to)) = target {
                self.agents[id].location = Location::OnEdge {
                    from,
                    to,
                    progress: 0.0,
                };
            }
        }
        Ok(())
    }

    /// Smallest number of whole steps until some living agent reaches a
    /// node (1 if an agent is already waiting at one).
    pub fn steps_until_next_action(&self) -> Result<u64, EnvError> {
        self.agents
            .iter()
            .filter(|a| a.alive)
            .map(|a| match a.location {
                Location::AtNode(_) => 1,
                Location::OnEdge { from, to, progress } => {
                    remaining_steps(progress, self.graph.edge_weight(from, to).expect("edge"))
                }
            })
            .min()
            .ok_or(EnvError::NoLivingAgents)
    }

    /// Advances one step: travelling agents move `SPEED` meters, every
    /// node's idleness grows by one, arrivals (in agent-id order) earn
    /// `α·r_local` and reset their node, and on the final episode step
    /// every living agent also earns `β·r_terminal`.
    pub fn advance(&mut self) -> StepOutcome {
        let t = self.clock;
        let mut outcome = StepOutcome {
            rewards: vec![0.0; self.agents.len()],
            arrivals: Vec::new(),
        };
        for z in &mut self.idleness {
            *z += 1.0;
        }
        let RewardConfig {
            alpha,
            beta,
            epsilon,
            episode_len,
        } = self.rewards;
        for agent in self.agents.iter_mut().filter(|a| a.alive) {
            let Location::OnEdge { from, to, progress } = agent.location else {
                continue;
            };
            let length = self.graph.edge_weight(from, to).expect("edge");
            if remaining_steps(progress, length) == 1 {
                agent.location = Location::AtNode(to);
                let mean = average_idleness(&self.idleness);
                let r = local_reward(self.idleness[to], mean, epsilon);
                self.idleness[to] = 0.0;
                outcome.rewards[agent.id] += alpha * r;
                outcome.arrivals.push(Arrival {
                    agent: agent.id,
                    node: to,
                    local_reward: r,
                });
            } else {
                agent.location = Location::OnEdge {
                    from,
                    to,
                    progress: (progress + SPEED / length).min(1.0),
                };
            }
        }
        if episode_len.is_some_and(|len| t + 1 == len) {
            let r = terminal_reward(t, average_idleness(&self.idleness), epsilon);
            for agent in self.agents.iter().filter(|a| a.alive) {
                outcome.rewards[agent.id] += beta * r;
            }
        }
        self.clock += 1;
        outcome
    }

    /// `commit` followed by `advance`.
    pub fn step(&mut self, joint_action: &[usize]) -> Result<StepOutcome, EnvError> {
        self.commit(joint_action)?;
        Ok(self.advance())
    }

    /// Permanently removes an agent. No other agent is notified.
    pub fn apply_attrition(&mut self, agent: usize) -> Result<(), EnvError> {
        let a = self.agent_mut(agent)?;
        if !a.alive {
            return Err(EnvError::AlreadyDead(agent));
        }
        a.alive = false;
        Ok(())
    }
}
