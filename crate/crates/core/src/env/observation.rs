use std::collections::HashMap;

use magec_autodiff::Tensor;

use super::belief::BeliefState;
use super::world::{Location, WorldState};
use super::{EnvConfig, EnvError};
use crate::graph::{euclidean_distance, BidirectedView};

/// `[is_patrol_node, is_agent, normalized idleness, normalized degree]`.
pub const NODE_FEATURES: usize = 4;

/// Width of a directed edge feature: normalized length followed by a
/// one-hot neighbor index.
pub fn edge_feature_width(max_neighbors: usize) -> usize {
    1 + max_neighbors
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Patrol,
    Agent,
}

/// One agent's local view as a bidirected feature graph.
///
/// Local node ids `0..m` are the patrol nodes (same ids as the graph) and
/// `m..` are the agents the observer knows about, in agent-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub kinds: Vec<NodeKind>,
    /// `n × NODE_FEATURES`.
    pub node_features: Tensor,
    /// Believed idleness per local node (0 for agent nodes).
    pub node_idleness: Vec<f64>,
    pub view: BidirectedView,
    /// Directed edges `src → dst`, ordered as `view.directed_edges()`.
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// `E × (1 + max_neighbors)`.
    pub edge_features: Tensor,
    /// Local node of the observing agent.
    pub ego: usize,
    /// Agent id behind each agent-kind local node, in order.
    pub agent_ids: Vec<usize>,
    /// Patrol node whose neighbor list defines the action slots.
    pub decision_node: usize,
    /// Local ids of the decision node's patrol neighbors, slot order.
    pub decision_neighbors: Vec<usize>,
    pub decision_edge_lengths: Vec<f64>,
    pub action_mask: Vec<bool>,
    /// Set when the observer is mid-edge and must continue.
    pub forced_action: Option<usize>,
}

impl Observation {
    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn max_neighbors(&self) -> usize {
        self.action_mask.len()
    }

    pub fn agent_node_count(&self) -> usize {
        self.agent_ids.len()
    }
}

/// Builds `agent`'s observation. Patrol nodes within `obs_radius` carry
/// exact idleness; the rest carry the belief's extrapolated value. Agents
/// are included when sensed within the radius or believed with a stamp no
/// older than `agent_belief_ttl`; each attaches to its current node by a
/// zero-length edge or, mid-edge, to both endpoints at `p·w` and `(1-p)·w`.
pub fn observe(
    world: &WorldState,
    belief: &BeliefState,
    agent: usize,
    cfg: &EnvConfig,
) -> Result<Observation, EnvError> {
    let me = world.agent(agent)?;
    if !me.alive {
        return Err(EnvError::DeadAgent(agent));
    }
    let graph = world.graph();
    let m = graph.node_count();
    let now = world.clock();
    let here = me.location.position(graph);
    let within = |d: f64| d <= cfg.obs_radius;
    let max_nb = cfg.max_neighbors;

    let mut node_idleness: Vec<f64> = (0..m)
        .map(|v| {
            if within(euclidean_distance(here, graph.position(v))) {
                world.idleness()[v]
            } else {
                belief.idleness(v, now)
            }
        })
        .collect();

    let mut visible: Vec<(usize, Location)> = Vec::new();
    for other in world.agents() {
        if other.id == agent {
            visible.push((agent, me.location));
            continue;
        }
        let sensed = other.alive && within(euclidean_distance(here, other.location.position(graph)));
        if sensed {
            visible.push((other.id, other.location));
        } else if let Some(s) = belief.agent(other.id) {
            let fresh = now.saturating_sub(s.stamp) <= cfg.agent_belief_ttl;
            let seen_in_radius = within(euclidean_distance(here, s.location.position(graph)));
            // A believed agent whose recorded spot is in plain view but who
            // is not sensed there is known to have moved on.
            if fresh && !seen_in_radius {
                visible.push((other.id, s.location));
            }
        }
    }

    let n = m + visible.len();
    let mut kinds = vec![NodeKind::Patrol; m];
    kinds.extend(std::iter::repeat_n(NodeKind::Agent, visible.len()));
    node_idleness.extend(std::iter::repeat_n(0.0, visible.len()));

    let mut pairs: Vec<(usize, usize)> = graph.edges().iter().map(|e| (e.a, e.b)).collect();
    let mut pair_lengths: Vec<f64> = graph.edges().iter().map(|e| e.weight).collect();
    let mut ego = usize::MAX;
    for (k, (id, loc)) in visible.iter().enumerate() {
        let local = m + k;
        if *id == agent {
            ego = local;
        }
        match *loc {
            Location::AtNode(v) => {
                pairs.push((v, local));
                pair_lengths.push(0.0);
            }
            Location::OnEdge { from, to, progress } => {
                let w = graph.edge_weight(from, to).expect("edge");
                pairs.push((from, local));
                pair_lengths.push(progress * w);
                pairs.push((to, local));
                pair_lengths.push((1.0 - progress) * w);
            }
        }
    }
    let view = BidirectedView::from_undirected(n, &pairs);
    let lengths: HashMap<(usize, usize), f64> = pairs
        .iter()
        .zip(&pair_lengths)
        .map(|(&(a, b), &w)| ((a.min(b), a.max(b)), w))
        .collect();

    let scale = graph.max_edge_weight();
    let ef = edge_feature_width(max_nb);
    let directed: Vec<(usize, usize, usize)> = view.directed_edges().collect();
    let mut edge_features = Tensor::zeros(directed.len(), ef);
    let mut edge_src = Vec::with_capacity(directed.len());
    let mut edge_dst = Vec::with_capacity(directed.len());
    for (row, &(u, v, index)) in directed.iter().enumerate() {
        edge_src.push(u);
        edge_dst.push(v);
        let feats = edge_features.row_slice_mut(row);
        feats[0] = lengths[&(u.min(v), u.max(v))] / scale;
        if index < max_nb {
            feats[1 + index] = 1.0;
        }
    }

    let mut node_features = Tensor::zeros(n, NODE_FEATURES);
    for v in 0..n {
        let f = node_features.row_slice_mut(v);
        match kinds[v] {
            NodeKind::Patrol => {
                f[0] = 1.0;
                f[2] = (node_idleness[v] / cfg.zeta_scale).min(1.0);
            }
            NodeKind::Agent => f[1] = 1.0,
        }
        f[3] = (view.degree(v) as f64 / max_nb as f64).min(1.0);
    }

    let decision_node = me.location.decision_node();
    let decision_neighbors: Vec<usize> = graph.neighbors(decision_node).to_vec();
    let decision_edge_lengths = (0..decision_neighbors.len())
        .map(|i| graph.neighbor_weight(decision_node, i))
        .collect();
    let action_mask = world.action_mask(agent, max_nb)?;
    let forced_action = world.continue_action(agent)?;

    Ok(Observation {
        kinds,
        node_features,
        node_idleness,
        view,
        edge_src,
        edge_dst,
        edge_features,
        ego,
        agent_ids: visible.iter().map(|(id, _)| *id).collect(),
        decision_node,
        decision_neighbors,
        decision_edge_lengths,
        action_mask,
        forced_action,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::graph::{PatrolGraph, Position};

    fn triangle() -> Arc<PatrolGraph> {
        Arc::new(
            PatrolGraph::new(
                vec![
                    Position::new(0.0, 0.0),
                    Position::new(1.0, 0.0),
                    Position::new(0.0, 1.0),
                ],
                &[(0, 1, None), (0, 2, None), (1, 2, None)],
            )
            .unwrap(),
        )
    }

    #[test]
    fn at_node_mask_has_degree_entries() {
        let world = WorldState::reset(triangle(), 1, 0).unwrap();
        let belief = BeliefState::initial(0, &world);
        let cfg = EnvConfig {
            max_neighbors: 4,
            ..EnvConfig::default()
        };
        let obs = observe(&world, &belief, 0, &cfg).unwrap();
        assert_eq!(obs.action_mask, vec![true, true, false, false]);
        assert_eq!(obs.forced_action, None);
        assert_eq!(obs.node_count(), 4);
        assert_eq!(obs.ego, 3);
        assert_eq!(obs.decision_neighbors, vec![1, 2]);
        // Agent attaches to node 0 with a zero-length edge.
        assert_eq!(obs.view.neighbors(3), &[0]);
        assert_eq!(obs.edge_features.cols(), 5);
    }

    #[test]
    fn on_edge_mask_forces_continue() {
        let mut world = WorldState::reset(triangle(), 1, 0).unwrap();
        world
            .set_location(0, Location::OnEdge { from: 0, to: 2, progress: 0.25 })
            .unwrap();
        let belief = BeliefState::initial(0, &world);
        let obs = observe(&world, &belief, 0, &EnvConfig::default()).unwrap();
        assert_eq!(obs.forced_action, Some(1));
        assert_eq!(obs.action_mask.iter().filter(|&&m| m).count(), 1);
        assert!(obs.action_mask[1]);
        assert_eq!(obs.view.neighbors(obs.ego), &[0, 2]);
    }

    #[test]
    fn unlimited_radius_sees_exact_idleness() {
        let mut world = WorldState::reset(triangle(), 1, 0).unwrap();
        world.set_idleness(&[1.0, 7.0, 3.0]);
        let belief = BeliefState::initial(0, &world);
        let obs = observe(&world, &belief, 0, &EnvConfig::default()).unwrap();
        assert_eq!(&obs.node_idleness[..3], &[1.0, 7.0, 3.0]);
    }

    #[test]
    fn dead_agent_cannot_observe() {
        let mut world = WorldState::reset(triangle(), 2, 0).unwrap();
        let belief = BeliefState::initial(1, &world);
        world.apply_attrition(1).unwrap();
        assert_eq!(
            observe(&world, &belief, 1, &EnvConfig::default()),
            Err(EnvError::DeadAgent(1))
        );
    }
}
