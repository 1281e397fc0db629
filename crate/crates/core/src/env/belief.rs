use rand::Rng;

use super::world::{Location, WorldState};
use crate::graph::euclidean_distance;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentSighting {
    pub location: Location,
    pub stamp: u64,
}

/// What one agent knows about the world, each entry stamped with the
/// clock at which it was last true.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefState {
    owner: usize,
    node_idleness: Vec<f64>,
    node_stamp: Vec<u64>,
    agents: Vec<Option<AgentSighting>>,
}

impl BeliefState {
    /// Initial knowledge at clock 0: every node has idleness 0 and every
    /// agent sits at its start location.
    pub fn initial(owner: usize, world: &WorldState) -> Self {
        Self {
            owner,
            node_idleness: world.idleness().to_vec(),
            node_stamp: vec![world.clock(); world.idleness().len()],
            agents: world
                .agents()
                .iter()
                .map(|a| {
                    Some(AgentSighting {
                        location: a.location,
                        stamp: world.clock(),
                    })
                })
                .collect(),
        }
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    /// Last-known idleness plus the time elapsed since it was known.
    pub fn idleness(&self, node: usize, now: u64) -> f64 {
        self.node_idleness[node] + now.saturating_sub(self.node_stamp[node]) as f64
    }

    pub fn node_stamp(&self, node: usize) -> u64 {
        self.node_stamp[node]
    }

    pub fn agent(&self, id: usize) -> Option<AgentSighting> {
        self.agents.get(id).copied().flatten()
    }

    /// Records ground truth the owner can sense: its own location, nodes
    /// within `radius`, and living agents within `radius`.
    pub fn sense(&mut self, world: &WorldState, radius: f64) {
        let now = world.clock();
        let graph = world.graph();
        let me = &world.agents()[self.owner];
        if !me.alive {
            return;
        }
        let here = me.location.position(graph);
        self.agents[self.owner] = Some(AgentSighting {
            location: me.location,
            stamp: now,
        });
        for (v, &z) in world.idleness().iter().enumerate() {
            if euclidean_distance(here, graph.position(v)) <= radius {
                self.node_idleness[v] = z;
                self.node_stamp[v] = now;
            }
        }
        for other in world.agents().iter().filter(|a| a.alive && a.id != self.owner) {
            if euclidean_distance(here, other.location.position(graph)) <= radius {
                self.agents[other.id] = Some(AgentSighting {
                    location: other.location,
                    stamp: now,
                });
            }
        }
    }

    /// Takes every entry of `other` that is strictly newer than ours.
    pub fn merge_from(&mut self, other: &BeliefState) {
        for v in 0..self.node_stamp.len() {
            if other.node_stamp[v] > self.node_stamp[v] {
                self.node_stamp[v] = other.node_stamp[v];
                self.node_idleness[v] = other.node_idleness[v];
            }
        }
        for (mine, theirs) in self.agents.iter_mut().zip(&other.agents) {
            if let Some(t) = theirs {
                if mine.is_none_or(|m| t.stamp > m.stamp) {
                    *mine = Some(*t);
                }
            }
        }
    }
}

/// One telemetry round: every living agent senses, then for each ordered
/// pair `(sender, receiver)` of distinct living agents the receiver merges
/// the sender's pre-round belief with probability `comm_success`. Exactly
/// one uniform draw is consumed per ordered pair.
pub fn broadcast_and_merge<R: Rng>(
    world: &WorldState,
    beliefs: &mut [BeliefState],
    radius: f64,
    comm_success: f64,
    rng: &mut R,
) -> usize {
    let living = world.living_agents();
    for &id in &living {
        beliefs[id].sense(world, radius);
    }
    let snapshot: Vec<BeliefState> = living.iter().map(|&id| beliefs[id].clone()).collect();
    let mut delivered = 0;
    for (si, &sender) in living.iter().enumerate() {
        for &receiver in &living {
            if sender == receiver {
                continue;
            }
            if rng.gen::<f64>() < comm_success {
                beliefs[receiver].merge_from(&snapshot[si]);
                delivered += 1;
            }
        }
    }
    delivered
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::{PatrolGraph, Position};

    fn far_apart() -> Arc<PatrolGraph> {
        let pos = (0..4).map(|i| Position::new(10.0 * i as f64, 0.0)).collect();
        Arc::new(PatrolGraph::new(pos, &[(0, 1, None), (1, 2, None), (2, 3, None)]).unwrap())
    }

    fn run(comm: f64, seed: u64) -> (Vec<BeliefState>, Vec<usize>) {
        let mut world = WorldState::reset(far_apart(), 2, 0).unwrap();
        let mut beliefs: Vec<_> = (0..2).map(|i| BeliefState::initial(i, &world)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut delivered = Vec::new();
        for _ in 0..20 {
            world.advance();
            delivered.push(broadcast_and_merge(&world, &mut beliefs, 1.0, comm, &mut rng));
        }
        (beliefs, delivered)
    }

    #[test]
    fn full_comms_share_in_radius_knowledge() {
        let mut world = WorldState::reset(far_apart(), 2, 0).unwrap();
        let mut beliefs: Vec<_> = (0..2).map(|i| BeliefState::initial(i, &world)).collect();
        world.advance();
        world.advance();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        broadcast_and_merge(&world, &mut beliefs, 1.0, 1.0, &mut rng);
        for b in &beliefs {
            assert_eq!(b.node_stamp(0), 2);
            assert_eq!(b.node_stamp(1), 2);
            assert_eq!(b.node_stamp(3), 0);
            assert_eq!(b.agent(0).unwrap().stamp, 2);
            assert_eq!(b.agent(1).unwrap().stamp, 2);
        }
    }

    #[test]
    fn zero_comms_only_own_observations() {
        let mut world = WorldState::reset(far_apart(), 2, 0).unwrap();
        let mut beliefs: Vec<_> = (0..2).map(|i| BeliefState::initial(i, &world)).collect();
        world.advance();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(broadcast_and_merge(&world, &mut beliefs, 1.0, 0.0, &mut rng), 0);
        assert_eq!(beliefs[0].node_stamp(0), 1);
        assert_eq!(beliefs[0].node_stamp(1), 0);
        assert_eq!(beliefs[1].node_stamp(1), 1);
        assert_eq!(beliefs[1].node_stamp(0), 0);
        // Stale entries extrapolate: node 1 known as 0 at t = 0, now t = 1.
        assert_eq!(beliefs[0].idleness(1, 1), 1.0);
    }

    #[test]
    fn lossy_delivery_is_reproducible() {
        let (a, da) = run(0.5, 11);
        let (b, db) = run(0.5, 11);
        assert_eq!(a, b);
        assert_eq!(da, db);
    }
}
