//! Non-learning reference policies.

use rand::Rng;

use crate::env::Observation;

/// Uniform choice among unmasked actions.
pub fn random_walk_policy<R: Rng>(obs: &Observation, rng: &mut R) -> usize {
    if let Some(a) = obs.forced_action {
        return a;
    }
    let allowed: Vec<usize> = (0..obs.action_mask.len()).filter(|&a| obs.action_mask[a]).collect();
    allowed[rng.gen_range(0..allowed.len())]
}

/// Neighbor with the largest believed idleness per meter of travel,
/// lowest index on ties.
pub fn greedy_idleness_policy(obs: &Observation) -> usize {
    if let Some(a) = obs.forced_action {
        return a;
    }
    let mut best: Option<(usize, f64)> = None;
    for (slot, (&u, &len)) in obs
        .decision_neighbors
        .iter()
        .zip(&obs.decision_edge_lengths)
        .enumerate()
    {
        if !obs.action_mask.get(slot).copied().unwrap_or(false) {
            continue;
        }
        let score = obs.node_idleness[u] / len;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((slot, score));
        }
    }
    best.map(|(slot, _)| slot).expect("mask has an allowed action")
}
