use std::sync::Arc;

use magec_autodiff::Tape;
use magec_core::env::{observe, BeliefState, EnvConfig, Location, Observation, PatrolEnv, WorldState};
use magec_core::graph::{random_geometric, GeneratorConfig, PatrolGraph, Position};
use magec_core::policy::{
    argmax_action, entropy, evaluate, sample_action, ActorConfig, ActorParams, ObsBatch,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(layers: usize, max_neighbors: usize) -> ActorConfig {
    ActorConfig {
        layers,
        hidden: 8,
        max_neighbors,
    }
}

fn env_cfg(max_neighbors: usize) -> EnvConfig {
    EnvConfig {
        max_neighbors,
        ..EnvConfig::default()
    }
}

/// Observations from a short random rollout so idleness values differ.
fn warmed_observations(g: Arc<PatrolGraph>, agents: usize, seed: u64, max_nb: usize) -> Vec<Observation> {
    let cfg = EnvConfig {
        seed,
        obs_radius: 7.0,
        comm_success: 0.6,
        ..env_cfg(max_nb)
    };
    let mut env = PatrolEnv::new(g, agents, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..rng.gen_range(5..40) {
        let actions: Vec<usize> = env
            .living_agents()
            .into_iter()
            .map(|a| {
                env.world().continue_action(a).unwrap().unwrap_or_else(|| {
                    let mask = env.world().action_mask(a, max_nb).unwrap();
                    let ok: Vec<usize> = (0..max_nb).filter(|&i| mask[i]).collect();
                    ok[rng.gen_range(0..ok.len())]
                })
            })
            .collect();
        env.step(&actions).unwrap();
    }
    env.observe_all().unwrap()
}

fn log_probs(actor: &ActorParams, batch: &ObsBatch) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = actor.log_probs(&mut tape, batch).unwrap();
    tape.value(v).data().to_vec()
}

/// Reorders the union graph's node rows and edge list.
fn shuffled(batch: &ObsBatch, rng: &mut ChaCha8Rng) -> ObsBatch {
    use rand::seq::SliceRandom;
    let n = batch.node_count;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    // perm[new] = old
    let mut new_of = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        new_of[old] = new;
    }
    let mut out = batch.clone();
    let nf = batch.node_features.cols();
    for (new, &old) in perm.iter().enumerate() {
        for c in 0..nf {
            out.node_features.set(new, c, batch.node_features.get(old, c));
        }
    }
    let mut eperm: Vec<usize> = (0..batch.edge_src.len()).collect();
    eperm.shuffle(rng);
    let ef = batch.edge_features.cols();
    for (new, &old) in eperm.iter().enumerate() {
        out.edge_src[new] = new_of[batch.edge_src[old]];
        out.edge_dst[new] = new_of[batch.edge_dst[old]];
        for c in 0..ef {
            out.edge_features.set(new, c, batch.edge_features.get(old, c));
        }
    }
    for r in &mut out.neighbor_rows {
        *r = new_of[*r];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_ignores_storage_order(n in 4usize..18, gseed in any::<u64>(), seed in any::<u64>(), agents in 1usize..4) {
        let g = Arc::new(random_geometric(&GeneratorConfig::new(n, gseed)).unwrap());
        let obs = warmed_observations(g, agents.min(n), seed, 6);
        let refs: Vec<&Observation> = obs.iter().collect();
        let actor = ActorParams::new(small(3, 6), seed);
        let batch = actor.batch(&refs).unwrap();
        let base = log_probs(&actor, &batch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let other = log_probs(&actor, &shuffled(&batch, &mut rng));
        for (a, b) in base.iter().zip(&other) {
            if a.is_finite() {
                prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
            } else {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn distributions_are_valid_on_any_graph(n in 2usize..30, gseed in any::<u64>(), seed in any::<u64>(), agents in 1usize..6) {
        // One set of weights serves every graph size and agent count.
        let actor = ActorParams::new(small(2, 10), 5);
        let g = Arc::new(random_geometric(&GeneratorConfig::new(n, gseed)).unwrap());
        let obs = warmed_observations(g.clone(), agents.min(n), seed, 10);
        let refs: Vec<&Observation> = obs.iter().collect();
        let dists = actor.distributions(&refs).unwrap();
        prop_assert_eq!(dists.len(), obs.len());
        for (o, d) in obs.iter().zip(&dists) {
            prop_assert_eq!(d.len(), 10);
            let total: f64 = d.iter().filter(|l| l.is_finite()).map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (slot, &l) in d.iter().enumerate() {
                prop_assert_eq!(l.is_finite(), o.action_mask[slot]);
            }
            if let Some(f) = o.forced_action {
                prop_assert_eq!(d[f], 0.0);
            }
            prop_assert!(o.action_mask[argmax_action(d)]);
        }
    }
}

/// Path `0 - 1 - ... - (n-1)` with unit spacing.
fn path(n: usize) -> Arc<PatrolGraph> {
    let pos = (0..n).map(|i| Position::new(i as f64, 0.0)).collect();
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i, None)).collect();
    Arc::new(PatrolGraph::new(pos, &edges).unwrap())
}

fn observe_at(g: Arc<PatrolGraph>, node: usize, idleness: &[f64], max_nb: usize) -> Observation {
    let mut world = WorldState::reset(g, 1, 0).unwrap();
    world.set_location(0, Location::AtNode(node)).unwrap();
    world.set_idleness(idleness);
    let belief = BeliefState::initial(0, &world);
    observe(&world, &belief, 0, &env_cfg(max_nb)).unwrap()
}

#[test]
fn receptive_field_is_k_hops() {
    let k = 3;
    let actor = ActorParams::new(small(k, 4), 2);
    let g = path(10);
    let base = vec![5.0; 10];
    let d0 = actor.distributions(&[&observe_at(g.clone(), 0, &base, 4)]).unwrap();
    // The agent node hangs off node 0, so node k+1 is k+1 hops from the
    // decision node and node k is k hops away.
    let mut far = base.clone();
    far[k + 1] = 40.0;
    far[9] = 0.0;
    let d_far = actor.distributions(&[&observe_at(g.clone(), 0, &far, 4)]).unwrap();
    assert_eq!(d0, d_far);
    let mut near = base.clone();
    near[k] = 40.0;
    let obs = observe_at(g, 0, &near, 4);
    let batch = actor.batch(&[&obs]).unwrap();
    let mut tape = Tape::new();
    let emb = actor.embed(&mut tape, &batch).unwrap();
    let scores = actor.score_neighbors(&mut tape, &emb, &batch).unwrap();
    let base_obs = observe_at(path(10), 0, &base, 4);
    let base_batch = actor.batch(&[&base_obs]).unwrap();
    let mut tape2 = Tape::new();
    let emb2 = actor.embed(&mut tape2, &base_batch).unwrap();
    let scores2 = actor.score_neighbors(&mut tape2, &emb2, &base_batch).unwrap();
    assert_ne!(tape.value(scores).data(), tape2.value(scores2).data());
}

#[test]
fn scores_are_zero_padded_in_neighbor_order() {
    let actor = ActorParams::new(small(2, 4), 7);
    let g = path(5);
    let obs = observe_at(g, 2, &[1.0, 9.0, 0.0, 3.0, 6.0], 4);
    assert_eq!(obs.decision_neighbors, vec![1, 3]);
    let batch = actor.batch(&[&obs]).unwrap();
    let mut tape = Tape::new();
    let emb = actor.embed(&mut tape, &batch).unwrap();
    let scores = actor.score_neighbors(&mut tape, &emb, &batch).unwrap();
    let s = tape.value(scores).data().to_vec();
    assert_eq!(s.len(), 4);
    assert_ne!(s[0], 0.0);
    assert_ne!(s[1], 0.0);
    assert_eq!(&s[2..], &[0.0, 0.0]);
    assert_ne!(s[0], s[1]);
}

#[test]
fn mirror_neighbors_score_equally() {
    // Star with two leaves at equal distance and equal idleness.
    let pos = vec![Position::new(0.0, 0.0), Position::new(-2.0, 0.0), Position::new(2.0, 0.0)];
    let g = Arc::new(PatrolGraph::new(pos, &[(0, 1, None), (0, 2, None)]).unwrap());
    let obs = observe_at(g, 0, &[0.0, 7.0, 7.0], 4);
    let actor = ActorParams::new(small(3, 4), 11);
    let batch = actor.batch(&[&obs]).unwrap();
    let mut tape = Tape::new();
    let emb = actor.embed(&mut tape, &batch).unwrap();
    let scores = actor.score_neighbors(&mut tape, &emb, &batch).unwrap();
    let s = tape.value(scores).data().to_vec();
    assert_eq!(s[0], s[1]);
    assert_eq!(&s[2..], &[0.0, 0.0]);
}

#[test]
fn sampling_matches_probabilities() {
    let probs: [f64; 5] = [0.1, 0.0, 0.45, 0.3, 0.15];
    let logp: Vec<f64> = probs.iter().map(|p| if *p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        let (a, l) = sample_action(&logp, &mut rng);
        assert_eq!(l, logp[a]);
        counts[a] += 1;
    }
    assert_eq!(counts[1], 0);
    for (c, p) in counts.iter().zip(probs) {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma.max(1.0), "{counts:?}");
    }
}

#[test]
fn untrained_selector_is_uniform_with_entropy_ln_n() {
    let mut actor = ActorParams::new(small(2, 6), 1);
    for name in ["select.w2", "select.b2"] {
        let id = actor.params().id_of(name).unwrap();
        actor.params_mut().get_mut(id).scale_in_place(0.0);
    }
    let g = Arc::new(random_geometric(&GeneratorConfig::new(15, 4)).unwrap());
    for v in 0..g.node_count() {
        let obs = observe_at(g.clone(), v, &[3.0; 15], 6);
        let d = &actor.distributions(&[&obs]).unwrap()[0];
        let deg = g.degree(v) as f64;
        assert!((entropy(d) - deg.ln()).abs() < 1e-12);
        for &l in d.iter().filter(|l| l.is_finite()) {
            assert!((l + deg.ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let g = Arc::new(random_geometric(&GeneratorConfig::new(12, 2)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs: Vec<Observation> = (0..12)
        .filter(|&v| g.degree(v) >= 2)
        .map(|v| {
            let z: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..80.0)).collect();
            observe_at(g.clone(), v, &z, 6)
        })
        .collect();
    let refs: Vec<&Observation> = obs.iter().collect();
    let actor = ActorParams::new(small(3, 6), 3);
    let batch = actor.batch(&refs).unwrap();
    let mut tape = Tape::new();
    let logp = actor.log_probs(&mut tape, &batch).unwrap();
    let actions: Vec<usize> = refs.iter().map(|o| o.action_mask.iter().position(|&m| m).unwrap()).collect();
    let (picked, ent) = evaluate(&mut tape, logp, &actions).unwrap();
    let a = tape.sum(picked).unwrap();
    let b = tape.sum(ent).unwrap();
    let loss = tape.add(a, b).unwrap();
    let mut grads = actor.params().zero_grads();
    tape.backward(loss, &mut grads).unwrap();
    for (id, name, _) in actor.params().iter() {
        let gsum: f64 = grads.get(id).data().iter().map(|x| x.abs()).sum();
        assert!(gsum > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let actor = ActorParams::new(small(3, 10), 21);
    let back = ActorParams::from_text(&actor.to_text()).unwrap();
    let g = Arc::new(random_geometric(&GeneratorConfig::new(9, 9)).unwrap());
    let obs = warmed_observations(g, 2, 4, 10);
    let refs: Vec<&Observation> = obs.iter().collect();
    assert_eq!(actor.distributions(&refs).unwrap(), back.distributions(&refs).unwrap());
    assert!(ActorParams::from_text("magec-actor v1\nlayers 3 hidden 8 max_neighbors 10\n").is_err());
}
