//! Graph-network actor: edge-attributed GraphSAGE layers with
//! jumping-knowledge concatenation, a per-neighbor scorer and a selector
//! MLP producing a masked categorical distribution over neighbor slots.

use std::collections::VecDeque;
use std::fmt::Write as _;

use magec_autodiff::{ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{edge_feature_width, Observation, NODE_FEATURES};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("observation has {found} {what} features, actor expects {expected}")]
    FeatureMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("decision node {0} has no neighbors")]
    NoNeighbors(usize),
    #[error("empty observation batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActorConfig {
    /// Message-passing layers `K`.
    pub layers: usize,
    pub hidden: usize,
    pub max_neighbors: usize,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            layers: 10,
            hidden: 64,
            max_neighbors: 10,
        }
    }
}

impl ActorConfig {
    pub fn edge_features(&self) -> usize {
        edge_feature_width(self.max_neighbors)
    }

    /// Width of the jumping-knowledge embedding.
    pub fn embedding_width(&self) -> usize {
        self.layers * self.hidden
    }
}

#[derive(Clone, Debug)]
struct Ids {
    layer_w: Vec<ParamId>,
    layer_b: Vec<ParamId>,
    score_w1: ParamId,
    score_b1: ParamId,
    score_w2: ParamId,
    score_b2: ParamId,
    select_w1: ParamId,
    select_b1: ParamId,
    select_w2: ParamId,
    select_b2: ParamId,
}

impl Ids {
    fn resolve(params: &ParamSet, layers: usize) -> Result<Self, PolicyError> {
        let get = |name: String| {
            params
                .id_of(&name)
                .ok_or_else(|| PolicyError::Checkpoint(format!("missing tensor `{name}`")))
        };
        Ok(Self {
            layer_w: (0..layers).map(|k| get(format!("sage{k}.w"))).collect::<Result<_, _>>()?,
            layer_b: (0..layers).map(|k| get(format!("sage{k}.b"))).collect::<Result<_, _>>()?,
            score_w1: get("score.w1".into())?,
            score_b1: get("score.b1".into())?,
            score_w2: get("score.w2".into())?,
            score_b2: get("score.b2".into())?,
            select_w1: get("select.w1".into())?,
            select_b1: get("select.b1".into())?,
            select_w2: get("select.w2".into())?,
            select_b2: get("select.b2".into())?,
        })
    }
}

/// All actor weights. Every agent shares one instance.
#[derive(Clone, Debug)]
pub struct ActorParams {
    config: ActorConfig,
    params: ParamSet,
    ids: Ids,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

const HEADER: &str = "magec-actor v1";

impl ActorParams {
    pub fn new(config: ActorConfig, seed: u64) -> Self {
        assert!(config.layers >= 1 && config.hidden >= 1 && config.max_neighbors >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = config.hidden;
        let ef = config.edge_features();
        let mut width = NODE_FEATURES;
        for k in 0..config.layers {
            params.insert(format!("sage{k}.w"), glorot(2 * width + ef, h, &mut rng));
            params.insert(format!("sage{k}.b"), Tensor::zeros(1, h));
            width = h;
        }
        let z = config.embedding_width();
        params.insert("score.w1", glorot(z, h, &mut rng));
        params.insert("score.b1", Tensor::zeros(1, h));
        params.insert("score.w2", glorot(h, 1, &mut rng));
        params.insert("score.b2", Tensor::zeros(1, 1));
        let nb = config.max_neighbors;
        params.insert("select.w1", glorot(nb, h, &mut rng));
        params.insert("select.b1", Tensor::zeros(1, h));
        let mut last = glorot(h, nb, &mut rng);
        // Near-uniform initial policy.
        last.scale_in_place(0.01);
        params.insert("select.w2", last);
        params.insert("select.b2", Tensor::zeros(1, nb));
        let ids = Ids::resolve(&params, config.layers).expect("fresh parameter set");
        Self { config, params, ids }
    }

    pub fn config(&self) -> ActorConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Checkpoint text: an architecture line followed by the tensors.
    pub fn to_text(&self) -> String {
        format!(
            "{HEADER}\nlayers {} hidden {} max_neighbors {}\n{}",
            self.config.layers,
            self.config.hidden,
            self.config.max_neighbors,
            self.params.to_text()
        )
    }

    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let mut lines = text.splitn(3, '\n');
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(PolicyError::Checkpoint(format!("expected `{HEADER}` header")));
        }
        let arch = lines.next().unwrap_or_default();
        let fields: Vec<&str> = arch.split_whitespace().collect();
        let value = |key: &str| -> Result<usize, PolicyError> {
            fields
                .windows(2)
                .find(|w| w[0] == key)
                .and_then(|w| w[1].parse().ok())
                .ok_or_else(|| PolicyError::Checkpoint(format!("architecture line lacks `{key}`")))
        };
        let config = ActorConfig {
            layers: value("layers")?,
            hidden: value("hidden")?,
            max_neighbors: value("max_neighbors")?,
        };
        let params = ParamSet::from_text(lines.next().unwrap_or_default())?;
        let ids = Ids::resolve(&params, config.layers)?;
        let expected = ActorParams::new(config, 0);
        for (id, name, t) in expected.params.iter() {
            let _ = id;
            let found = params
                .id_of(name)
                .map(|i| params.get(i).shape())
                .ok_or_else(|| PolicyError::Checkpoint(format!("missing tensor `{name}`")))?;
            if found != t.shape() {
                return Err(PolicyError::Checkpoint(format!(
                    "tensor `{name}` has shape {found:?}, expected {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params, ids })
    }

    /// Human-readable architecture summary.
    pub fn policy_info(&self) -> String {
        let c = self.config;
        let mut out = String::new();
        let _ = writeln!(out, "layers (K) = {}", c.layers);
        let _ = writeln!(out, "hidden = {}", c.hidden);
        let _ = writeln!(out, "max_neighbors = {}", c.max_neighbors);
        let _ = writeln!(out, "node_features = {}", NODE_FEATURES);
        let _ = writeln!(out, "edge_features = {}", c.edge_features());
        let _ = writeln!(out, "embedding = {}", c.embedding_width());
        let _ = writeln!(out, "aggregator = mean, activation = relu, jumping_knowledge = concat");
        let _ = writeln!(out, "scorer = {} -> {} -> 1 (tanh)", c.embedding_width(), c.hidden);
        let _ = writeln!(
            out,
            "selector = {} -> {} -> {} (tanh)",
            c.max_neighbors, c.hidden, c.max_neighbors
        );
        let _ = writeln!(out, "parameters = {}", self.params.scalar_count());
        out
    }

    /// Message passing over `batch`, returning every layer's output and the
    /// concatenated embedding.
    pub fn embed(&self, tape: &mut Tape, batch: &ObsBatch) -> Result<Embedding, PolicyError> {
        let mut h = tape.constant(batch.node_features.clone());
        let edges = tape.constant(batch.edge_features.clone());
        let mut layers = Vec::with_capacity(self.config.layers);
        for k in 0..self.config.layers {
            let w = tape.param(&self.params, self.ids.layer_w[k]);
            let b = tape.param(&self.params, self.ids.layer_b[k]);
            let sender = tape.gather_rows(h, &batch.edge_src)?;
            let message = tape.concat_cols(&[sender, edges])?;
            let aggregate = tape.segment_mean(message, &batch.edge_dst, batch.node_count)?;
            let input = tape.concat_cols(&[h, aggregate])?;
            let pre = tape.matmul(input, w)?;
            let pre = tape.add_row(pre, b)?;
            let act = tape.relu(pre)?;
            h = tape.l2_normalize_rows(act)?;
            layers.push(h);
        }
        let z = if layers.len() == 1 {
            layers[0]
        } else {
            tape.concat_cols(&layers)?
        };
        Ok(Embedding { layers, z })
    }

    /// Scores of every decision neighbor scattered into a zero-padded
    /// `B × max_neighbors` matrix in neighbor-index order.
    pub fn score_neighbors(
        &self,
        tape: &mut Tape,
        emb: &Embedding,
        batch: &ObsBatch,
    ) -> Result<Var, PolicyError> {
        let p = &self.params;
        let zn = tape.gather_rows(emb.z, &batch.neighbor_rows)?;
        let (w1, b1) = (tape.param(p, self.ids.score_w1), tape.param(p, self.ids.score_b1));
        let (w2, b2) = (tape.param(p, self.ids.score_w2), tape.param(p, self.ids.score_b2));
        let hidden = tape.matmul(zn, w1)?;
        let hidden = tape.add_row(hidden, b1)?;
        let hidden = tape.tanh(hidden)?;
        let s = tape.matmul(hidden, w2)?;
        let s = tape.add_row(s, b2)?;
        Ok(tape.scatter(s, &batch.neighbor_slots, batch.len(), self.config.max_neighbors)?)
    }

    /// Selector MLP and masked log-softmax over padded scores.
    pub fn action_distribution(
        &self,
        tape: &mut Tape,
        scores: Var,
        mask: &[bool],
    ) -> Result<Var, PolicyError> {
        let p = &self.params;
        let (w1, b1) = (tape.param(p, self.ids.select_w1), tape.param(p, self.ids.select_b1));
        let (w2, b2) = (tape.param(p, self.ids.select_w2), tape.param(p, self.ids.select_b2));
        let hidden = tape.matmul(scores, w1)?;
        let hidden = tape.add_row(hidden, b1)?;
        let hidden = tape.tanh(hidden)?;
        let logits = tape.matmul(hidden, w2)?;
        let logits = tape.add_row(logits, b2)?;
        Ok(tape.masked_log_softmax(logits, mask)?)
    }

    /// Full forward pass: `B × max_neighbors` log-probabilities.
    pub fn log_probs(&self, tape: &mut Tape, batch: &ObsBatch) -> Result<Var, PolicyError> {
        let emb = self.embed(tape, batch)?;
        let scores = self.score_neighbors(tape, &emb, batch)?;
        self.action_distribution(tape, scores, &batch.mask)
    }

    /// Batch for this actor's receptive field.
    pub fn batch(&self, observations: &[&Observation]) -> Result<ObsBatch, PolicyError> {
        ObsBatch::new(observations, self.config, Some(self.config.layers))
    }

    /// Log-probabilities per observation, without gradient bookkeeping.
    pub fn distributions(&self, observations: &[&Observation]) -> Result<Vec<Vec<f64>>, PolicyError> {
        if observations.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch(observations)?;
        let mut tape = Tape::new();
        let logp = self.log_probs(&mut tape, &batch)?;
        let v = tape.value(logp);
        Ok((0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect())
    }
}

/// Per-layer node states and the jumping-knowledge concatenation.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub layers: Vec<Var>,
    pub z: Var,
}

/// Several observations flattened into one disjoint-union graph.
#[derive(Clone, Debug)]
pub struct ObsBatch {
    pub node_features: Tensor,
    pub edge_features: Tensor,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub node_count: usize,
    /// First batch row of each observation's nodes.
    pub node_offsets: Vec<usize>,
    /// Observation-local id of each batch row.
    pub local_ids: Vec<usize>,
    /// Batch rows of the decision neighbors, observation-major, slot order.
    pub neighbor_rows: Vec<usize>,
    /// Flat `b * max_neighbors + slot` position of each neighbor row.
    pub neighbor_slots: Vec<usize>,
    /// Flattened `B × max_neighbors` action mask.
    pub mask: Vec<bool>,
    batch: usize,
}

impl ObsBatch {
    /// Builds the union graph. With `hops = Some(k)` each observation is cut
    /// to the nodes within `k` hops of its decision node, which is exactly
    /// the set that can influence that agent's action.
    pub fn new(
        observations: &[&Observation],
        config: ActorConfig,
        hops: Option<usize>,
    ) -> Result<Self, PolicyError> {
        if observations.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let nb = config.max_neighbors;
        let ef = config.edge_features();
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut out = Self {
            node_features: Tensor::zeros(0, 0),
            edge_features: Tensor::zeros(0, 0),
            edge_src: Vec::new(),
            edge_dst: Vec::new(),
            node_count: 0,
            node_offsets: Vec::with_capacity(observations.len()),
            local_ids: Vec::new(),
            neighbor_rows: Vec::new(),
            neighbor_slots: Vec::new(),
            mask: Vec::with_capacity(observations.len() * nb),
            batch: observations.len(),
        };
        for (b, obs) in observations.iter().enumerate() {
            if obs.node_features.cols() != NODE_FEATURES {
                return Err(PolicyError::FeatureMismatch {
                    what: "node",
                    expected: NODE_FEATURES,
                    found: obs.node_features.cols(),
                });
            }
            if obs.edge_features.cols() != ef {
                return Err(PolicyError::FeatureMismatch {
                    what: "edge",
                    expected: ef,
                    found: obs.edge_features.cols(),
                });
            }
            if obs.action_mask.len() != nb {
                return Err(PolicyError::FeatureMismatch {
                    what: "mask",
                    expected: nb,
                    found: obs.action_mask.len(),
                });
            }
            if obs.decision_neighbors.is_empty() {
                return Err(PolicyError::NoNeighbors(obs.decision_node));
            }
            let n = obs.node_count();
            let keep: Vec<bool> = match hops {
                Some(k) => hop_distances(obs, obs.decision_node)
                    .into_iter()
                    .map(|d| d <= k)
                    .collect(),
                None => vec![true; n],
            };
            let offset = out.node_count;
            let mut row_of = vec![usize::MAX; n];
            for v in (0..n).filter(|&v| keep[v]) {
                row_of[v] = out.node_count;
                out.node_count += 1;
                out.local_ids.push(v);
                nodes.extend_from_slice(obs.node_features.row_slice(v));
            }
            out.node_offsets.push(offset);
            for (e, (&u, &v)) in obs.edge_src.iter().zip(&obs.edge_dst).enumerate() {
                if keep[u] && keep[v] {
                    out.edge_src.push(row_of[u]);
                    out.edge_dst.push(row_of[v]);
                    edges.extend_from_slice(obs.edge_features.row_slice(e));
                }
            }
            for (slot, &u) in obs.decision_neighbors.iter().enumerate() {
                if slot >= nb {
                    break;
                }
                out.neighbor_rows.push(row_of[u]);
                out.neighbor_slots.push(b * nb + slot);
            }
            out.mask.extend_from_slice(&obs.action_mask);
        }
        out.node_features = Tensor::from_vec(out.node_count, NODE_FEATURES, nodes)?;
        out.edge_features = Tensor::from_vec(out.edge_src.len(), ef, edges)?;
        Ok(out)
    }

    /// Number of observations.
    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }
}

/// Hop counts from `source` over the observation's directed edges
/// (`usize::MAX` when unreachable).
pub fn hop_distances(obs: &Observation, source: usize) -> Vec<usize> {
    let n = obs.node_count();
    let mut out_edges = vec![Vec::new(); n];
    for (&u, &v) in obs.edge_src.iter().zip(&obs.edge_dst) {
        out_edges[u].push(v);
    }
    let mut dist = vec![usize::MAX; n];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for &v in &out_edges[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Draws an action from a log-probability row; returns it with its log-prob.
pub fn sample_action<R: Rng>(logp: &[f64], rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &l) in logp.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        last = a;
        acc += l.exp();
        if u < acc {
            return (a, l);
        }
    }
    (last, logp[last])
}

/// Most probable action, lowest index on ties.
pub fn argmax_action(logp: &[f64]) -> usize {
    let mut best = 0;
    for (a, &l) in logp.iter().enumerate() {
        if l > logp[best] {
            best = a;
        }
    }
    best
}

pub fn entropy(logp: &[f64]) -> f64 {
    -logp.iter().filter(|l| l.is_finite()).map(|&l| l.exp() * l).sum::<f64>()
}

/// Differentiable log-prob of `actions` and per-row entropy, both `B × 1`.
pub fn evaluate(tape: &mut Tape, logp: Var, actions: &[usize]) -> Result<(Var, Var), PolicyError> {
    let picked = tape.pick_cols(logp, actions)?;
    let ent = tape.entropy_rows(logp)?;
    Ok((picked, ent))
}
