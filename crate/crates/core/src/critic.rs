//! Centralized state-value critic used only while training.

use magec_autodiff::{ParamId, ParamSet, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Location, WorldState};

#[derive(Debug, Error)]
pub enum CriticError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{agents} agents exceed the critic's capacity of {max}")]
    TooManyAgents { agents: usize, max: usize },
    #[error("state has {found} nodes, critic was built for {expected}")]
    NodeCountMismatch { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticConfig {
    pub nodes: usize,
    pub max_agents: usize,
    pub hidden: usize,
    pub zeta_scale: f64,
}

impl CriticConfig {
    pub fn new(nodes: usize, max_agents: usize, zeta_scale: f64) -> Self {
        Self {
            nodes,
            max_agents,
            hidden: 128,
            zeta_scale,
        }
    }

    /// `m` idleness values, `m²` adjacency weights, and `2m + 2` per agent.
    pub fn input_width(&self) -> usize {
        let m = self.nodes;
        m + m * m + self.max_agents * (2 * m + 2)
    }
}

/// Encodes the global state: normalized idleness, the weight-normalized
/// adjacency matrix, then per agent a current-node one-hot, a
/// destination one-hot, edge progress and an alive flag. Dead agents and
/// padding slots are all zeros.
pub fn critic_features(world: &WorldState, config: &CriticConfig) -> Result<Vec<f64>, CriticError> {
    let graph = world.graph();
    let m = graph.node_count();
    if m != config.nodes {
        return Err(CriticError::NodeCountMismatch {
            expected: config.nodes,
            found: m,
        });
    }
    if world.agents().len() > config.max_agents {
        return Err(CriticError::TooManyAgents {
            agents: world.agents().len(),
            max: config.max_agents,
        });
    }
    let mut f = vec![0.0; config.input_width()];
    for (slot, z) in f.iter_mut().zip(world.idleness()) {
        *slot = (z / config.zeta_scale).min(1.0);
    }
    let scale = graph.max_edge_weight();
    for e in graph.edges() {
        f[m + e.a * m + e.b] = e.weight / scale;
        f[m + e.b * m + e.a] = e.weight / scale;
    }
    let base = m + m * m;
    for a in world.agents().iter().filter(|a| a.alive) {
        let block = &mut f[base + a.id * (2 * m + 2)..base + (a.id + 1) * (2 * m + 2)];
        let (current, dest, progress) = match a.location {
            Location::AtNode(v) => (v, v, 0.0),
            Location::OnEdge { from, to, progress } => (from, to, progress),
        };
        block[current] = 1.0;
        block[m + dest] = 1.0;
        block[2 * m] = progress;
        block[2 * m + 1] = 1.0;
    }
    Ok(f)
}

const HEADER: &str = "magec-critic v1";

/// MLP `input → hidden → hidden → 1` with tanh activations.
#[derive(Clone, Debug)]
pub struct CriticParams {
    config: CriticConfig,
    params: ParamSet,
    ids: [ParamId; 6],
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

const NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl CriticParams {
    pub fn new(config: CriticConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, h) = (config.input_width(), config.hidden);
        let mut params = ParamSet::new();
        params.insert("w1", glorot(f, h, &mut rng));
        params.insert("b1", Tensor::zeros(1, h));
        params.insert("w2", glorot(h, h, &mut rng));
        params.insert("b2", Tensor::zeros(1, h));
        params.insert("w3", glorot(h, 1, &mut rng));
        params.insert("b3", Tensor::zeros(1, 1));
        let ids = NAMES.map(|n| params.id_of(n).expect("inserted"));
        Self { config, params, ids }
    }

    pub fn config(&self) -> CriticConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Values of a `B × input_width` feature matrix, as `B × 1`.
    pub fn value(&self, tape: &mut Tape, features: Var) -> Result<Var, CriticError> {
        let p: Vec<Var> = self.ids.iter().map(|&id| tape.param(&self.params, id)).collect();
        let x = tape.matmul(features, p[0])?;
        let x = tape.add_row(x, p[1])?;
        let x = tape.tanh(x)?;
        let x = tape.matmul(x, p[2])?;
        let x = tape.add_row(x, p[3])?;
        let x = tape.tanh(x)?;
        let x = tape.matmul(x, p[4])?;
        Ok(tape.add_row(x, p[5])?)
    }

    /// Values of several encoded states.
    pub fn values(&self, rows: &[&[f64]]) -> Result<Vec<f64>, CriticError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let width = self.config.input_width();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(rows.len(), width, data)?);
        let v = self.value(&mut tape, x)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn to_text(&self) -> String {
        let c = self.config;
        format!(
            "{HEADER}\nnodes {} max_agents {} hidden {} zeta_scale {:?}\n{}",
            c.nodes,
            c.max_agents,
            c.hidden,
            c.zeta_scale,
            self.params.to_text()
        )
    }

    pub fn from_text(text: &str) -> Result<Self, CriticError> {
        let mut lines = text.splitn(3, '\n');
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(CriticError::Checkpoint(format!("expected `{HEADER}` header")));
        }
        let fields: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
        let field = |key: &str| {
            fields
                .windows(2)
                .find(|w| w[0] == key)
                .map(|w| w[1])
                .ok_or_else(|| CriticError::Checkpoint(format!("architecture line lacks `{key}`")))
        };
        let bad = |key: &str| CriticError::Checkpoint(format!("bad `{key}`"));
        let config = CriticConfig {
            nodes: field("nodes")?.parse().map_err(|_| bad("nodes"))?,
            max_agents: field("max_agents")?.parse().map_err(|_| bad("max_agents"))?,
            hidden: field("hidden")?.parse().map_err(|_| bad("hidden"))?,
            zeta_scale: field("zeta_scale")?.parse().map_err(|_| bad("zeta_scale"))?,
        };
        let params = ParamSet::from_text(lines.next().unwrap_or_default())?;
        let reference = CriticParams::new(config, 0);
        let mut ids = reference.ids;
        for (slot, name) in ids.iter_mut().zip(NAMES) {
            let id = params
                .id_of(name)
                .ok_or_else(|| CriticError::Checkpoint(format!("missing tensor `{name}`")))?;
            let want = reference.params.get(reference.params.id_of(name).expect("named")).shape();
            if params.get(id).shape() != want {
                return Err(CriticError::Checkpoint(format!("tensor `{name}` has the wrong shape")));
            }
            *slot = id;
        }
        Ok(Self { config, params, ids })
    }
}
