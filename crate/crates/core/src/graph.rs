//! Patrol graphs: validated geometric graphs, the text file format and the
//! bidirected, neighbor-indexed view used for discrete wayfinding.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type NodeId = usize;

/// Relative tolerance between a declared edge weight and the Euclidean
/// length of the edge.
pub const WEIGHT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Point at fraction `t` of the way from `self` to `other`.
    pub fn lerp(self, other: Position, t: f64) -> Position {
        Position {
            x: self.x + (other.x - self.x) * t,
            y: self.y + (other.y - self.y) * t,
        }
    }
}

pub fn euclidean_distance(p: Position, q: Position) -> f64 {
    (p.x - q.x).hypot(p.y - q.y)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("graph has no nodes")]
    Empty,
    #[error("node {0} declared twice")]
    DuplicateNode(NodeId),
    #[error("node {node} is out of range for a graph with {count} nodes")]
    UnknownNode { node: NodeId, count: usize },
    #[error("node {0} has non-finite coordinates")]
    NonFinitePosition(NodeId),
    #[error("edge ({0},{0}) is a self-loop")]
    SelfLoop(NodeId),
    #[error("edge ({0},{1}) appears more than once")]
    DuplicateEdge(NodeId, NodeId),
    #[error("edge ({a},{b}) has zero length")]
    ZeroLength { a: NodeId, b: NodeId },
    #[error("edge ({a},{b}) weight {given} does not match Euclidean length {euclidean}")]
    WeightMismatch {
        a: NodeId,
        b: NodeId,
        given: f64,
        euclidean: f64,
    },
    #[error("graph is disconnected: node {0} is unreachable from node 0")]
    Disconnected(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub weight: f64,
}

/// A connected, weighted, undirected graph embedded in the plane.
///
/// Edge weights always equal the Euclidean length between endpoints, so
/// at unit speed a weight is also a travel time in steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PatrolGraph {
    positions: Vec<Position>,
    edges: Vec<Edge>,
    view: BidirectedView,
    neighbor_weights: Vec<Vec<f64>>,
    max_weight: f64,
}

impl PatrolGraph {
    /// Builds and validates a graph. Edges are `(a, b, weight)`; a missing
    /// weight is filled with the Euclidean distance.
    pub fn new(
        positions: Vec<Position>,
        edges: &[(NodeId, NodeId, Option<f64>)],
    ) -> Result<Self, GraphError> {
        let m = positions.len();
        if m == 0 {
            return Err(GraphError::Empty);
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(GraphError::NonFinitePosition(i));
            }
        }
        let mut canonical = Vec::with_capacity(edges.len());
        let mut seen = std::collections::HashSet::new();
        for &(a, b, weight) in edges {
            for node in [a, b] {
                if node >= m {
                    return Err(GraphError::UnknownNode { node, count: m });
                }
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            let (lo, hi) = (a.min(b), a.max(b));
            if !seen.insert((lo, hi)) {
                return Err(GraphError::DuplicateEdge(lo, hi));
            }
            let length = euclidean_distance(positions[lo], positions[hi]);
            if length <= 0.0 {
                return Err(GraphError::ZeroLength { a: lo, b: hi });
            }
            if let Some(given) = weight {
                // Six-decimal files round weights; allow that much slack on
                // top of the relative tolerance.
                let slack = WEIGHT_TOLERANCE * length.max(1.0);
                if !(given > 0.0) || (given - length).abs() > slack {
                    return Err(GraphError::WeightMismatch {
                        a: lo,
                        b: hi,
                        given,
                        euclidean: length,
                    });
                }
            }
            canonical.push(Edge {
                a: lo,
                b: hi,
                weight: length,
            });
        }
        canonical.sort_by_key(|e| (e.a, e.b));

        let pairs: Vec<(NodeId, NodeId)> = canonical.iter().map(|e| (e.a, e.b)).collect();
        let view = BidirectedView::from_undirected(m, &pairs);
        if let Some(unreached) = view.first_unreachable(0) {
            return Err(GraphError::Disconnected(unreached));
        }
        let neighbor_weights = (0..m)
            .map(|v| {
                view.neighbors(v)
                    .iter()
                    .map(|&u| euclidean_distance(positions[v], positions[u]))
                    .collect()
            })
            .collect();
        let max_weight = canonical.iter().map(|e| e.weight).fold(0.0, f64::max);
        Ok(Self {
            positions,
            edges: canonical,
            view,
            neighbor_weights,
            max_weight,
        })
    }

    /// Parses the text graph format:
    ///
    /// ```text
    /// nodes <m>
    /// node <id> <x> <y>        (m lines)
    /// edges <count>
    /// edge <a> <b> [weight]    (count lines)
    /// ```
    ///
    /// Lines starting with `#` and blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let perr = |line: usize, message: String| GraphError::Parse { line, message };
        let mut last_line = 0;

        let (ln, header) = lines.next().ok_or_else(|| perr(1, "missing `nodes <m>` header".into()))?;
        let m: usize = parse_keyword(header, "nodes", 1)
            .and_then(|f| f[0].parse().ok())
            .ok_or_else(|| perr(ln, format!("expected `nodes <m>`, found `{header}`")))?;
        let mut positions: Vec<Option<Position>> = vec![None; m];
        for _ in 0..m {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| perr(last_line + 1, "fewer node lines than declared".into()))?;
            last_line = ln;
            let f = parse_keyword(line, "node", 3)
                .ok_or_else(|| perr(ln, format!("expected `node <id> <x> <y>`, found `{line}`")))?;
            let id: usize = f[0].parse().map_err(|_| perr(ln, format!("bad node id `{}`", f[0])))?;
            let x: f64 = f[1].parse().map_err(|_| perr(ln, format!("bad x `{}`", f[1])))?;
            let y: f64 = f[2].parse().map_err(|_| perr(ln, format!("bad y `{}`", f[2])))?;
            if id >= m {
                return Err(GraphError::UnknownNode { node: id, count: m });
            }
            if positions[id].replace(Position::new(x, y)).is_some() {
                return Err(GraphError::DuplicateNode(id));
            }
        }
        let positions: Vec<Position> = positions.into_iter().map(|p| p.expect("all ids seen")).collect();

        let (ln, header) = lines
            .next()
            .ok_or_else(|| perr(last_line + 1, "missing `edges <count>` header".into()))?;
        let count: usize = parse_keyword(header, "edges", 1)
            .and_then(|f| f[0].parse().ok())
            .ok_or_else(|| perr(ln, format!("expected `edges <count>`, found `{header}`")))?;
        last_line = ln;
        let mut edges = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| perr(last_line + 1, "fewer edge lines than declared".into()))?;
            last_line = ln;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.first() != Some(&"edge") || !(3..=4).contains(&fields.len()) {
                return Err(perr(ln, format!("expected `edge <a> <b> [weight]`, found `{line}`")));
            }
            let a: usize = fields[1].parse().map_err(|_| perr(ln, format!("bad node id `{}`", fields[1])))?;
            let b: usize = fields[2].parse().map_err(|_| perr(ln, format!("bad node id `{}`", fields[2])))?;
            let w = match fields.get(3) {
                Some(w) => Some(w.parse::<f64>().map_err(|_| perr(ln, format!("bad weight `{w}`")))?),
                None => None,
            };
            edges.push((a, b, w));
        }
        if let Some((ln, line)) = lines.next() {
            return Err(perr(ln, format!("unexpected trailing line `{line}`")));
        }
        Self::new(positions, &edges)
    }

    /// Canonical text form: ids ascending, six decimal places.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "nodes {}", self.positions.len());
        for (i, p) in self.positions.iter().enumerate() {
            let _ = writeln!(out, "node {i} {:.6} {:.6}", p.x, p.y);
        }
        let _ = writeln!(out, "edges {}", self.edges.len());
        for e in &self.edges {
            let _ = writeln!(out, "edge {} {} {:.6}", e.a, e.b, e.weight);
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn position(&self, v: NodeId) -> Position {
        self.positions[v]
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    /// Neighbor-indexed adjacency of this graph.
    pub fn view(&self) -> &BidirectedView {
        &self.view
    }

    /// Builds a fresh bidirected view (identical to [`PatrolGraph::view`]).
    pub fn bidirect(&self) -> BidirectedView {
        let pairs: Vec<(NodeId, NodeId)> = self.edges.iter().map(|e| (e.a, e.b)).collect();
        BidirectedView::from_undirected(self.positions.len(), &pairs)
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        self.view.neighbors(v)
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.view.degree(v)
    }

    pub fn max_degree(&self) -> usize {
        self.view.max_degree()
    }

    /// Length of the edge from `v` to its neighbor number `index`.
    pub fn neighbor_weight(&self, v: NodeId, index: usize) -> f64 {
        self.neighbor_weights[v][index]
    }

    pub fn edge_weight(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.view
            .neighbor_index(a, b)
            .map(|i| self.neighbor_weights[a][i])
    }

    pub fn max_edge_weight(&self) -> f64 {
        self.max_weight
    }

    /// Hop distances from `source` (`usize::MAX` when unreachable).
    pub fn hop_distances(&self, source: NodeId) -> Vec<usize> {
        self.view.hop_distances(source)
    }
}

fn parse_keyword<'a>(line: &'a str, keyword: &str, arity: usize) -> Option<Vec<&'a str>> {
    let mut fields = line.split_whitespace();
    if fields.next()? != keyword {
        return None;
    }
    let rest: Vec<&str> = fields.collect();
    (rest.len() == arity).then_some(rest)
}

/// Each undirected edge split into two directed edges, with every node
/// numbering its neighbors `0..deg(v)` in ascending node-id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BidirectedView {
    neighbors: Vec<Vec<NodeId>>,
    max_degree: usize,
}

impl BidirectedView {
    pub fn from_undirected(node_count: usize, edges: &[(NodeId, NodeId)]) -> Self {
        let mut neighbors = vec![Vec::new(); node_count];
        for &(a, b) in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let max_degree = neighbors.iter().map(Vec::len).max().unwrap_or(0);
        Self {
            neighbors,
            max_degree,
        }
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.neighbors[v].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Δ(G), the largest degree.
    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Index of `u` within `v`'s neighbor list.
    pub fn neighbor_index(&self, v: NodeId, u: NodeId) -> Option<usize> {
        self.neighbors[v].binary_search(&u).ok()
    }

    /// Every directed edge `(u → v)` together with the index of `u` in
    /// `v`'s neighbor list, ordered by `(v, index)`.
    pub fn directed_edges(&self) -> impl Iterator<Item = (NodeId, NodeId, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(v, list)| list.iter().enumerate().map(move |(i, &u)| (u, v, i)))
    }

    pub fn directed_edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Recovers the undirected edge set as `(lo, hi)` pairs, sorted.
    pub fn undirected_edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out: Vec<_> = self
            .directed_edges()
            .filter(|(u, v, _)| u < v)
            .map(|(u, v, _)| (u, v))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn hop_distances(&self, source: NodeId) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.neighbors.len()];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            for &u in &self.neighbors[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        dist
    }

    fn first_unreachable(&self, source: NodeId) -> Option<NodeId> {
        self.hop_distances(source).iter().position(|&d| d == usize::MAX)
    }
}

/// Parameters of the random geometric graph generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub nodes: usize,
    pub seed: u64,
    /// Side of the square the nodes are scattered in, meters.
    pub side: f64,
    /// Node pairs closer than this are joined.
    pub connect_radius: f64,
    pub max_degree: usize,
    /// Minimum spacing between nodes, meters.
    pub min_separation: f64,
}

impl GeneratorConfig {
    pub fn new(nodes: usize, seed: u64) -> Self {
        Self {
            nodes,
            seed,
            side: 6.0 * (nodes as f64).sqrt(),
            connect_radius: 9.0,
            max_degree: 4,
            min_separation: 2.5,
        }
    }
}

/// Random connected geometric graph. Nodes are scattered uniformly with a
/// minimum separation, short pairs are joined shortest-first subject to the
/// degree cap, and remaining components are bridged by their closest pair.
pub fn random_geometric(cfg: &GeneratorConfig) -> Result<PatrolGraph, GraphError> {
    if cfg.nodes == 0 {
        return Err(GraphError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut positions: Vec<Position> = Vec::with_capacity(cfg.nodes);
    let mut separation = cfg.min_separation;
    while positions.len() < cfg.nodes {
        let mut placed = false;
        for _ in 0..1000 {
            let p = round6(Position::new(
                rng.gen_range(0.0..cfg.side),
                rng.gen_range(0.0..cfg.side),
            ));
            if positions.iter().all(|&q| euclidean_distance(p, q) >= separation) {
                positions.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            separation *= 0.8;
        }
    }

    let n = positions.len();
    let mut pairs: Vec<(f64, NodeId, NodeId)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((euclidean_distance(positions[a], positions[b]), a, b));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));

    let mut degree = vec![0usize; n];
    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    for &(d, a, b) in &pairs {
        if d <= cfg.connect_radius && degree[a] < cfg.max_degree && degree[b] < cfg.max_degree {
            edges.push((a, b));
            degree[a] += 1;
            degree[b] += 1;
        }
    }
    loop {
        let view = BidirectedView::from_undirected(n, &edges);
        let hops = view.hop_distances(0);
        if hops.iter().all(|&h| h != usize::MAX) {
            break;
        }
        let crossing = |respect_cap: bool| {
            pairs.iter().copied().find(|&(_, a, b)| {
                let (ra, rb) = (hops[a] != usize::MAX, hops[b] != usize::MAX);
                ra != rb && (!respect_cap || (degree[a] < cfg.max_degree && degree[b] < cfg.max_degree))
            })
        };
        let (_, a, b) = crossing(true)
            .or_else(|| crossing(false))
            .expect("a crossing pair always exists while disconnected");
        edges.push((a, b));
        degree[a] += 1;
        degree[b] += 1;
    }
    let edges: Vec<_> = edges.into_iter().map(|(a, b)| (a, b, None)).collect();
    PatrolGraph::new(positions, &edges)
}

fn round6(p: Position) -> Position {
    let r = |v: f64| format!("{v:.6}").parse::<f64>().expect("formatted float parses");
    Position::new(r(p.x), r(p.y))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIANGLE: &str = "\
nodes 3
node 0 0 0
node 1 1 0
node 2 0 1
edges 3
edge 0 1
edge 0 2 1
edge 1 2 1.414214
";

    #[test]
    fn loads_triangle_with_filled_weights() {
        let g = PatrolGraph::parse(TRIANGLE).unwrap();
        assert_eq!(g.node_count(), 3);
        let mut w: Vec<f64> = g.edges().iter().map(|e| e.weight).collect();
        w.sort_by(f64::total_cmp);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 1.0);
        assert!((w[2] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_self_loop() {
        let text = "nodes 2\nnode 0 0 0\nnode 1 1 0\nedges 2\nedge 0 1\nedge 0 0\n";
        assert_eq!(PatrolGraph::parse(text), Err(GraphError::SelfLoop(0)));
    }

    #[test]
    fn rejects_duplicate_edge_and_mismatched_weight() {
        let dup = "nodes 2\nnode 0 0 0\nnode 1 1 0\nedges 2\nedge 0 1\nedge 1 0\n";
        assert_eq!(PatrolGraph::parse(dup), Err(GraphError::DuplicateEdge(0, 1)));
        let bad = "nodes 2\nnode 0 0 0\nnode 1 1 0\nedges 1\nedge 0 1 2.0\n";
        assert!(matches!(
            PatrolGraph::parse(bad),
            Err(GraphError::WeightMismatch { a: 0, b: 1, .. })
        ));
    }

    #[test]
    fn rejects_disconnected_graph() {
        let text = "nodes 4\nnode 0 0 0\nnode 1 1 0\nnode 2 5 5\nnode 3 6 5\nedges 2\nedge 0 1\nedge 2 3\n";
        assert_eq!(PatrolGraph::parse(text), Err(GraphError::Disconnected(2)));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = "# header comment\nnodes 2\nnode 0 0 0\nnode 1 x 0\n";
        match PatrolGraph::parse(text) {
            Err(GraphError::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("bad x"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn canonical_text_round_trips() {
        let g = PatrolGraph::parse(TRIANGLE).unwrap();
        let text = g.to_text();
        assert_eq!(PatrolGraph::parse(&text).unwrap().to_text(), text);
    }

    #[test]
    fn euclidean_examples() {
        let o = Position::new(0.0, 0.0);
        assert_eq!(euclidean_distance(o, Position::new(3.0, 4.0)), 5.0);
        assert_eq!(euclidean_distance(Position::new(1.0, 1.0), Position::new(1.0, 1.0)), 0.0);
        assert_eq!(euclidean_distance(o, Position::new(1.0, 1.0)), 2f64.sqrt());
    }

    #[test]
    fn path_graph_view() {
        let v = BidirectedView::from_undirected(3, &[(0, 1), (1, 2)]);
        assert_eq!(v.degrees(), vec![1, 2, 1]);
        assert_eq!(v.max_degree(), 2);
        assert_eq!(v.directed_edge_count(), 4);
    }

    #[test]
    fn neighbor_indices_are_per_endpoint() {
        // v0 adjacent to v1, v2, v3; v3 also adjacent to v4 (lower index than v0? no, higher).
        // With ascending ids v3 is neighbor 2 of v0 while v0 is neighbor 0 of v3.
        let v = BidirectedView::from_undirected(5, &[(0, 1), (0, 2), (0, 3), (3, 4), (2, 3)]);
        assert_eq!(v.neighbor_index(0, 3), Some(2));
        assert_eq!(v.neighbor_index(3, 0), Some(0));
        assert_eq!(v.neighbor_index(3, 2), Some(1));
        let triangle = BidirectedView::from_undirected(3, &[(0, 1), (1, 2), (0, 2)]);
        for node in 0..3 {
            assert_eq!(triangle.degree(node), 2);
        }
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let cfg = GeneratorConfig::new(10, 3);
        let a = random_geometric(&cfg).unwrap();
        let b = random_geometric(&cfg).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.node_count(), 10);
        assert_eq!(PatrolGraph::parse(&a.to_text()).unwrap(), a);
    }
}
