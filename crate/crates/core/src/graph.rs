//! Synthetic power-grid topologies and balanced power injections.
//!
//! Topologies come from the spatial random-growth model: nodes live in the
//! unit square and each growth step either splits an existing line or
//! attaches a new node to its nearest neighbour, optionally adding redundant
//! lines chosen by the tradeoff `f(i, j) = (d_G(i, j) + 1)^r / d_E(i, j)`.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid growth parameters: {0}")]
    InvalidParams(String),
    #[error("balanced power needs an even node count, got {0}")]
    OddNodeCount(usize),
    #[error("malformed graph: {0}")]
    Parse(String),
    #[error("graph is not connected")]
    Disconnected,
    #[error("power injections sum to {0}, expected 0")]
    UnbalancedPower(i64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of the random-growth model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrowthParams {
    pub n0: usize,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub target_n: usize,
}

impl Default for GrowthParams {
    fn default() -> Self {
        Self {
            n0: 1,
            p: 1.0 / 5.0,
            q: 3.0 / 10.0,
            r: 1.0 / 3.0,
            s: 1.0 / 10.0,
            target_n: 20,
        }
    }
}

impl GrowthParams {
    pub fn with_nodes(target_n: usize) -> Self {
        Self {
            target_n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(unit(self.p) && unit(self.q) && unit(self.s)) {
            return Err(GraphError::InvalidParams(
                "p, q and s must lie in [0, 1]".into(),
            ));
        }
        if self.p + self.q > 1.0 {
            return Err(GraphError::InvalidParams("p + q must not exceed 1".into()));
        }
        if !self.r.is_finite() {
            return Err(GraphError::InvalidParams("r must be finite".into()));
        }
        if self.n0 < 1 {
            return Err(GraphError::InvalidParams("n0 must be at least 1".into()));
        }
        if self.target_n < self.n0 {
            return Err(GraphError::InvalidParams("target_n must be >= n0".into()));
        }
        if !self.target_n.is_multiple_of(2) {
            return Err(GraphError::InvalidParams(format!(
                "target_n must be even, got {}",
                self.target_n
            )));
        }
        Ok(())
    }
}

/// A topology before power injections are assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub positions: Vec<[f64; 2]>,
    pub seed: u64,
}

/// Undirected network with per-node injected power `P_i ∈ {+1, -1}`.
///
/// Edges are stored once, smaller id first, in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    #[serde(default)]
    pub id: u64,
    pub num_nodes: usize,
    #[serde(default)]
    pub seed: u64,
    pub power: Vec<i8>,
    pub edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 2]>>,
}

impl Graph {
    /// Builds a graph from raw parts, normalizing edge orientation and order
    /// and checking every invariant.
    pub fn new(
        id: u64,
        num_nodes: usize,
        seed: u64,
        power: Vec<i8>,
        edges: Vec<(usize, usize)>,
        positions: Option<Vec<[f64; 2]>>,
    ) -> Result<Self, GraphError> {
        let mut graph = Self {
            id,
            num_nodes,
            seed,
            power,
            edges,
            positions,
        };
        graph.normalize_edges();
        graph.validate()?;
        Ok(graph)
    }

    fn normalize_edges(&mut self) {
        for e in &mut self.edges {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        self.edges.sort_unstable();
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.num_nodes == 0 {
            return Err(GraphError::Parse("graph has no nodes".into()));
        }
        if self.power.len() != self.num_nodes {
            return Err(GraphError::Parse(format!(
                "power has {} entries for {} nodes",
                self.power.len(),
                self.num_nodes
            )));
        }
        if let Some(&bad) = self.power.iter().find(|&&p| p != 1 && p != -1) {
            return Err(GraphError::Parse(format!("power entry {bad} is not +1 or -1")));
        }
        if let Some(pos) = &self.positions {
            if pos.len() != self.num_nodes {
                return Err(GraphError::Parse("positions length mismatch".into()));
            }
        }
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            if a >= self.num_nodes || b >= self.num_nodes {
                return Err(GraphError::Parse(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(GraphError::Parse(format!("self-loop at node {a}")));
            }
            if a > b {
                return Err(GraphError::Parse(format!("edge ({a}, {b}) not normalized")));
            }
            if k > 0 && self.edges[k - 1] == (a, b) {
                return Err(GraphError::Parse(format!("duplicate edge ({a}, {b})")));
            }
        }
        if !is_connected(self.num_nodes, &self.edges) {
            return Err(GraphError::Disconnected);
        }
        let sum: i64 = self.power.iter().map(|&p| p as i64).sum();
        if sum != 0 {
            return Err(GraphError::UnbalancedPower(sum));
        }
        Ok(())
    }

    pub fn power_f64(&self) -> Vec<f64> {
        self.power.iter().map(|&p| p as f64).collect()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        adjacency(self.num_nodes, &self.edges)
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency().iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn relabeled(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.num_nodes);
        let mut power = vec![0; self.num_nodes];
        for (v, &p) in self.power.iter().enumerate() {
            power[perm[v]] = p;
        }
        let positions = self.positions.as_ref().map(|pos| {
            let mut out = vec![[0.0; 2]; self.num_nodes];
            for (v, &xy) in pos.iter().enumerate() {
                out[perm[v]] = xy;
            }
            out
        });
        let mut g = Graph {
            id: self.id,
            num_nodes: self.num_nodes,
            seed: self.seed,
            power,
            edges: self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
            positions,
        };
        g.normalize_edges();
        g
    }
}

pub(crate) fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

pub fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    if n == 0 {
        return false;
    }
    let adj = adjacency(n, edges);
    hop_distances(&adj, 0).iter().all(|d| d.is_some())
}

/// Breadth-first hop distances from `src`.
fn hop_distances(adj: &[Vec<usize>], src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(v) = queue.pop_front() {
        let d = dist[v].unwrap();
        for &w in &adj[v] {
            if dist[w].is_none() {
                dist[w] = Some(d + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

struct Growth {
    params: GrowthParams,
    rng: ChaCha8Rng,
    positions: Vec<[f64; 2]>,
    adj: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
}

impl Growth {
    fn random_position(&mut self) -> [f64; 2] {
        [self.rng.random::<f64>(), self.rng.random::<f64>()]
    }

    fn add_node(&mut self, pos: [f64; 2]) -> usize {
        self.positions.push(pos);
        self.adj.push(Vec::new());
        self.positions.len() - 1
    }

    fn add_edge(&mut self, a: usize, b: usize) {
        debug_assert!(a != b && !self.adj[a].contains(&b));
        self.adj[a].push(b);
        self.adj[b].push(a);
        self.edges.push((a, b));
    }

    fn remove_adjacency(&mut self, a: usize, b: usize) {
        self.adj[a].retain(|&x| x != b);
        self.adj[b].retain(|&x| x != a);
    }

    fn nearest(&self, i: usize) -> Option<usize> {
        let pi = self.positions[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, &pj) in self.positions.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = euclid(pi, pj);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        best.map(|(j, _)| j)
    }

    /// Non-neighbour `j` maximizing the redundancy/cost tradeoff, smallest id on ties.
    fn best_redundant_partner(&self, i: usize) -> Option<usize> {
        let hops = hop_distances(&self.adj, i);
        let pi = self.positions[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, &pj) in self.positions.iter().enumerate() {
            if j == i || self.adj[i].contains(&j) {
                continue;
            }
            // Unreachable only during MST initialization, where it cannot happen.
            let Some(dg) = hops[j] else { continue };
            let f = ((dg + 1) as f64).powf(self.params.r) / euclid(pi, pj);
            if best.is_none_or(|(_, bf)| f > bf) {
                best = Some((j, f));
            }
        }
        best.map(|(j, _)| j)
    }

    fn add_redundant_edge_from(&mut self, i: usize) {
        if let Some(j) = self.best_redundant_partner(i) {
            self.add_edge(i, j);
        }
    }

    /// Euclidean minimum spanning tree over the initial nodes (Prim).
    fn initial_tree(&mut self) {
        let n = self.positions.len();
        let mut in_tree = vec![false; n];
        let mut best = vec![(f64::INFINITY, usize::MAX); n];
        in_tree[0] = true;
        for (j, b) in best.iter_mut().enumerate().skip(1) {
            *b = (euclid(self.positions[0], self.positions[j]), 0);
        }
        for _ in 1..n {
            let (next, &(_, parent)) = best
                .iter()
                .enumerate()
                .filter(|(j, _)| !in_tree[*j])
                .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
                .unwrap();
            in_tree[next] = true;
            self.add_edge(parent, next);
            for (j, b) in best.iter_mut().enumerate() {
                if !in_tree[j] {
                    let d = euclid(self.positions[next], self.positions[j]);
                    if d < b.0 {
                        *b = (d, next);
                    }
                }
            }
        }
    }

    fn split_random_edge(&mut self) {
        let k = self.rng.random_range(0..self.edges.len());
        let (a, b) = self.edges[k];
        let pa = self.positions[a];
        let pb = self.positions[b];
        let mid = self.add_node([(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0]);
        self.remove_adjacency(a, b);
        self.adj[a].push(mid);
        self.adj[mid].push(a);
        self.edges[k] = (a, mid);
        self.add_edge(mid, b);
    }

    fn attach_new_node(&mut self) {
        let pos = self.random_position();
        let i = self.add_node(pos);
        let j = self.nearest(i).expect("at least one existing node");
        self.add_edge(i, j);
        if self.rng.random::<f64>() < self.params.p {
            self.add_redundant_edge_from(i);
        }
        if self.rng.random::<f64>() < self.params.q {
            let other = self.rng.random_range(0..self.positions.len());
            self.add_redundant_edge_from(other);
        }
    }
}

/// Grows a connected spatial topology with `params.target_n` nodes.
pub fn generate_topology(params: &GrowthParams, seed: u64) -> Result<Topology, GraphError> {
    params.validate()?;
    let mut g = Growth {
        params: *params,
        rng: ChaCha8Rng::seed_from_u64(seed),
        positions: Vec::with_capacity(params.target_n),
        adj: Vec::with_capacity(params.target_n),
        edges: Vec::new(),
    };
    for _ in 0..params.n0 {
        let pos = g.random_position();
        g.add_node(pos);
    }
    if params.n0 > 1 {
        g.initial_tree();
        let extra = (params.n0 as f64 * (1.0 - params.s) * (params.p + params.q)).floor() as usize;
        for _ in 0..extra {
            let i = g.rng.random_range(0..params.n0);
            g.add_redundant_edge_from(i);
        }
    }
    while g.positions.len() < params.target_n {
        if !g.edges.is_empty() && g.rng.random::<f64>() < params.s {
            g.split_random_edge();
        } else {
            g.attach_new_node();
        }
    }
    let mut edges: Vec<_> = g
        .edges
        .into_iter()
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    Ok(Topology {
        num_nodes: params.target_n,
        edges,
        positions: g.positions,
        seed,
    })
}

/// Assigns `+1` to a seeded uniformly random half of the nodes and `-1` to the rest.
pub fn assign_power(topology: Topology, id: u64, seed: u64) -> Result<Graph, GraphError> {
    let n = topology.num_nodes;
    if !n.is_multiple_of(2) {
        return Err(GraphError::OddNodeCount(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut power = vec![-1i8; n];
    for &v in &order[..n / 2] {
        power[v] = 1;
    }
    Graph::new(
        id,
        n,
        topology.seed,
        power,
        topology.edges,
        Some(topology.positions),
    )
}

/// Reads a graph file in the JSON interchange format and checks every invariant.
pub fn import_topology(path: impl AsRef<Path>) -> Result<Graph, GraphError> {
    let text = fs::read_to_string(path)?;
    parse_graph_json(&text)
}

pub fn parse_graph_json(text: &str) -> Result<Graph, GraphError> {
    let raw: Graph = serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
    Graph::new(
        raw.id,
        raw.num_nodes,
        raw.seed,
        raw.power,
        raw.edges,
        raw.positions,
    )
}
