//! Communication graphs the learner trains over.
//!
//! Node ids are 0-based and contiguous. The fixed networks `NetA`..`NetD`
//! number their nodes from 0.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("infeasible topology: {0}")]
    InfeasibleTopology(String),
    #[error("unknown node {node} (graph has {node_count} nodes)")]
    UnknownNode { node: NodeId, node_count: usize },
}

/// Generator description for a [`Topology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TopologyKind {
    Complete { nodes: usize },
    Ring { nodes: usize },
    RandomRegular { nodes: usize, degree: usize },
    Star { nodes: usize },
    Custom { nodes: usize, edges: Vec<(NodeId, NodeId)> },
    /// Balanced, 3 nodes, degree 1.
    NetA,
    /// Balanced, 6 nodes, degree 1.
    NetB,
    /// Balanced, 6 nodes, degree 0.4 (a 6-ring).
    NetC,
    /// Unbalanced, 6 nodes, degree 0.4. Only the shape is given, so this
    /// is an approximation: a triangle `0-1-2` with a tail `0-3-4-5`, giving
    /// neighbor counts `(3, 2, 2, 2, 2, 1)`.
    NetD,
}

/// Edge list of the [`TopologyKind::NetD`] approximation.
pub const NET_D_EDGES: [(NodeId, NodeId); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (3, 4), (4, 5)];

/// Exact node/network degree as a fraction.
#[derive(Debug, Clone, Copy)]
pub struct Degree {
    pub num: u64,
    pub den: u64,
}

impl Degree {
    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialEq for Degree {
    fn eq(&self, other: &Self) -> bool {
        u128::from(self.num) * u128::from(other.den) == u128::from(other.num) * u128::from(self.den)
    }
}

impl fmt::Display for Degree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Undirected, connected, loop-free graph. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    node_count: usize,
    edges: BTreeSet<(NodeId, NodeId)>,
    neighbors: Vec<Vec<NodeId>>,
}

impl Topology {
    /// Builds a topology from an explicit edge list.
    ///
    /// Invalid input is rejected, never repaired: self-loops, out-of-range
    /// ids, duplicate edges, isolated nodes and disconnected graphs all
    /// produce [`TopologyError::InfeasibleTopology`].
    pub fn from_edges(node_count: usize, edges: &[(NodeId, NodeId)]) -> Result<Self, TopologyError> {
        let topo = Self::build_unchecked(node_count, edges)?;
        topo.validate()?;
        Ok(topo)
    }

    fn build_unchecked(node_count: usize, edges: &[(NodeId, NodeId)]) -> Result<Self, TopologyError> {
        if node_count == 0 {
            return Err(TopologyError::InfeasibleTopology("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(TopologyError::InfeasibleTopology(format!(
                    "edge ({a}, {b}) references a node outside 0..{node_count}"
                )));
            }
            if a == b {
                return Err(TopologyError::InfeasibleTopology(format!("self-loop at node {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(TopologyError::InfeasibleTopology(format!("duplicate edge ({a}, {b})")));
            }
        }
        let mut neighbors = vec![Vec::new(); node_count];
        for &(a, b) in &set {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self { node_count, edges: set, neighbors })
    }

    fn validate(&self) -> Result<(), TopologyError> {
        if self.node_count < 2 {
            return Err(TopologyError::InfeasibleTopology(
                "every node needs at least one neighbor, so at least 2 nodes are required".into(),
            ));
        }
        if let Some(v) = self.neighbors.iter().position(Vec::is_empty) {
            return Err(TopologyError::InfeasibleTopology(format!("node {v} has no neighbors")));
        }
        if !is_connected(self) {
            return Err(TopologyError::InfeasibleTopology("graph is not connected".into()));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Sorted neighbor ids of `v`. Panics on an out-of-range id.
    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.neighbors[v]
    }

    pub fn contains_node(&self, v: NodeId) -> bool {
        v < self.node_count
    }

    /// `|B_v| / (|V| - 1)`.
    pub fn node_degree(&self, v: NodeId) -> Result<Degree, TopologyError> {
        if !self.contains_node(v) {
            return Err(TopologyError::UnknownNode { node: v, node_count: self.node_count });
        }
        Ok(Degree { num: self.neighbors[v].len() as u64, den: (self.node_count - 1) as u64 })
    }

    /// Average of the node degrees: `2|E| / (|V| (|V| - 1))`.
    pub fn network_degree(&self) -> Degree {
        let n = self.node_count as u64;
        Degree { num: 2 * self.edges.len() as u64, den: n * (n - 1) }
    }

    /// True when every node has the same neighbor count.
    pub fn is_balanced(&self) -> bool {
        self.neighbors.windows(2).all(|w| w[0].len() == w[1].len())
    }

    /// Node ids ordered by decreasing neighbor count, ties by lowest id.
    pub fn nodes_by_degree(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = (0..self.node_count).collect();
        ids.sort_by(|&a, &b| self.neighbors[b].len().cmp(&self.neighbors[a].len()).then(a.cmp(&b)));
        ids
    }
}

/// True iff the graph forms a single connected component.
pub fn is_connected(t: &Topology) -> bool {
    if t.node_count == 0 {
        return false;
    }
    let mut seen = vec![false; t.node_count];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut reached = 1;
    while let Some(v) = queue.pop_front() {
        for &u in &t.neighbors[v] {
            if !seen[u] {
                seen[u] = true;
                reached += 1;
                queue.push_back(u);
            }
        }
    }
    reached == t.node_count
}

fn complete_edges(n: usize) -> Vec<(NodeId, NodeId)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

fn ring_edges(n: usize) -> Vec<(NodeId, NodeId)> {
    match n {
        2 => vec![(0, 1)],
        _ => (0..n).map(|a| (a, (a + 1) % n)).collect(),
    }
}

const REGULAR_ATTEMPTS: usize = 2000;

fn random_regular(nodes: usize, degree: usize, seed: u64) -> Result<Topology, TopologyError> {
    let infeasible = |why: &str| {
        Err(TopologyError::InfeasibleTopology(format!("random-regular(n={nodes}, d={degree}): {why}")))
    };
    if degree == 0 || degree >= nodes {
        return infeasible("degree must lie in 1..n");
    }
    if nodes * degree % 2 == 1 {
        return infeasible("n*d must be even");
    }
    if degree == 1 && nodes > 2 {
        return infeasible("a perfect matching on more than 2 nodes is never connected");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stubs: Vec<NodeId> = (0..nodes).flat_map(|v| std::iter::repeat_n(v, degree)).collect();
    'attempt: for _ in 0..REGULAR_ATTEMPTS {
        stubs.shuffle(&mut rng);
        let mut edges = BTreeSet::new();
        for pair in stubs.chunks_exact(2) {
            let (a, b) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if a == b || !edges.insert((a, b)) {
                continue 'attempt;
            }
        }
        let list: Vec<_> = edges.into_iter().collect();
        let topo = Topology::build_unchecked(nodes, &list)?;
        if is_connected(&topo) {
            return Ok(topo);
        }
    }
    infeasible("no simple connected pairing found")
}

/// Builds the topology described by `kind`. Deterministic in `(kind, seed)`;
/// only [`TopologyKind::RandomRegular`] consumes the seed.
pub fn make_topology(kind: &TopologyKind, seed: u64) -> Result<Topology, TopologyError> {
    match kind {
        TopologyKind::Complete { nodes } => Topology::from_edges(*nodes, &complete_edges(*nodes)),
        TopologyKind::Ring { nodes } => {
            if *nodes < 2 {
                return Err(TopologyError::InfeasibleTopology("ring needs at least 2 nodes".into()));
            }
            Topology::from_edges(*nodes, &ring_edges(*nodes))
        }
        TopologyKind::RandomRegular { nodes, degree } => random_regular(*nodes, *degree, seed),
        TopologyKind::Star { nodes } => {
            let edges: Vec<_> = (1..*nodes).map(|leaf| (0, leaf)).collect();
            Topology::from_edges(*nodes, &edges)
        }
        TopologyKind::Custom { nodes, edges } => Topology::from_edges(*nodes, edges),
        TopologyKind::NetA => Topology::from_edges(3, &complete_edges(3)),
        TopologyKind::NetB => Topology::from_edges(6, &complete_edges(6)),
        TopologyKind::NetC => Topology::from_edges(6, &ring_edges(6)),
        TopologyKind::NetD => Topology::from_edges(6, &NET_D_EDGES),
    }
}
