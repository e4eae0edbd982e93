//! Undirected graphs, symmetric normalization and edge-drop perturbation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::CsrMatrix;

/// Simple undirected graph stored as CSR with both directions materialized.
///
/// Neighbour lists are sorted and never contain the node itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UndirectedGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl UndirectedGraph {
    pub fn empty(num_nodes: usize) -> Self {
        Self {
            offsets: vec![0; num_nodes + 1],
            neighbors: Vec::new(),
        }
    }

    /// Builds a graph from unordered pairs. Duplicates (in either orientation)
    /// collapse to one edge; self-loops are rejected.
    pub fn from_edges<I>(num_nodes: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut adjacency = vec![Vec::new(); num_nodes];
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::InvalidArgument(format!("self-loop on node {u}")));
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut list in adjacency {
            list.sort_unstable();
            list.dedup();
            neighbors.extend(list);
            offsets.push(neighbors.len());
        }
        Ok(Self { offsets, neighbors })
    }

    /// Adopts an existing CSR layout after checking it describes a simple
    /// undirected graph.
    pub fn from_csr(num_nodes: usize, offsets: Vec<usize>, neighbors: Vec<usize>) -> Result<Self> {
        if offsets.len() != num_nodes + 1
            || offsets[0] != 0
            || offsets[num_nodes] != neighbors.len()
        {
            return Err(Error::Malformed("adjacency offsets inconsistent".into()));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Malformed("adjacency offsets not monotone".into()));
        }
        let graph = Self { offsets, neighbors };
        for u in 0..num_nodes {
            let row = graph.neighbors(u);
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Malformed(format!(
                    "neighbours of node {u} not strictly sorted"
                )));
            }
            for &v in row {
                if v >= num_nodes {
                    return Err(Error::Malformed(format!(
                        "neighbour {v} of node {u} out of range"
                    )));
                }
                if v == u {
                    return Err(Error::Malformed(format!("self-loop on node {u}")));
                }
                if graph.neighbors(v).binary_search(&u).is_err() {
                    return Err(Error::Malformed(format!(
                        "edge ({u}, {v}) has no reverse entry"
                    )));
                }
            }
        }
        Ok(graph)
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of unordered pairs.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    #[inline]
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    #[inline]
    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Unordered pairs `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| v > u)
                .map(move |v| (u, v))
        })
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn neighbor_array(&self) -> &[usize] {
        &self.neighbors
    }

    pub fn min_degree(&self) -> usize {
        (0..self.num_nodes())
            .map(|u| self.degree(u))
            .min()
            .unwrap_or(0)
    }

    /// Relabels nodes: node `u` becomes `perm[u]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes() {
            return Err(Error::shape(
                "UndirectedGraph::permuted",
                self.num_nodes(),
                perm.len(),
            ));
        }
        Self::from_edges(
            self.num_nodes(),
            self.edges().map(|(u, v)| (perm[u], perm[v])),
        )
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` where `D` is the degree matrix of `A + I`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: CsrMatrix,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.rows()
    }
}

impl AsRef<CsrMatrix> for NormalizedAdjacency {
    fn as_ref(&self) -> &CsrMatrix {
        &self.matrix
    }
}

pub fn normalize_adjacency(graph: &UndirectedGraph) -> NormalizedAdjacency {
    let n = graph.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|u| 1.0 / ((graph.degree(u) + 1) as f64).sqrt())
        .collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(graph.neighbor_array().len() + n);
    let mut values = Vec::with_capacity(graph.neighbor_array().len() + n);
    offsets.push(0);
    for u in 0..n {
        let row = graph.neighbors(u);
        let split = row.partition_point(|&v| v < u);
        let ordered = row[..split]
            .iter()
            .chain(std::iter::once(&u))
            .chain(&row[split..]);
        for &v in ordered {
            indices.push(v);
            values.push(inv_sqrt[u] * inv_sqrt[v]);
        }
        offsets.push(indices.len());
    }
    let matrix = CsrMatrix::from_parts(n, n, offsets, indices, values)
        .expect("normalized adjacency built from a valid graph");
    NormalizedAdjacency { matrix }
}

/// Stochastic parameters of the edge-drop perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub edge_drop_prob: f64,
    pub resample_each_epoch: bool,
    /// Seed of the perturbation stream; `None` derives it from the run seed.
    pub seed: Option<u64>,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            edge_drop_prob: 0.3,
            resample_each_epoch: true,
            seed: None,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.edge_drop_prob) {
            return Err(Error::InvalidArgument(format!(
                "edge_drop_prob must lie in [0, 1], got {}",
                self.edge_drop_prob
            )));
        }
        Ok(())
    }
}

/// Drops each edge independently with probability `edge_drop_prob`, then walks
/// the nodes in ascending order and gives every node left without edges (but
/// which had some originally) one of its original edges back, chosen uniformly.
pub fn perturb_graph<R: Rng + ?Sized>(
    graph: &UndirectedGraph,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<UndirectedGraph> {
    cfg.validate()?;
    let n = graph.num_nodes();
    let p = cfg.edge_drop_prob;
    if p == 0.0 {
        return Ok(graph.clone());
    }

    let mut kept: Vec<(usize, usize)> = Vec::with_capacity(graph.num_edges());
    let mut degree = vec![0usize; n];
    for (u, v) in graph.edges() {
        if rng.random::<f64>() >= p {
            kept.push((u, v));
            degree[u] += 1;
            degree[v] += 1;
        }
    }

    for u in 0..n {
        if degree[u] == 0 && graph.degree(u) > 0 {
            let original = graph.neighbors(u);
            let v = original[rng.random_range(0..original.len())];
            kept.push((u, v));
            degree[u] += 1;
            degree[v] += 1;
        }
    }

    UndirectedGraph::from_edges(n, kept)
}
