//! Attributed graphs and the algorithms the rest of the pipeline consumes:
//! k-core decomposition, BFS shortest paths, ego subgraphs, file loaders.
//!
//! Graphs are simple and undirected, with dense node ids `0..n`. They are
//! immutable after construction; the core-number cache is compute-once and
//! safe under concurrent readers.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

use crate::linalg::Mat;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("edge ({u}, {v}) references a node outside 0..{n}")]
    EdgeOutOfRange { u: NodeId, v: NodeId, n: usize },
    #[error("self-loop at node {0}")]
    SelfLoop(NodeId),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(NodeId, NodeId),
    #[error("feature matrix has {rows} rows but the graph has {n} nodes")]
    FeatureRowCount { rows: usize, n: usize },
    #[error("label file has {rows} labels but the graph has {n} nodes")]
    LabelRowCount { rows: usize, n: usize },
    #[error("graph must have at least one node")]
    Empty,
    #[error("node {0} out of range")]
    NodeOutOfRange(NodeId),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Undirected attributed graph with per-node features and class labels.
#[derive(Debug, Clone)]
pub struct AttributedGraph {
    adj: Vec<Vec<NodeId>>,
    features: Mat,
    labels: Vec<usize>,
    class_count: usize,
    cores: OnceLock<Vec<usize>>,
}

/// Closed one-hop neighborhood of a center node with its induced edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoSubgraph {
    pub center: NodeId,
    /// Sorted; always contains the center.
    pub members: Vec<NodeId>,
    /// Induced edges as (u, v) with u < v, in global ids, lexicographic.
    pub edges: Vec<(NodeId, NodeId)>,
}

impl AttributedGraph {
    /// Build and validate a graph. Edges may come in either orientation but
    /// each unordered pair must appear exactly once.
    pub fn new(
        n: usize,
        edges: &[(NodeId, NodeId)],
        features: Mat,
        labels: Vec<usize>,
    ) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        if features.rows() != n {
            return Err(GraphError::FeatureRowCount { rows: features.rows(), n });
        }
        if labels.len() != n {
            return Err(GraphError::LabelRowCount { rows: labels.len(), n });
        }
        let mut adj: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::EdgeOutOfRange { u, v, n });
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        for (u, nbrs) in adj.iter_mut().enumerate() {
            nbrs.sort_unstable();
            if let Some(w) = nbrs.windows(2).find(|w| w[0] == w[1]) {
                return Err(GraphError::DuplicateEdge(u.min(w[0]), u.max(w[0])));
            }
        }
        let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
        Ok(AttributedGraph { adj, features, labels, class_count, cores: OnceLock::new() })
    }

    /// Topology-only graph (unit feature column, all labels 0) for callers
    /// that never touch attributes.
    pub fn unlabeled(n: usize, edges: &[(NodeId, NodeId)]) -> Result<Self, GraphError> {
        AttributedGraph::new(n, edges, Mat::zeros(n, 1), vec![0; n])
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.adj[v]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adj[v].len()
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.adj[u].binary_search(&v).is_ok()
    }

    /// Edges as (u, v) with u < v, lexicographic.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for (u, nbrs) in self.adj.iter().enumerate() {
            for &v in nbrs {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Sorted closed neighborhood {v} ∪ N(v).
    pub fn closed_neighborhood(&self, v: NodeId) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.adj[v].len() + 1);
        out.extend_from_slice(&self.adj[v]);
        out.push(v);
        out.sort_unstable();
        out
    }

    /// Per-node core numbers, computed once and cached. A node's core number
    /// is the largest k such that it survives in the k-core; isolated nodes
    /// get 0.
    pub fn core_numbers(&self) -> &[usize] {
        self.cores.get_or_init(|| bucket_peel_cores(&self.adj))
    }

    /// BFS hop distances from `src`; `None` marks unreachable nodes.
    pub fn bfs_distances(&self, src: NodeId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.adj.len()];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &w in &self.adj[u] {
                if dist[w].is_none() {
                    dist[w] = Some(du + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Unweighted shortest-path length in hops, or `None` if unreachable.
    pub fn shortest_path_len(&self, u: NodeId, v: NodeId) -> Result<Option<usize>, GraphError> {
        let n = self.adj.len();
        if u >= n {
            return Err(GraphError::NodeOutOfRange(u));
        }
        if v >= n {
            return Err(GraphError::NodeOutOfRange(v));
        }
        Ok(self.bfs_distances(u)[v])
    }

    pub fn ego_subgraph(&self, v: NodeId) -> Result<EgoSubgraph, GraphError> {
        if v >= self.adj.len() {
            return Err(GraphError::NodeOutOfRange(v));
        }
        let members = self.closed_neighborhood(v);
        let mut edges = Vec::new();
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                if self.has_edge(a, b) {
                    edges.push((a, b));
                }
            }
        }
        Ok(EgoSubgraph { center: v, members, edges })
    }

    pub fn is_connected(&self) -> bool {
        let reached = self.bfs_distances(0).iter().filter(|d| d.is_some()).count();
        reached == self.adj.len()
    }
}

/// Classic bucket-queue peeling: process nodes in nondecreasing degree order,
/// demoting each neighbor one bucket as its support drops.
fn bucket_peel_cores(adj: &[Vec<NodeId>]) -> Vec<usize> {
    let n = adj.len();
    let mut core: Vec<usize> = adj.iter().map(Vec::len).collect();
    let max_deg = core.iter().copied().max().unwrap_or(0);

    // bin[d] = start offset of degree-d nodes inside vert
    let mut bin = vec![0usize; max_deg + 1];
    for &d in &core {
        bin[d] += 1;
    }
    let mut start = 0;
    for b in bin.iter_mut() {
        let count = *b;
        *b = start;
        start += count;
    }
    let mut pos = vec![0usize; n];
    let mut vert = vec![0usize; n];
    for v in 0..n {
        pos[v] = bin[core[v]];
        vert[pos[v]] = v;
        bin[core[v]] += 1;
    }
    for d in (1..=max_deg).rev() {
        bin[d] = bin[d - 1];
    }
    if max_deg > 0 {
        bin[0] = 0;
    }

    for i in 0..n {
        let v = vert[i];
        for &u in &adj[v] {
            if core[u] > core[v] {
                let du = core[u];
                let pu = pos[u];
                let pw = bin[du];
                let w = vert[pw];
                if u != w {
                    vert[pu] = w;
                    pos[w] = pu;
                    vert[pw] = u;
                    pos[u] = pw;
                }
                bin[du] += 1;
                core[u] -= 1;
            }
        }
    }
    core
}

/// Parse an edge file: one edge per line, two base-10 ids separated by a
/// single tab; lines starting with '#' are comments.
pub fn parse_edge_list(text: &str, path: &str) -> Result<Vec<(NodeId, NodeId)>, GraphError> {
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split('\t');
        let parse = |tok: Option<&str>, what: &str| -> Result<NodeId, GraphError> {
            let tok = tok.ok_or_else(|| GraphError::Parse {
                path: path.to_string(),
                line,
                msg: format!("missing {what} node id"),
            })?;
            tok.trim().parse::<NodeId>().map_err(|_| GraphError::Parse {
                path: path.to_string(),
                line,
                msg: format!("invalid node id {tok:?}"),
            })
        };
        let u = parse(parts.next(), "source")?;
        let v = parse(parts.next(), "target")?;
        if parts.next().is_some() {
            return Err(GraphError::Parse {
                path: path.to_string(),
                line,
                msg: "expected exactly two tab-separated node ids".into(),
            });
        }
        edges.push((u, v));
    }
    Ok(edges)
}

/// Parse a feature file: one node per line, comma-separated decimal floats.
pub fn parse_features(text: &str, path: &str) -> Result<Mat, GraphError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in trimmed.split(',') {
            let v = tok.trim().parse::<f64>().map_err(|_| GraphError::Parse {
                path: path.to_string(),
                line,
                msg: format!("invalid float {tok:?}"),
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(GraphError::Parse {
                    path: path.to_string(),
                    line,
                    msg: format!("expected {} features, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    Ok(Mat::from_rows(rows))
}

/// Parse a label file: one integer class id per line.
pub fn parse_labels(text: &str, path: &str) -> Result<Vec<usize>, GraphError> {
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let v = trimmed.parse::<usize>().map_err(|_| GraphError::Parse {
            path: path.to_string(),
            line,
            msg: format!("invalid class id {trimmed:?}"),
        })?;
        labels.push(v);
    }
    Ok(labels)
}

fn read_file(path: &Path) -> Result<String, GraphError> {
    std::fs::read_to_string(path)
        .map_err(|source| GraphError::Io { path: path.display().to_string(), source })
}

/// Load a validated graph from edge/feature/label files. The node count is
/// taken from the feature file; the edge list is symmetrized.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
) -> Result<AttributedGraph, GraphError> {
    let features = parse_features(&read_file(feature_path)?, &feature_path.display().to_string())?;
    let labels = parse_labels(&read_file(label_path)?, &label_path.display().to_string())?;
    let edges = parse_edge_list(&read_file(edge_path)?, &edge_path.display().to_string())?;
    AttributedGraph::new(features.rows(), &edges, features, labels)
}
