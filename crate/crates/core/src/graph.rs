//! Graph containers, disjoint-union batching and train/val/test splits.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::{SparseAdj, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NodeTask,
    GraphTask,
    EdgeTask,
    PointcloudTask,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::NodeTask => "node_task",
            TaskKind::GraphTask => "graph_task",
            TaskKind::EdgeTask => "edge_task",
            TaskKind::PointcloudTask => "pointcloud_task",
        }
    }

    /// Whether splits index nodes of a single graph (rather than whole graphs).
    pub fn splits_nodes(self) -> bool {
        matches!(self, TaskKind::NodeTask | TaskKind::EdgeTask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub features: Tensor,
    pub adj: Arc<SparseAdj>,
    pub node_labels: Option<Vec<usize>>,
    pub graph_label: Option<usize>,
}

impl Graph {
    pub fn new(features: Tensor, adj: SparseAdj) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != adj.num_nodes() {
            return Err(Error::Shape(format!(
                "features {:?} for {} nodes",
                features.shape(),
                adj.num_nodes()
            )));
        }
        Ok(Self {
            features,
            adj: Arc::new(adj),
            node_labels: None,
            graph_label: None,
        })
    }

    /// Undirected graph from unordered pairs; both directions are stored.
    pub fn undirected(features: Tensor, pairs: &[(usize, usize)]) -> Result<Self> {
        let n = features.rows();
        let adj = SparseAdj::unweighted(n, symmetrize(pairs), true)?;
        Self::new(features, adj)
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Unordered `(lo, hi)` pairs of an undirected graph, sorted, self-loops excluded.
    pub fn undirected_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .adj
            .edges()
            .iter()
            .filter(|(s, d)| s < d)
            .copied()
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    /// Degree per node (incoming edge count).
    pub fn degrees(&self) -> Vec<usize> {
        self.adj.in_degrees()
    }

    /// Relabels nodes: new node `perm[i]` is old node `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(Error::Shape("permutation length".into()));
        }
        let d = self.feature_dim();
        let mut feats = vec![0.0; n * d];
        for (old, &new) in perm.iter().enumerate() {
            feats[new * d..(new + 1) * d].copy_from_slice(self.features.row(old));
        }
        let edges = self
            .adj
            .edges()
            .iter()
            .map(|&(s, t)| (perm[s], perm[t]))
            .collect();
        let adj = SparseAdj::new(
            n,
            edges,
            self.adj.weights().to_vec(),
            self.adj.is_undirected(),
        )?;
        let mut g = Graph::new(Tensor::new(vec![n, d], feats)?, adj)?;
        g.graph_label = self.graph_label;
        g.node_labels = self.node_labels.as_ref().map(|l| {
            let mut out = vec![0; n];
            for (old, &new) in perm.iter().enumerate() {
                out[new] = l[old];
            }
            out
        });
        Ok(g)
    }
}

/// Both directions of every unordered pair, deduplicated, self-loops dropped, sorted.
pub fn symmetrize(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = pairs
        .iter()
        .filter(|(a, b)| a != b)
        .flat_map(|&(a, b)| [(a, b), (b, a)])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSet {
    pub kind: TaskKind,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub splits: Option<Splits>,
}

impl GraphSet {
    /// Number of splittable items (nodes for node/edge tasks, graphs otherwise).
    pub fn num_items(&self) -> usize {
        if self.kind.splits_nodes() {
            self.graphs.first().map_or(0, Graph::num_nodes)
        } else {
            self.graphs.len()
        }
    }

    /// Checks every structural invariant; errors carry the offending field path.
    pub fn validate(&self) -> Result<()> {
        if self.graphs.is_empty() {
            return Err(Error::schema("graphs", "at least one graph required"));
        }
        if self.kind.splits_nodes() && self.graphs.len() != 1 {
            return Err(Error::schema(
                "graphs",
                format!("{} expects exactly one graph", self.kind.as_str()),
            ));
        }
        for (gi, g) in self.graphs.iter().enumerate() {
            let path = format!("graphs[{gi}]");
            if g.feature_dim() != self.feature_dim {
                return Err(Error::schema(
                    format!("{path}.features"),
                    format!(
                        "width {} != feature_dim {}",
                        g.feature_dim(),
                        self.feature_dim
                    ),
                ));
            }
            if let Some(labels) = &g.node_labels {
                if labels.len() != g.num_nodes() {
                    return Err(Error::schema(
                        format!("{path}.node_labels"),
                        format!("{} labels for {} nodes", labels.len(), g.num_nodes()),
                    ));
                }
                if let Some(i) = labels.iter().position(|&l| l >= self.num_classes) {
                    return Err(Error::schema(
                        format!("{path}.node_labels[{i}]"),
                        format!("label {} outside [0, {})", labels[i], self.num_classes),
                    ));
                }
            }
            if let Some(l) = g.graph_label {
                if l >= self.num_classes {
                    return Err(Error::schema(
                        format!("{path}.graph_label"),
                        format!("label {l} outside [0, {})", self.num_classes),
                    ));
                }
            }
            match self.kind {
                TaskKind::NodeTask if g.node_labels.is_none() => {
                    return Err(Error::schema(
                        format!("{path}.node_labels"),
                        "required for node_task",
                    ));
                }
                TaskKind::GraphTask | TaskKind::PointcloudTask if g.graph_label.is_none() => {
                    return Err(Error::schema(
                        format!("{path}.graph_label"),
                        "required for graph tasks",
                    ));
                }
                _ => {}
            }
        }
        if let Some(s) = &self.splits {
            let n = self.num_items();
            let mut seen = vec![false; n];
            for (name, idx) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
                for (k, &i) in idx.iter().enumerate() {
                    if i >= n {
                        return Err(Error::schema(
                            format!("splits.{name}[{k}]"),
                            format!("index {i} outside [0, {n})"),
                        ));
                    }
                    if seen[i] {
                        return Err(Error::schema(
                            format!("splits.{name}[{k}]"),
                            format!("index {i} appears in more than one split"),
                        ));
                    }
                    seen[i] = true;
                }
            }
        }
        Ok(())
    }

    /// Label of a splittable item.
    pub fn item_label(&self, i: usize) -> Option<usize> {
        if self.kind.splits_nodes() {
            self.graphs[0].node_labels.as_ref().map(|l| l[i])
        } else {
            self.graphs[i].graph_label
        }
    }
}

/// Seeded shuffle split; pre-existing splits are returned untouched.
pub fn make_splits(set: &GraphSet, fractions: [f64; 3], seed: u64) -> Result<GraphSet> {
    if set.splits.is_some() {
        return Ok(set.clone());
    }
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let n = set.num_items();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "split {fractions:?} of {n} items leaves an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let mut out = set.clone();
    out.splits = Some(Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    });
    Ok(out)
}

/// Disjoint union of several graphs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub adj: Arc<SparseAdj>,
    /// Owner graph of each node; non-decreasing.
    pub graph_id: Arc<Vec<usize>>,
    /// Start offset of each graph, plus the total node count at the end.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    /// A single graph as a one-element batch.
    pub fn single(g: &Graph) -> Batch {
        Batch {
            features: g.features.clone(),
            adj: g.adj.clone(),
            graph_id: Arc::new(vec![0; g.num_nodes()]),
            offsets: vec![0, g.num_nodes()],
        }
    }
}

pub fn batch_graphs(graphs: &[&Graph]) -> Result<Batch> {
    let Some(first) = graphs.first() else {
        return Err(Error::Data("cannot batch zero graphs".into()));
    };
    if graphs.len() == 1 {
        return Ok(Batch::single(first));
    }
    let d = first.feature_dim();
    let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
    let mut feats = Vec::with_capacity(total * d);
    let mut edges = Vec::new();
    let mut weights = Vec::new();
    let mut graph_id = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(graphs.len() + 1);
    let mut undirected = true;
    let mut off = 0;
    for (gi, g) in graphs.iter().enumerate() {
        if g.feature_dim() != d {
            return Err(Error::dim(
                "batch_graphs",
                format!(
                    "graph {gi} has feature dim {} (expected {d})",
                    g.feature_dim()
                ),
            ));
        }
        offsets.push(off);
        feats.extend_from_slice(g.features.data());
        edges.extend(g.adj.edges().iter().map(|&(s, t)| (s + off, t + off)));
        weights.extend_from_slice(g.adj.weights());
        graph_id.extend(std::iter::repeat_n(gi, g.num_nodes()));
        undirected &= g.adj.is_undirected();
        off += g.num_nodes();
    }
    offsets.push(off);
    Ok(Batch {
        features: Tensor::new(vec![total, d], feats)?,
        adj: Arc::new(SparseAdj::new(total, edges, weights, undirected)?),
        graph_id: Arc::new(graph_id),
        offsets,
    })
}
