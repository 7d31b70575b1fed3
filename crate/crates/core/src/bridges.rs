//! Input bridge (feature-width adapters), output bridge (task heads),
//! point-cloud kNN graphs and link-prediction pair sampling.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{apply_linear, init_linear, Bound, ParamSet};
use crate::rng::{seeded, Rng};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::{SparseAdj, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Identity,
    PadTruncate,
    RandProject,
    LinearTrainable,
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => AdapterKind::Identity,
            "pad_truncate" => AdapterKind::PadTruncate,
            "rand_project" => AdapterKind::RandProject,
            "linear_trainable" => AdapterKind::LinearTrainable,
            o => return Err(Error::Config(format!("unknown adapter {o:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub src_dim: usize,
    pub dst_dim: usize,
    pub seed: u64,
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind, src_dim: usize, dst_dim: usize, seed: u64) -> Result<Self> {
        if src_dim == 0 || dst_dim == 0 {
            return Err(Error::Config("adapter dims must be >= 1".into()));
        }
        if kind == AdapterKind::Identity && src_dim != dst_dim {
            return Err(Error::Config(format!(
                "identity adapter cannot map {src_dim} -> {dst_dim}; a bridge is required"
            )));
        }
        Ok(Self {
            kind,
            src_dim,
            dst_dim,
            seed,
        })
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == AdapterKind::LinearTrainable
    }

    /// Frozen `[src x dst]` Gaussian projection scaled by `1/sqrt(src)`.
    pub fn projection(&self) -> Tensor {
        let mut rng = seeded(self.seed);
        let scale = 1.0 / (self.src_dim as f64).sqrt();
        let data = (0..self.src_dim * self.dst_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect::<Vec<f64>>();
        Tensor::new(vec![self.src_dim, self.dst_dim], data).unwrap()
    }

    /// Trainable parameters (`adapter.weight`, `adapter.bias`) for the linear kind.
    pub fn init_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        if self.is_trainable() {
            init_linear(
                &mut ps,
                &mut seeded(self.seed),
                "adapter",
                self.src_dim,
                self.dst_dim,
            );
        }
        ps
    }

    pub fn param_count(&self) -> usize {
        if self.is_trainable() {
            self.src_dim * self.dst_dim + self.dst_dim
        } else {
            0
        }
    }
}

/// Applies a parameter-free adapter (`identity`, `pad_truncate`, `rand_project`).
pub fn input_adapt(x: &Tensor, spec: &AdapterSpec) -> Result<Tensor> {
    if x.cols() != spec.src_dim {
        return Err(Error::dim(
            "input_adapt",
            format!(
                "input width {} != adapter src_dim {}",
                x.cols(),
                spec.src_dim
            ),
        ));
    }
    match spec.kind {
        AdapterKind::Identity => {
            if spec.src_dim != spec.dst_dim {
                return Err(Error::Config(
                    "identity adapter with mismatched dims".into(),
                ));
            }
            Ok(x.clone())
        }
        AdapterKind::PadTruncate => {
            let (n, s, d) = (x.rows(), spec.src_dim, spec.dst_dim);
            let keep = s.min(d);
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                out[i * d..i * d + keep].copy_from_slice(&x.row(i)[..keep]);
            }
            Tensor::new(vec![n, d], out)
        }
        AdapterKind::RandProject => {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let p = tape.constant(spec.projection());
            let y = tape.matmul(xv, p)?;
            Ok(tape.value(y).clone())
        }
        AdapterKind::LinearTrainable => Err(Error::Config(
            "linear_trainable adapter needs parameters; use adapter_forward".into(),
        )),
    }
}

/// Adapter on the tape. Frozen kinds become constants; the linear kind reads `adapter.*` from `params`.
pub fn adapter_forward(
    tape: &mut Tape,
    spec: &AdapterSpec,
    x: &Tensor,
    params: &Bound,
) -> Result<Var> {
    match spec.kind {
        AdapterKind::LinearTrainable => {
            if x.cols() != spec.src_dim {
                return Err(Error::dim(
                    "input_adapt",
                    format!(
                        "input width {} != adapter src_dim {}",
                        x.cols(),
                        spec.src_dim
                    ),
                ));
            }
            let xv = tape.constant(x.clone());
            apply_linear(tape, params, "adapter", xv)
        }
        _ => {
            let y = input_adapt(x, spec)?;
            Ok(tape.constant(y))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    GraphCls,
    NodeCls,
    EdgePred,
    PtcldCls,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "graph_cls" => HeadKind::GraphCls,
            "node_cls" => HeadKind::NodeCls,
            "edge_pred" => HeadKind::EdgePred,
            "ptcld_cls" => HeadKind::PtcldCls,
            o => return Err(Error::Config(format!("unknown head {o:?}"))),
        })
    }
}

impl HeadKind {
    pub fn is_pooled(self) -> bool {
        matches!(self, HeadKind::GraphCls | HeadKind::PtcldCls)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub in_dim: usize,
    pub num_classes: usize,
}

impl HeadSpec {
    pub fn new(kind: HeadKind, in_dim: usize, num_classes: usize) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::Config("head in_dim must be >= 1".into()));
        }
        let num_classes = if kind == HeadKind::EdgePred {
            2
        } else {
            num_classes
        };
        if num_classes < 2 {
            return Err(Error::Config(
                "classification heads need >= 2 classes".into(),
            ));
        }
        Ok(Self {
            kind,
            in_dim,
            num_classes,
        })
    }

    /// `head.weight`/`head.bias`; edge heads decode by dot product and carry none.
    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        if self.kind != HeadKind::EdgePred {
            init_linear(&mut ps, rng, "head", self.in_dim, self.num_classes);
        }
        ps
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            HeadKind::EdgePred => 0,
            _ => self.in_dim * self.num_classes + self.num_classes,
        }
    }
}

/// Structural context a head needs beyond node representations.
#[derive(Clone, Debug)]
pub enum HeadContext {
    Nodes,
    Graphs {
        graph_id: Arc<Vec<usize>>,
        count: usize,
    },
    Pairs {
        src: Arc<Vec<usize>>,
        dst: Arc<Vec<usize>>,
    },
}

/// Pre-activation outputs: class logits, or the raw dot product `z_u . z_v` for edges.
pub fn head_logits(
    tape: &mut Tape,
    spec: &HeadSpec,
    z: Var,
    ctx: &HeadContext,
    params: &Bound,
) -> Result<Var> {
    let width = tape.value(z).cols();
    if width != spec.in_dim {
        return Err(Error::dim(
            "head_forward",
            format!(
                "representation width {width} != head in_dim {}",
                spec.in_dim
            ),
        ));
    }
    match (spec.kind, ctx) {
        (HeadKind::NodeCls, _) => apply_linear(tape, params, "head", z),
        (HeadKind::GraphCls | HeadKind::PtcldCls, HeadContext::Graphs { graph_id, count }) => {
            let pooled = tape.segment_mean(z, graph_id.clone(), *count)?;
            apply_linear(tape, params, "head", pooled)
        }
        (HeadKind::EdgePred, HeadContext::Pairs { src, dst }) => {
            let zu = tape.row_select(z, src.clone())?;
            let zv = tape.row_select(z, dst.clone())?;
            let prod = tape.mul(zu, zv)?;
            let ones = tape.constant(Tensor::full(&[spec.in_dim, 1], 1.0));
            tape.matmul(prod, ones)
        }
        (kind, _) => Err(Error::Config(format!(
            "head {kind:?} is missing its batch/pair context"
        ))),
    }
}

/// Head outputs: logits for classification heads, `sigmoid(z_u . z_v)` for edges.
pub fn head_forward(
    tape: &mut Tape,
    spec: &HeadSpec,
    z: Var,
    ctx: &HeadContext,
    params: &Bound,
) -> Result<Var> {
    let out = head_logits(tape, spec, z, ctx, params)?;
    if spec.kind == HeadKind::EdgePred {
        tape.sigmoid(out)
    } else {
        Ok(out)
    }
}

/// Mean cross-entropy of head logits against integer targets. Edge logits are
/// lifted to two-class logits `[0, s]`, which is exactly binary cross-entropy.
pub fn head_loss(
    tape: &mut Tape,
    spec: &HeadSpec,
    logits: Var,
    targets: Arc<Vec<usize>>,
) -> Result<Var> {
    let logits = if spec.kind == HeadKind::EdgePred {
        let n = tape.value(logits).rows();
        let zero = tape.constant(Tensor::zeros(&[n, 1]));
        tape.concat(&[zero, logits], Axis::Cols)?
    } else {
        logits
    };
    let lp = tape.log_softmax(logits)?;
    tape.cross_entropy(lp, targets)
}

/// k nearest neighbours of each point (Euclidean; ties broken by lower index).
pub fn knn_neighbors(points: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let m = points.rows();
    if k == 0 || k >= m {
        return Err(Error::Config(format!(
            "knn needs 1 <= k < m (k={k}, m={m})"
        )));
    }
    let dist = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    Ok((0..m)
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| (dist(i, j), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect())
}

/// Symmetrised kNN graph with raw coordinates as features.
pub fn knn_graph(points: &Tensor, k: usize) -> Result<Graph> {
    let nbrs = knn_neighbors(points, k)?;
    let pairs: Vec<(usize, usize)> = nbrs
        .iter()
        .enumerate()
        .flat_map(|(i, ns)| ns.iter().map(move |&j| (i, j)))
        .collect();
    Graph::undirected(points.clone(), &pairs)
}

/// Held-out link-prediction task.
#[derive(Clone, Debug)]
pub struct EdgeTask {
    /// The input graph with every held-out positive removed.
    pub graph: Graph,
    pub pairs: Vec<(usize, usize)>,
    /// 1 for held-out edges, 0 for sampled non-edges.
    pub labels: Vec<usize>,
}

pub fn sample_edge_task(graph: &Graph, ratio: f64, seed: u64) -> Result<EdgeTask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "edge holdout ratio {ratio} outside [0,1]"
        )));
    }
    let mut pairs = graph.undirected_pairs();
    let e = pairs.len();
    let n = graph.num_nodes();
    if e == 0 {
        return Err(Error::Data("edge task needs at least one edge".into()));
    }
    let n_pos = ((ratio * e as f64).ceil() as usize).max(1);
    if n_pos >= e {
        return Err(Error::Config(format!(
            "holdout ratio {ratio} would remove all {e} edges"
        )));
    }
    let non_edges = n * (n - 1) / 2 - e;
    if non_edges < n_pos {
        return Err(Error::Data(format!(
            "only {non_edges} non-edges available for {n_pos} negatives"
        )));
    }
    let mut rng = seeded(seed);
    pairs.shuffle(&mut rng);
    let positives: Vec<(usize, usize)> = pairs[..n_pos].to_vec();
    let kept = &pairs[n_pos..];

    let existing: HashSet<(usize, usize)> = graph.undirected_pairs().into_iter().collect();
    let mut chosen = HashSet::new();
    let mut negatives = Vec::with_capacity(n_pos);
    while negatives.len() < n_pos {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let p = (u.min(v), u.max(v));
        if existing.contains(&p) || !chosen.insert(p) {
            continue;
        }
        negatives.push(p);
    }

    let mut remaining = Graph::undirected(graph.features.clone(), kept)?;
    remaining.node_labels = graph.node_labels.clone();
    let mut labels = vec![1; n_pos];
    labels.extend(std::iter::repeat_n(0, n_pos));
    let mut all = positives;
    all.extend(negatives);
    Ok(EdgeTask {
        graph: remaining,
        pairs: all,
        labels,
    })
}

/// Unit-weight adjacency helper used by tests and generators.
pub fn adjacency_of(n: usize, pairs: &[(usize, usize)]) -> Result<SparseAdj> {
    SparseAdj::unweighted(n, crate::graph::symmetrize(pairs), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::sigmoid;

    #[test]
    fn identity_and_padding() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let id = AdapterSpec::new(AdapterKind::Identity, 3, 3, 0).unwrap();
        assert_eq!(input_adapt(&x, &id).unwrap(), x);
        let pad = AdapterSpec::new(AdapterKind::PadTruncate, 3, 5, 0).unwrap();
        assert_eq!(
            input_adapt(&x, &pad).unwrap().data(),
            &[1.0, 2.0, 3.0, 0.0, 0.0]
        );
        let cut = AdapterSpec::new(AdapterKind::PadTruncate, 3, 2, 0).unwrap();
        assert_eq!(input_adapt(&x, &cut).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn identity_mismatch_rejected() {
        assert!(AdapterSpec::new(AdapterKind::Identity, 3, 4, 0).is_err());
    }

    #[test]
    fn rand_project_deterministic() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 1.0, 4.0]]);
        let s = AdapterSpec::new(AdapterKind::RandProject, 3, 7, 11).unwrap();
        let a = input_adapt(&x, &s).unwrap();
        assert_eq!(a, input_adapt(&x, &s).unwrap());
        assert_eq!(a.shape(), &[2, 7]);
    }

    #[test]
    fn pooled_equal_rows() {
        let mut tape = Tape::new();
        let spec = HeadSpec::new(HeadKind::GraphCls, 2, 2).unwrap();
        let mut ps = ParamSet::new();
        ps.insert("head.weight", Tensor::eye(2));
        ps.insert("head.bias", Tensor::zeros(&[1, 2]));
        let b = ps.bind(&mut tape, false);
        let z = tape.constant(Tensor::from_rows(&vec![vec![0.3, 0.7]; 4]));
        let ctx = HeadContext::Graphs {
            graph_id: Arc::new(vec![0; 4]),
            count: 1,
        };
        let out = head_forward(&mut tape, &spec, z, &ctx, &b).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - 0.3).abs() < 1e-15 && (got[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn edge_score_is_logistic_of_dot() {
        let mut tape = Tape::new();
        let spec = HeadSpec::new(HeadKind::EdgePred, 2, 2).unwrap();
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]));
        let ctx = HeadContext::Pairs {
            src: Arc::new(vec![0]),
            dst: Arc::new(vec![1]),
        };
        let out = head_forward(&mut tape, &spec, z, &ctx, &Bound::default()).unwrap();
        let s = tape.value(out).data()[0];
        assert!((s - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((s - sigmoid(1.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_head_gives_ln_c() {
        let mut tape = Tape::new();
        let spec = HeadSpec::new(HeadKind::NodeCls, 3, 4).unwrap();
        let mut ps = ParamSet::new();
        ps.insert("head.weight", Tensor::zeros(&[3, 4]));
        ps.insert("head.bias", Tensor::zeros(&[1, 4]));
        let b = ps.bind(&mut tape, true);
        let z = tape.constant(Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![-1.0, 0.0, 5.0],
        ]));
        let logits = head_forward(&mut tape, &spec, z, &HeadContext::Nodes, &b).unwrap();
        let loss = head_loss(&mut tape, &spec, logits, Arc::new(vec![0, 3])).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pooled_head_without_context_errors() {
        let mut tape = Tape::new();
        let spec = HeadSpec::new(HeadKind::GraphCls, 2, 2).unwrap();
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(head_forward(&mut tape, &spec, z, &HeadContext::Nodes, &Bound::default()).is_err());
    }

    #[test]
    fn knn_small_cases() {
        let two = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]);
        assert_eq!(knn_graph(&two, 1).unwrap().undirected_pairs(), vec![(0, 1)]);
        let line = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![3.0, 0.0, 0.0],
        ]);
        assert_eq!(
            knn_graph(&line, 1).unwrap().undirected_pairs(),
            vec![(0, 1), (1, 2)]
        );
        assert!(knn_graph(&line, 3).is_err());
    }

    #[test]
    fn knn_duplicates_rank_first() {
        let pts = Tensor::from_rows(&[vec![0.0; 3], vec![5.0, 0.0, 0.0], vec![0.0; 3]]);
        let n = knn_neighbors(&pts, 1).unwrap();
        assert_eq!(n[0], vec![2]);
        assert_eq!(n[2], vec![0]);
    }

    fn ring(n: usize) -> Graph {
        let pairs: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Graph::undirected(Tensor::full(&[n, 1], 1.0), &pairs).unwrap()
    }

    #[test]
    fn minimal_edge_task() {
        let g = ring(6);
        let t = sample_edge_task(&g, 1e-9, 3).unwrap();
        assert_eq!(t.pairs.len(), 2);
        assert_eq!(t.labels, vec![1, 0]);
        assert_eq!(t.graph.undirected_pairs().len(), 5);
    }

    #[test]
    fn holdout_removes_positives() {
        let g = ring(12);
        let t = sample_edge_task(&g, 0.3, 9).unwrap();
        let remaining: HashSet<_> = t.graph.undirected_pairs().into_iter().collect();
        let original: HashSet<_> = g.undirected_pairs().into_iter().collect();
        for (p, &l) in t.pairs.iter().zip(&t.labels) {
            if l == 1 {
                assert!(!remaining.contains(p));
            } else {
                assert!(!original.contains(p));
            }
        }
        let pos = t.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(pos * 2, t.labels.len());
    }

    #[test]
    fn removing_all_edges_rejected() {
        assert!(sample_edge_task(&ring(4), 1.0, 0).is_err());
    }
}
