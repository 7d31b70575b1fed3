//! Graph-level contrastive pre-training: view augmentation, encoder perturbation and NT-Xent.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, BackboneConfig, Propagation};
use crate::checkpoint::{Checkpoint, Provenance};
use crate::error::{Error, Result};
use crate::graph::{batch_graphs, Graph, GraphSet, TaskKind};
use crate::optim::{collect_grads, Adam};
use crate::params::{Bound, ParamSet};
use crate::rng::{derive, seeded};
use crate::synth::{chunk_graph, induced, random_walk_nodes};
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    NodeDrop,
    EdgePerturb,
    AttrMask,
    Subgraph,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::NodeDrop,
        AugmentKind::EdgePerturb,
        AugmentKind::AttrMask,
        AugmentKind::Subgraph,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub ratio: f64,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!(
                "augment ratio {ratio} outside [0,1]"
            )));
        }
        Ok(Self { kind, ratio, seed })
    }
}

fn ceil_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).ceil() as usize
}

/// One stochastic view of `graph`. Graph labels are carried over.
pub fn augment(graph: &Graph, spec: &AugmentSpec) -> Result<Graph> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(Error::Config(format!(
            "augment ratio {} outside [0,1]",
            spec.ratio
        )));
    }
    if spec.ratio == 0.0 {
        return Ok(graph.clone());
    }
    let n = graph.num_nodes();
    let mut rng = seeded(spec.seed);
    match spec.kind {
        AugmentKind::NodeDrop => {
            let drop = ceil_count(spec.ratio, n);
            if drop >= n {
                return Err(Error::Data(format!(
                    "node_drop of {drop} nodes would empty a {n}-node graph"
                )));
            }
            let mut keep = index::sample(&mut rng, n, n - drop).into_vec();
            keep.sort_unstable();
            induced(graph, &keep)
        }
        AugmentKind::EdgePerturb => {
            let mut pairs = graph.undirected_pairs();
            let e = pairs.len();
            let k = ceil_count(spec.ratio, e).min(e);
            pairs.shuffle(&mut rng);
            let existing: HashSet<(usize, usize)> = pairs.iter().copied().collect();
            let mut kept: Vec<(usize, usize)> = pairs[k..].to_vec();
            let free = (n * n.saturating_sub(1) / 2).saturating_sub(e);
            let add = k.min(free);
            let mut added = HashSet::new();
            while added.len() < add {
                let u = rng.random_range(0..n);
                let v = rng.random_range(0..n);
                if u == v {
                    continue;
                }
                let p = (u.min(v), u.max(v));
                if !existing.contains(&p) && added.insert(p) {
                    kept.push(p);
                }
            }
            let mut out = Graph::undirected(graph.features.clone(), &kept)?;
            out.graph_label = graph.graph_label;
            out.node_labels = graph.node_labels.clone();
            Ok(out)
        }
        AugmentKind::AttrMask => {
            let k = ceil_count(spec.ratio, n).min(n);
            let rows = index::sample(&mut rng, n, k).into_vec();
            let mut out = graph.clone();
            let d = out.feature_dim();
            let data = out.features.data_mut();
            for r in rows {
                data[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
            Ok(out)
        }
        AugmentKind::Subgraph => {
            let keep = ceil_count(1.0 - spec.ratio, n);
            if keep == 0 {
                return Err(Error::Data(format!(
                    "subgraph ratio {} keeps no nodes of a {n}-node graph",
                    spec.ratio
                )));
            }
            let mut nbrs = vec![Vec::new(); n];
            for &(s, t) in graph.adj.edges() {
                if s != t {
                    nbrs[s].push(t);
                }
            }
            let nodes = random_walk_nodes(&nbrs, keep, &mut rng);
            induced(graph, &nodes)
        }
    }
}

/// `w + eta * std(w) * eps` per array, `eps` standard normal from a per-array stream.
pub fn perturbation(params: &ParamSet, eta: f64, seed: u64) -> Result<ParamSet> {
    if !(eta >= 0.0) {
        return Err(Error::Config(format!(
            "perturb magnitude {eta} must be >= 0"
        )));
    }
    let mut out = ParamSet::new();
    for (i, (name, w)) in params.iter().enumerate() {
        let n = w.numel() as f64;
        let mean = w.sum() / n;
        let flat = w.data().iter().all(|&v| v == w.data()[0]);
        let std = if flat {
            0.0
        } else {
            (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        };
        let scale = eta * std;
        let mut rng = seeded(derive(seed, &[i as u64]));
        let data = (0..w.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        out.insert(name.clone(), Tensor::new(w.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Perturbed copy of `params`; arrays with zero spread (and `eta = 0`) come back bitwise unchanged.
pub fn perturb_weights(params: &ParamSet, eta: f64, seed: u64) -> Result<ParamSet> {
    let noise = perturbation(params, eta, seed)?;
    let mut out = params.clone();
    for (name, w) in out.iter_mut() {
        let d = noise.get(name)?;
        if d.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        for (a, b) in w.data_mut().iter_mut().zip(d.data()) {
            *a += b;
        }
    }
    Ok(out)
}

/// Mask value placed on self-similarities before the softmax.
const SELF_MASK: f64 = -1e9;

/// Mean NT-Xent over the `2N` anchors of two aligned view batches.
pub fn ntxent_loss(tape: &mut Tape, za: Var, zb: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be > 0")));
    }
    let (na, nb) = (tape.value(za).rows(), tape.value(zb).rows());
    if na != nb {
        return Err(Error::dim("ntxent_loss", format!("{na} vs {nb} view rows")));
    }
    if na < 2 {
        return Err(Error::Data(format!(
            "ntxent needs at least 2 graphs per batch for negatives (got {na})"
        )));
    }
    let z = tape.concat(&[za, zb], Axis::Rows)?;
    let z = tape.l2_norm(z)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let m = 2 * na;
    let mut mask = Tensor::zeros(&[m, m]);
    for i in 0..m {
        mask.data_mut()[i * m + i] = SELF_MASK;
    }
    let mask = tape.constant(mask);
    let logits = tape.add(sim, mask)?;
    let lp = tape.log_softmax(logits)?;
    let targets: Vec<usize> = (0..m).map(|i| (i + na) % m).collect();
    tape.cross_entropy(lp, Arc::new(targets))
}

/// Forward-only NT-Xent value.
pub fn ntxent_value(za: &Tensor, zb: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(za.clone());
    let b = tape.constant(zb.clone());
    let l = ntxent_loss(&mut tape, a, b, tau)?;
    Ok(tape.value(l).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMethod {
    Graphcl,
    Simgrace,
}

impl fmt::Display for PretrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PretrainMethod::Graphcl => "graphcl",
            PretrainMethod::Simgrace => "simgrace",
        })
    }
}

impl FromStr for PretrainMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graphcl" => Ok(PretrainMethod::Graphcl),
            "simgrace" => Ok(PretrainMethod::Simgrace),
            o => Err(Error::Config(format!("unknown pretrain method {o:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub method: PretrainMethod,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eta: f64,
    pub seed: u64,
    /// The two GraphCL view augmentations as `(kind, ratio)`.
    pub views: [(AugmentKind, f64); 2],
    /// Pseudo-graph size when pre-training on a single node-task graph.
    pub chunk_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            method: PretrainMethod::Graphcl,
            temperature: 0.5,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            eta: 1.0,
            seed: 0,
            views: [
                (AugmentKind::NodeDrop, 0.2),
                (AugmentKind::EdgePerturb, 0.2),
            ],
            chunk_size: 50,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config(format!("eta {} must be >= 0", self.eta)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("pretrain batch_size must be >= 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("pretrain lr must be > 0".into()));
        }
        for (_, r) in self.views {
            AugmentSpec::new(AugmentKind::NodeDrop, r, 0)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean NT-Xent per epoch.
    pub losses: Vec<f64>,
}

/// `epoch,loss` CSV of a loss trajectory.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

/// Falls back to the clean graph when a view would be degenerate (e.g. 1-node graphs).
fn view(g: &Graph, kind: AugmentKind, ratio: f64, seed: u64) -> Result<Graph> {
    match augment(g, &AugmentSpec { kind, ratio, seed }) {
        Err(Error::Data(_)) => Ok(g.clone()),
        other => other,
    }
}

fn pooled(tape: &mut Tape, cfg: &BackboneConfig, params: &Bound, graphs: &[&Graph]) -> Result<Var> {
    let batch = batch_graphs(graphs)?;
    let prop = Propagation::new(cfg.kind, &batch.adj);
    let x = tape.constant(batch.features.clone());
    let out = backbone_forward(tape, cfg, params, &prop, x, false)?;
    tape.segment_mean(out.last, batch.graph_id.clone(), batch.num_graphs())
}

/// Contrastive pre-training of a fresh backbone initialised from `cfg.seed`.
pub fn pretrain(
    dataset: &GraphSet,
    backbone: &BackboneConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    backbone.validate()?;
    if dataset.graphs.is_empty() {
        return Err(Error::Data("pretrain dataset is empty".into()));
    }
    if dataset.feature_dim != backbone.in_dim {
        return Err(Error::Config(format!(
            "pretrain data feature dim {} != backbone in_dim {}",
            dataset.feature_dim, backbone.in_dim
        )));
    }
    let mut notes = BTreeMap::new();
    let chunked;
    let corpus: &GraphSet = if dataset.kind == TaskKind::NodeTask {
        let g = &dataset.graphs[0];
        let count = (2 * g.num_nodes().div_ceil(cfg.chunk_size)).max(8);
        chunked = chunk_graph(g, cfg.chunk_size, count, derive(cfg.seed, &[0xc4]))?;
        notes.insert(
            "corpus".into(),
            format!(
                "random_walk_chunks:{}x{}",
                count,
                cfg.chunk_size.min(g.num_nodes())
            ),
        );
        &chunked
    } else {
        dataset
    };
    if corpus.graphs.len() < 2 {
        return Err(Error::Data(
            "contrastive pre-training needs at least 2 graphs".into(),
        ));
    }

    let mut params = backbone.init(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let n = corpus.graphs.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded(derive(cfg.seed, &[1, epoch as u64])));
        let mut chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // a trailing singleton batch has no negatives; fold it into the previous one
        let tail_fix;
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            chunks.pop();
            let last = chunks.pop().unwrap();
            tail_fix = [last, &order[n - 1..]].concat();
            chunks.push(&tail_fix);
        }
        let mut total = 0.0;
        for (bi, idx) in chunks.iter().enumerate() {
            let base_seed = derive(cfg.seed, &[2, epoch as u64, bi as u64]);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let graphs: Vec<&Graph> = idx.iter().map(|&i| &corpus.graphs[i]).collect();
            let (za, zb) = match cfg.method {
                PretrainMethod::Graphcl => {
                    let mut va = Vec::with_capacity(graphs.len());
                    let mut vb = Vec::with_capacity(graphs.len());
                    for (j, g) in graphs.iter().enumerate() {
                        let s = derive(base_seed, &[j as u64]);
                        va.push(view(g, cfg.views[0].0, cfg.views[0].1, derive(s, &[0]))?);
                        vb.push(view(g, cfg.views[1].0, cfg.views[1].1, derive(s, &[1]))?);
                    }
                    let za = pooled(&mut tape, backbone, &bound, &va.iter().collect::<Vec<_>>())?;
                    let zb = pooled(&mut tape, backbone, &bound, &vb.iter().collect::<Vec<_>>())?;
                    (za, zb)
                }
                PretrainMethod::Simgrace => {
                    let za = pooled(&mut tape, backbone, &bound, &graphs)?;
                    let noise = perturbation(&params, cfg.eta, base_seed)?;
                    let mut perturbed = Vec::new();
                    for (name, &v) in bound.iter() {
                        let c = tape.constant(noise.get(name)?.clone());
                        perturbed.push((name.clone(), tape.add(v, c)?));
                    }
                    let pb: Bound = perturbed.into_iter().collect();
                    let zb = pooled(&mut tape, backbone, &pb, &graphs)?;
                    (za, zb)
                }
            };
            let loss = ntxent_loss(&mut tape, za, zb, cfg.temperature)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite NT-Xent at epoch {epoch} batch {bi}"
                )));
            }
            total += lv;
            let mut grads = tape.backward(loss)?;
            let g = collect_grads(&bound, &mut grads);
            opt.step(&mut params, &g)?;
        }
        losses.push(total / chunks.len() as f64);
    }

    notes.insert("temperature".into(), cfg.temperature.to_string());
    notes.insert("epochs".into(), cfg.epochs.to_string());
    if cfg.method == PretrainMethod::Simgrace {
        notes.insert("eta".into(), cfg.eta.to_string());
    }
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            config: backbone.clone(),
            params,
            provenance: Provenance {
                method: cfg.method.to_string(),
                seed: cfg.seed,
                notes,
            },
        },
        losses,
    })
}
