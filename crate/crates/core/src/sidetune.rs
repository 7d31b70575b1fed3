//! Side-tuning a frozen backbone: block, assemble, scaffold and merge variants, plus
//! full fine-tuning and scratch baselines.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, side_mlp_count, BackboneConfig, Propagation};
use crate::bridges::{
    adapter_forward, head_logits, head_loss, AdapterSpec, EdgeTask, HeadContext, HeadKind, HeadSpec,
};
use crate::error::{Error, Result};
use crate::graph::{batch_graphs, make_splits, Graph, GraphSet, TaskKind};
use crate::metrics::{accuracy, argmax_rows, confusion, macro_auc, roc_auc};
use crate::optim::{collect_grads, Adam};
use crate::params::{apply_linear, init_linear, Bound, ParamSet};
use crate::rng::{derive, seeded};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    Gbst,
    Gast,
    Gsst,
    Gmst,
    Ft,
    Scratch,
}

impl TuneMode {
    pub const ALL: [TuneMode; 6] = [
        TuneMode::Gbst,
        TuneMode::Gast,
        TuneMode::Gsst,
        TuneMode::Gmst,
        TuneMode::Ft,
        TuneMode::Scratch,
    ];
    pub const SIDE: [TuneMode; 4] = [
        TuneMode::Gbst,
        TuneMode::Gast,
        TuneMode::Gsst,
        TuneMode::Gmst,
    ];

    /// Frozen base with a trainable side network.
    pub fn is_side(self) -> bool {
        !matches!(self, TuneMode::Ft | TuneMode::Scratch)
    }

    pub fn has_backup(self) -> bool {
        matches!(self, TuneMode::Gast | TuneMode::Gmst)
    }

    /// Fusion at every layer rather than once at the end.
    pub fn layerwise(self) -> bool {
        matches!(self, TuneMode::Gsst | TuneMode::Gmst)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TuneMode::Gbst => "gbst",
            TuneMode::Gast => "gast",
            TuneMode::Gsst => "gsst",
            TuneMode::Gmst => "gmst",
            TuneMode::Ft => "ft",
            TuneMode::Scratch => "scratch",
        }
    }
}

impl fmt::Display for TuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TuneMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown tuning mode {s:?}")))
    }
}

pub const DEFAULT_SIDE_HIDDEN: usize = 16;
pub const DEFAULT_PATIENCE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideTuneConfig {
    pub mode: TuneMode,
    pub side_hidden: usize,
    pub alpha_init_raw: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub patience: usize,
    /// Graphs per optimizer step for graph-level tasks.
    pub batch_size: usize,
}

impl Default for SideTuneConfig {
    fn default() -> Self {
        Self {
            mode: TuneMode::Gsst,
            side_hidden: DEFAULT_SIDE_HIDDEN,
            alpha_init_raw: 0.0,
            lr: 1e-2,
            epochs: 100,
            seed: 0,
            patience: DEFAULT_PATIENCE,
            batch_size: 32,
        }
    }
}

impl SideTuneConfig {
    pub fn new(mode: TuneMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side_hidden == 0 {
            return Err(Error::Config("side_hidden must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be > 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.alpha_init_raw.is_finite() {
            return Err(Error::Config("alpha_init_raw must be finite".into()));
        }
        Ok(())
    }
}

/// `sigmoid(raw) * a + (1 - sigmoid(raw)) * b`.
pub fn blend(tape: &mut Tape, raw: Var, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (
        tape.value(a).shape().to_vec(),
        tape.value(b).shape().to_vec(),
    );
    if sa != sb {
        return Err(Error::dim("blend", format!("{sa:?} vs {sb:?}")));
    }
    if tape.value(raw).numel() != 1 {
        return Err(Error::dim(
            "blend",
            "alpha must be a single scalar".to_string(),
        ));
    }
    let w = tape.sigmoid(raw)?;
    let neg = tape.scale(raw, -1.0)?;
    let wc = tape.sigmoid(neg)?;
    let ta = tape.mul(w, a)?;
    let tb = tape.mul(wc, b)?;
    tape.add(ta, tb)
}

/// Layer-wise blend of pre-trained and backup activations.
pub fn base_merge(tape: &mut Tape, pre: &[Var], backup: &[Var], raws: &[Var]) -> Result<Vec<Var>> {
    if pre.len() != backup.len() || pre.len() != raws.len() {
        return Err(Error::dim(
            "base_merge",
            format!(
                "{} pre-trained, {} backup layers, {} alpha_b",
                pre.len(),
                backup.len(),
                raws.len()
            ),
        ));
    }
    pre.iter()
        .zip(backup)
        .zip(raws)
        .map(|((&p, &b), &r)| blend(tape, r, p, b))
        .collect()
}

/// Frozen towers plus trainable side, fusion, head and adapter parameters.
#[derive(Clone, Debug)]
pub struct SideTuneModel {
    pub mode: TuneMode,
    pub backbone: BackboneConfig,
    pub side_hidden: usize,
    /// Pre-trained weights; trainable only in `ft`, freshly initialised in `scratch`.
    pub base: ParamSet,
    pub backup: Option<ParamSet>,
    /// `side.*`, `down*`, `alpha_s*`, `alpha_b*`, `head.*`, `adapter.*`.
    pub trainable: ParamSet,
    pub adapter: AdapterSpec,
    pub head: HeadSpec,
}

const TAG_SCRATCH: u64 = 0x5c;
const TAG_BACKUP: u64 = 0xbac;
const TAG_SIDE: u64 = 0x51de;

/// Layer indices that carry a downsampler and fusion scalars.
pub fn fusion_layers(mode: TuneMode, layers: usize) -> Vec<usize> {
    if mode.layerwise() {
        (0..layers).collect()
    } else if mode.is_side() {
        vec![layers - 1]
    } else {
        Vec::new()
    }
}

impl SideTuneModel {
    /// `pretrained` may be `None` only in scratch mode.
    pub fn new(
        backbone: &BackboneConfig,
        pretrained: Option<&ParamSet>,
        adapter: AdapterSpec,
        head_kind: HeadKind,
        num_classes: usize,
        cfg: &SideTuneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        backbone.validate()?;
        let mode = cfg.mode;
        if adapter.dst_dim != backbone.in_dim {
            return Err(Error::Config(format!(
                "adapter output {} != backbone in_dim {}",
                adapter.dst_dim, backbone.in_dim
            )));
        }
        let base = match (mode, pretrained) {
            (TuneMode::Scratch, _) => backbone.init(derive(cfg.seed, &[TAG_SCRATCH])),
            (_, Some(p)) => {
                backbone.check_params(p)?;
                p.clone()
            }
            (_, None) => {
                return Err(Error::Config(format!(
                    "mode {mode} needs a pre-trained checkpoint"
                )));
            }
        };
        let backup = mode
            .has_backup()
            .then(|| backbone.init(derive(cfg.seed, &[TAG_BACKUP])));

        let l = backbone.layers;
        let s = cfg.side_hidden;
        let mut rng = seeded(derive(cfg.seed, &[TAG_SIDE]));
        let mut tr = ParamSet::new();
        if mode.is_side() {
            for i in 0..l {
                let fan_in = if i == 0 { backbone.in_dim } else { s };
                init_linear(&mut tr, &mut rng, &format!("side.layer{i}"), fan_in, s);
            }
            for i in fusion_layers(mode, l) {
                init_linear(
                    &mut tr,
                    &mut rng,
                    &format!("down{i}"),
                    backbone.hidden_dim,
                    s,
                );
                tr.insert(format!("alpha_s{i}"), Tensor::scalar(cfg.alpha_init_raw));
                if mode.has_backup() {
                    tr.insert(format!("alpha_b{i}"), Tensor::scalar(cfg.alpha_init_raw));
                }
            }
        }
        let head_in = if mode.is_side() {
            s
        } else {
            backbone.hidden_dim
        };
        let head = HeadSpec::new(head_kind, head_in, num_classes)?;
        tr.merge(head.init_params(&mut rng));
        tr.merge(adapter.init_params());
        Ok(Self {
            mode,
            backbone: backbone.clone(),
            side_hidden: s,
            base,
            backup,
            trainable: tr,
            adapter,
            head,
        })
    }

    pub fn base_trainable(&self) -> bool {
        !self.mode.is_side()
    }

    /// Exact trainable scalar count, including any trainable input adapter.
    pub fn count_tunables(&self) -> usize {
        let base = if self.base_trainable() {
            self.base.scalar_count()
        } else {
            0
        };
        base + self.trainable.scalar_count()
    }

    /// Trainable count without the input adapter, the quantity compared across modes.
    pub fn count_tunables_core(&self) -> usize {
        self.count_tunables() - self.adapter.param_count()
    }

    pub fn bind(&self, tape: &mut Tape, grad: bool) -> ModelVars {
        ModelVars {
            base: self.base.bind(tape, grad && self.base_trainable()),
            backup: self.backup.as_ref().map(|b| b.bind(tape, false)),
            trainable: self.trainable.bind(tape, grad),
        }
    }

    /// Every trainable array, base arrays prefixed `base/` in ft/scratch modes.
    pub fn trainable_list(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if self.base_trainable() {
            out.extend(
                self.base
                    .iter()
                    .map(|(k, v)| (format!("base/{k}"), v.clone())),
            );
        }
        out.extend(self.trainable.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    /// Rebuilds model handles from leaves created for [`Self::trainable_list`]; frozen towers
    /// are bound as constants.
    pub fn vars_from_list(
        &self,
        tape: &mut Tape,
        names: &[(String, Tensor)],
        vars: &[Var],
    ) -> ModelVars {
        let mut base = Vec::new();
        let mut trainable = Vec::new();
        for ((name, _), &v) in names.iter().zip(vars) {
            match name.strip_prefix("base/") {
                Some(b) => base.push((b.to_string(), v)),
                None => trainable.push((name.clone(), v)),
            }
        }
        let base: Bound = if self.base_trainable() {
            base.into_iter().collect()
        } else {
            self.base.bind(tape, false)
        };
        ModelVars {
            base,
            backup: self.backup.as_ref().map(|b| b.bind(tape, false)),
            trainable: trainable.into_iter().collect(),
        }
    }

    /// Fused node representation `z_L` for already-bridged input `x`.
    pub fn forward_repr(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        prop: &Propagation,
        x: Var,
    ) -> Result<Var> {
        sidetune_forward(tape, self, vars, prop, x)
    }

    /// Head logits for a batch, rows selected when the batch asks for it.
    pub fn logits(&self, tape: &mut Tape, vars: &ModelVars, batch: &TuneBatch) -> Result<Var> {
        let x = adapter_forward(tape, &self.adapter, &batch.features, &vars.trainable)?;
        let z = sidetune_forward(tape, self, vars, &batch.prop, x)?;
        let out = head_logits(tape, &self.head, z, &batch.ctx, &vars.trainable)?;
        match &batch.rows {
            Some(rows) => tape.row_select(out, rows.clone()),
            None => Ok(out),
        }
    }

    pub fn loss(&self, tape: &mut Tape, vars: &ModelVars, batch: &TuneBatch) -> Result<Var> {
        let logits = self.logits(tape, vars, batch)?;
        head_loss(tape, &self.head, logits, batch.labels.clone())
    }

    /// Forward-only logits.
    pub fn predict(&self, batch: &TuneBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.logits(&mut tape, &vars, batch)?;
        Ok(tape.value(out).clone())
    }

    fn frozen_fingerprint(&self) -> Vec<(String, Vec<u64>)> {
        let mut fp = Vec::new();
        if !self.base_trainable() {
            fp.extend(self.base.fingerprint());
        }
        if let Some(b) = &self.backup {
            fp.extend(
                b.fingerprint()
                    .into_iter()
                    .map(|(k, v)| (format!("backup/{k}"), v)),
            );
        }
        fp
    }
}

/// Tape handles of one model binding.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub base: Bound,
    pub backup: Option<Bound>,
    pub trainable: Bound,
}

fn side_layer(tape: &mut Tape, vars: &ModelVars, i: usize, last: bool, h: Var) -> Result<Var> {
    let s = apply_linear(tape, &vars.trainable, &format!("side.layer{i}"), h)?;
    if last {
        Ok(s)
    } else {
        tape.relu(s)
    }
}

/// Fused representation for every mode (`ft`/`scratch` return the backbone output).
pub fn sidetune_forward(
    tape: &mut Tape,
    model: &SideTuneModel,
    vars: &ModelVars,
    prop: &Propagation,
    x: Var,
) -> Result<Var> {
    let cfg = &model.backbone;
    let mode = model.mode;
    if !mode.is_side() {
        return Ok(backbone_forward(tape, cfg, &vars.base, prop, x, false)?.last);
    }
    let l = cfg.layers;
    let fusion = fusion_layers(mode, l);
    let base = backbone_forward(tape, cfg, &vars.base, prop, x, true)?;
    let mut signal: BTreeMap<usize, Var> =
        fusion.iter().map(|&i| (i, base.activations[i])).collect();
    if mode.has_backup() {
        let backup_params = vars
            .backup
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("mode {mode} needs a backup tower")))?;
        let backup = backbone_forward(tape, cfg, backup_params, prop, x, true)?;
        let pre: Vec<Var> = fusion.iter().map(|&i| base.activations[i]).collect();
        let bak: Vec<Var> = fusion.iter().map(|&i| backup.activations[i]).collect();
        let raws = fusion
            .iter()
            .map(|i| vars.trainable.get(&format!("alpha_b{i}")))
            .collect::<Result<Vec<_>>>()?;
        let merged = base_merge(tape, &pre, &bak, &raws)?;
        signal = fusion.iter().copied().zip(merged).collect();
    }

    let fuse = |tape: &mut Tape, i: usize, s: Var| -> Result<Var> {
        let d = apply_linear(tape, &vars.trainable, &format!("down{i}"), signal[&i])?;
        let raw = vars.trainable.get(&format!("alpha_s{i}"))?;
        blend(tape, raw, d, s)
    };
    let mut z = x;
    for i in 0..l {
        let s = side_layer(tape, vars, i, i + 1 == l, z)?;
        z = if mode.layerwise() || i + 1 == l {
            fuse(tape, i, s)?
        } else {
            s
        };
    }
    Ok(z)
}

/// Closed-form trainable count (input adapter excluded).
pub fn closed_form_tunables(
    mode: TuneMode,
    cfg: &BackboneConfig,
    side_hidden: usize,
    head_kind: HeadKind,
    num_classes: usize,
) -> Result<usize> {
    let head_in = if mode.is_side() {
        side_hidden
    } else {
        cfg.hidden_dim
    };
    let head = HeadSpec::new(head_kind, head_in, num_classes)?.param_count();
    if !mode.is_side() {
        return Ok(cfg.param_count() + head);
    }
    let f = fusion_layers(mode, cfg.layers).len();
    let down = f * (cfg.hidden_dim * side_hidden + side_hidden);
    let alpha_b = if mode.has_backup() { f } else { 0 };
    Ok(side_mlp_count(cfg.in_dim, side_hidden, cfg.layers) + down + f + alpha_b + head)
}

/// One forward unit: features, message-passing structure, head context and targets.
#[derive(Clone, Debug)]
pub struct TuneBatch {
    pub features: Tensor,
    pub prop: Propagation,
    pub ctx: HeadContext,
    /// Rows of the head output to score (node tasks); `None` scores every row.
    pub rows: Option<Arc<Vec<usize>>>,
    pub labels: Arc<Vec<usize>>,
}

impl TuneBatch {
    pub fn for_graphs(graphs: &[&Graph], cfg: &BackboneConfig) -> Result<Self> {
        let batch = batch_graphs(graphs)?;
        let labels = graphs
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g.graph_label
                    .ok_or_else(|| Error::Data(format!("graph {i} of a batch has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prop: Propagation::new(cfg.kind, &batch.adj),
            ctx: HeadContext::Graphs {
                graph_id: batch.graph_id.clone(),
                count: batch.num_graphs(),
            },
            features: batch.features,
            rows: None,
            labels: Arc::new(labels),
        })
    }

    pub fn for_nodes(graph: &Graph, rows: &[usize], cfg: &BackboneConfig) -> Result<Self> {
        let all = graph
            .node_labels
            .as_ref()
            .ok_or_else(|| Error::Data("node task graph has no node labels".into()))?;
        Ok(Self {
            features: graph.features.clone(),
            prop: Propagation::new(cfg.kind, &graph.adj),
            ctx: HeadContext::Nodes,
            rows: Some(Arc::new(rows.to_vec())),
            labels: Arc::new(rows.iter().map(|&r| all[r]).collect()),
        })
    }

    pub fn for_pairs(
        graph: &Graph,
        pairs: &[(usize, usize)],
        labels: &[usize],
        cfg: &BackboneConfig,
    ) -> Self {
        Self {
            features: graph.features.clone(),
            prop: Propagation::new(cfg.kind, &graph.adj),
            ctx: HeadContext::Pairs {
                src: Arc::new(pairs.iter().map(|p| p.0).collect()),
                dst: Arc::new(pairs.iter().map(|p| p.1).collect()),
            },
            rows: None,
            labels: Arc::new(labels.to_vec()),
        }
    }
}

/// Downstream data in trainable form.
#[derive(Clone, Debug)]
pub enum TaskData {
    Nodes {
        set: GraphSet,
    },
    Graphs {
        set: GraphSet,
    },
    /// Link prediction over the message-passing `graph`; pairs and labels per split.
    Edges {
        graph: Graph,
        pairs: [Vec<(usize, usize)>; 3],
        labels: [Vec<usize>; 3],
    },
}

impl TaskData {
    /// Node or graph data; splits are generated (60/20/20) when the container has none.
    pub fn from_set(set: &GraphSet, split_seed: u64) -> Result<Self> {
        set.validate()?;
        let set = make_splits(set, [0.6, 0.2, 0.2], split_seed)?;
        Ok(match set.kind {
            TaskKind::NodeTask => TaskData::Nodes { set },
            _ => TaskData::Graphs { set },
        })
    }

    /// Link prediction. Training pairs are the remaining message-passing edges plus as many
    /// sampled non-edges; the held-out pairs are split evenly into validation and test.
    pub fn from_edge_task(task: EdgeTask, split_seed: u64) -> Result<Self> {
        let n = task.pairs.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "edge task has only {n} held-out pairs"
            )));
        }
        let mut rng = seeded(split_seed);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let half = n / 2;
        let pick = |ids: &[usize]| -> (Vec<(usize, usize)>, Vec<usize>) {
            ids.iter().map(|&i| (task.pairs[i], task.labels[i])).unzip()
        };
        let (val_p, val_l) = pick(&idx[..half]);
        let (test_p, test_l) = pick(&idx[half..]);

        let positives = task.graph.undirected_pairs();
        let nn = task.graph.num_nodes();
        let mut taken: HashSet<(usize, usize)> = positives.iter().copied().collect();
        taken.extend(task.pairs.iter().copied());
        let free = (nn * nn.saturating_sub(1) / 2).saturating_sub(taken.len());
        let want = positives.len().min(free);
        let mut train_p = positives.clone();
        let mut train_l = vec![1; positives.len()];
        let mut added = 0;
        while added < want {
            let u = rng.random_range(0..nn);
            let v = rng.random_range(0..nn);
            if u == v || !taken.insert((u.min(v), u.max(v))) {
                continue;
            }
            train_p.push((u.min(v), u.max(v)));
            train_l.push(0);
            added += 1;
        }
        Ok(TaskData::Edges {
            graph: task.graph,
            pairs: [train_p, val_p, test_p],
            labels: [train_l, val_l, test_l],
        })
    }

    pub fn raw_feature_dim(&self) -> usize {
        match self {
            TaskData::Nodes { set } | TaskData::Graphs { set } => set.feature_dim,
            TaskData::Edges { graph, .. } => graph.feature_dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TaskData::Nodes { set } | TaskData::Graphs { set } => set.num_classes,
            TaskData::Edges { .. } => 2,
        }
    }

    fn item_ids(&self, which: usize) -> &[usize] {
        match self {
            TaskData::Nodes { set } | TaskData::Graphs { set } => {
                let s = set.splits.as_ref().expect("splits made on construction");
                [&s.train, &s.val, &s.test][which]
            }
            TaskData::Edges { .. } => &[],
        }
    }

    pub fn accepts_head(&self, head: HeadKind) -> bool {
        match self {
            TaskData::Nodes { .. } => head == HeadKind::NodeCls,
            TaskData::Graphs { .. } => head.is_pooled(),
            TaskData::Edges { .. } => head == HeadKind::EdgePred,
        }
    }

    /// Batch covering one split (0 train, 1 val, 2 test) in full.
    pub fn split_batch(&self, which: usize, cfg: &BackboneConfig) -> Result<TuneBatch> {
        let ids = self.item_ids(which);
        match self {
            TaskData::Nodes { set } => TuneBatch::for_nodes(&set.graphs[0], ids, cfg),
            TaskData::Graphs { set } => {
                let gs: Vec<&Graph> = ids.iter().map(|&i| &set.graphs[i]).collect();
                TuneBatch::for_graphs(&gs, cfg)
            }
            TaskData::Edges {
                graph,
                pairs,
                labels,
            } => Ok(TuneBatch::for_pairs(
                graph,
                &pairs[which],
                &labels[which],
                cfg,
            )),
        }
    }

    /// Training batches for one epoch: one full batch, or shuffled graph minibatches.
    fn train_batches(
        &self,
        cfg: &BackboneConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<Vec<TuneBatch>> {
        match self {
            TaskData::Graphs { set } => {
                let mut ids = self.item_ids(0).to_vec();
                ids.shuffle(&mut seeded(seed));
                ids.chunks(batch_size)
                    .map(|c| {
                        let gs: Vec<&Graph> = c.iter().map(|&i| &set.graphs[i]).collect();
                        TuneBatch::for_graphs(&gs, cfg)
                    })
                    .collect()
            }
            _ => Ok(vec![self.split_batch(0, cfg)?]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    RocAuc,
}

/// Scores head output against integer labels.
pub fn score(metric: Metric, head: &HeadSpec, logits: &Tensor, labels: &[usize]) -> Result<f64> {
    match metric {
        Metric::Accuracy => {
            let pred = if head.kind == HeadKind::EdgePred {
                logits
                    .data()
                    .iter()
                    .map(|&s| usize::from(s > 0.0))
                    .collect()
            } else {
                argmax_rows(logits)
            };
            accuracy(&pred, labels)
        }
        Metric::RocAuc => {
            let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            if head.kind == HeadKind::EdgePred {
                roc_auc(logits.data(), &pos)
            } else if logits.cols() == 2 {
                let margin: Vec<f64> = (0..logits.rows())
                    .map(|r| logits.get(r, 1) - logits.get(r, 0))
                    .collect();
                roc_auc(&margin, &pos)
            } else {
                macro_auc(&softmax_rows(logits), labels)
            }
        }
    }
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TuneMode,
    pub seed: u64,
    pub metric: Metric,
    pub tunable_params: usize,
    pub epochs_run: usize,
    /// Epochs trained when the best validation score was first reached.
    pub epochs_to_converge: usize,
    pub steps_to_converge: usize,
    pub steps: usize,
    /// Optimizer-step wall clock up to the convergence epoch.
    pub seconds: f64,
    pub epoch_loss: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub init_metrics: SplitMetrics,
    /// Metrics at the best validation epoch.
    pub metrics: SplitMetrics,
    /// Test confusion counts `[true][pred]` for classification heads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<usize>>>,
}

struct Eval {
    metrics: SplitMetrics,
    confusion: Option<Vec<Vec<usize>>>,
}

fn evaluate(model: &SideTuneModel, batches: &[TuneBatch; 3], metric: Metric) -> Result<Eval> {
    let mut vals = [0.0; 3];
    let mut conf = None;
    for (i, b) in batches.iter().enumerate() {
        let logits = model.predict(b)?;
        vals[i] = score(metric, &model.head, &logits, &b.labels)?;
        if i == 2 && model.head.kind != HeadKind::EdgePred {
            conf = Some(confusion(
                &argmax_rows(&logits),
                &b.labels,
                model.head.num_classes,
            )?);
        }
    }
    Ok(Eval {
        metrics: SplitMetrics {
            train: vals[0],
            val: vals[1],
            test: vals[2],
        },
        confusion: conf,
    })
}

/// Evaluates a model on the three splits without training.
pub fn evaluate_model(
    model: &SideTuneModel,
    data: &TaskData,
    metric: Metric,
) -> Result<SplitMetrics> {
    let batches = [
        data.split_batch(0, &model.backbone)?,
        data.split_batch(1, &model.backbone)?,
        data.split_batch(2, &model.backbone)?,
    ];
    Ok(evaluate(model, &batches, metric)?.metrics)
}

/// Trains the model's trainable set with early stopping on the validation metric, leaving
/// the best-validation parameters in place.
pub fn tune(
    model: &mut SideTuneModel,
    data: &TaskData,
    metric: Metric,
    cfg: &SideTuneConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.mode != model.mode {
        return Err(Error::Config(format!(
            "config mode {} does not match model mode {}",
            cfg.mode, model.mode
        )));
    }
    if !data.accepts_head(model.head.kind) {
        return Err(Error::Config(format!(
            "head {:?} does not fit this downstream task",
            model.head.kind
        )));
    }
    if data.raw_feature_dim() != model.adapter.src_dim {
        return Err(Error::Config(format!(
            "data feature dim {} != adapter src_dim {}",
            data.raw_feature_dim(),
            model.adapter.src_dim
        )));
    }
    let frozen_before = model.frozen_fingerprint();
    let bb = model.backbone.clone();
    let eval_batches = [
        data.split_batch(0, &bb)?,
        data.split_batch(1, &bb)?,
        data.split_batch(2, &bb)?,
    ];
    let init = evaluate(model, &eval_batches, metric)?;

    let mut opt = Adam::new(cfg.lr);
    let mut opt_base = Adam::new(cfg.lr);
    let mut best_val = init.metrics.val;
    let mut best_epoch = 0;
    let mut best_metrics = init.metrics;
    let mut best_conf = init.confusion;
    let mut best_state = (model.base.clone(), model.trainable.clone());
    let mut best_steps = 0;
    let mut best_seconds = 0.0;
    let mut elapsed = 0.0;
    let mut steps = 0;
    let mut epoch_loss = Vec::new();
    let mut val_curve = Vec::new();

    for epoch in 1..=cfg.epochs {
        let batches =
            data.train_batches(&bb, cfg.batch_size, derive(cfg.seed, &[7, epoch as u64]))?;
        let t0 = Instant::now();
        let mut total = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let loss = model.loss(&mut tape, &vars, batch)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {steps} (epoch {epoch})"
                )));
            }
            total += lv;
            let mut grads = tape.backward(loss)?;
            let g = collect_grads(&vars.trainable, &mut grads);
            opt.step(&mut model.trainable, &g)?;
            if model.base_trainable() {
                let gb = collect_grads(&vars.base, &mut grads);
                opt_base.step(&mut model.base, &gb)?;
            }
            steps += 1;
        }
        elapsed += t0.elapsed().as_secs_f64();
        epoch_loss.push(total / batches.len() as f64);

        let ev = evaluate(model, &eval_batches, metric)?;
        val_curve.push(ev.metrics.val);
        if ev.metrics.val > best_val {
            best_val = ev.metrics.val;
            best_epoch = epoch;
            best_metrics = ev.metrics;
            best_conf = ev.confusion;
            best_state = (model.base.clone(), model.trainable.clone());
            best_steps = steps;
            best_seconds = elapsed;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    if model.frozen_fingerprint() != frozen_before {
        return Err(Error::Contract(
            "frozen parameters changed during tuning".into(),
        ));
    }
    (model.base, model.trainable) = best_state;
    Ok(TrainReport {
        mode: model.mode,
        seed: cfg.seed,
        metric,
        tunable_params: model.count_tunables(),
        epochs_run: epoch_loss.len(),
        epochs_to_converge: best_epoch,
        steps_to_converge: best_steps,
        steps,
        seconds: best_seconds,
        epoch_loss,
        val_curve,
        init_metrics: init.metrics,
        metrics: best_metrics,
        confusion: best_conf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;
    use crate::bridges::AdapterKind;

    fn model(mode: TuneMode, kind: BackboneKind, layers: usize) -> SideTuneModel {
        let bb = BackboneConfig::new(kind, layers, 8, 100);
        let pre = bb.init(1);
        let adapter = AdapterSpec::new(AdapterKind::Identity, 8, 8, 0).unwrap();
        SideTuneModel::new(
            &bb,
            Some(&pre),
            adapter,
            HeadKind::NodeCls,
            3,
            &SideTuneConfig::new(mode),
        )
        .unwrap()
    }

    #[test]
    fn blend_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![2.0]));
        let b = t.constant(Tensor::vector(vec![0.0]));
        let r = t.constant(Tensor::scalar(0.0));
        let out = blend(&mut t, r, a, b).unwrap();
        assert_eq!(t.value(out).data(), &[1.0]);
        let hi = t.constant(Tensor::scalar(40.0));
        let out = blend(&mut t, hi, a, b).unwrap();
        assert!((t.value(out).data()[0] - 2.0).abs() < 1e-12);
        let lo = t.constant(Tensor::scalar(-40.0));
        let out = blend(&mut t, lo, a, b).unwrap();
        assert!(t.value(out).data()[0].abs() < 1e-12);
    }

    #[test]
    fn base_merge_midpoint_and_mismatch() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::vector(vec![2.0]));
        let b = t.constant(Tensor::vector(vec![4.0]));
        let r = t.constant(Tensor::scalar(0.0));
        let m = base_merge(&mut t, &[p], &[b], &[r]).unwrap();
        assert_eq!(t.value(m[0]).data(), &[3.0]);
        assert!(base_merge(&mut t, &[p, p], &[b], &[r]).is_err());
    }

    #[test]
    fn tunable_counts_match_closed_form() {
        let cases = [
            (TuneMode::Gsst, 3701),
            (TuneMode::Gmst, 3703),
            (TuneMode::Ft, 11_303),
        ];
        for (mode, want) in cases {
            let m = model(mode, BackboneKind::Gcn, 2);
            assert_eq!(m.count_tunables(), want, "{mode}");
            let bb = &m.backbone;
            assert_eq!(
                closed_form_tunables(mode, bb, 16, HeadKind::NodeCls, 3).unwrap(),
                want
            );
        }
        for mode in TuneMode::ALL {
            for kind in BackboneKind::ALL {
                let m = model(mode, kind, 3);
                let cf = closed_form_tunables(mode, &m.backbone, 16, HeadKind::NodeCls, 3).unwrap();
                assert_eq!(m.count_tunables(), cf, "{mode} {kind}");
            }
        }
    }

    #[test]
    fn missing_checkpoint_rejected() {
        let bb = BackboneConfig::new(BackboneKind::Gcn, 2, 8, 100);
        let adapter = AdapterSpec::new(AdapterKind::Identity, 8, 8, 0).unwrap();
        let cfg = SideTuneConfig::new(TuneMode::Gsst);
        assert!(matches!(
            SideTuneModel::new(&bb, None, adapter.clone(), HeadKind::NodeCls, 3, &cfg),
            Err(Error::Config(_))
        ));
        let cfg = SideTuneConfig::new(TuneMode::Scratch);
        assert!(SideTuneModel::new(&bb, None, adapter, HeadKind::NodeCls, 3, &cfg).is_ok());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TuneMode::ALL {
            assert_eq!(m.as_str().parse::<TuneMode>().unwrap(), m);
        }
    }
}
