//! Scenario wiring, seed sweeps, parameter audits, speed-up and report assembly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::bridges::{sample_edge_task, AdapterKind, AdapterSpec, HeadKind};
use crate::checkpoint::{load_ckpt, Checkpoint};
use crate::container::load_container;
use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::graph::{Graph, GraphSet, TaskKind};
use crate::metrics::mean_std;
use crate::pretrain::{pretrain, PretrainConfig};
use crate::rng::{derive, seeded};
use crate::sidetune::{
    closed_form_tunables, tune, Metric, SideTuneConfig, SideTuneModel, TaskData, TrainReport,
    TuneBatch, TuneMode,
};
use crate::synth::{mol, ptcld, sbm, MolParams, PtcldParams, SbmParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Graph2graph,
    Node2node,
    Graph2node,
    Node2graph,
    Graph2edge,
    Graph2ptcld,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Graph2graph,
        Scenario::Node2node,
        Scenario::Graph2node,
        Scenario::Node2graph,
        Scenario::Graph2edge,
        Scenario::Graph2ptcld,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Graph2graph => "graph2graph",
            Scenario::Node2node => "node2node",
            Scenario::Graph2node => "graph2node",
            Scenario::Node2graph => "node2graph",
            Scenario::Graph2edge => "graph2edge",
            Scenario::Graph2ptcld => "graph2ptcld",
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            Scenario::Graph2graph | Scenario::Node2graph => HeadKind::GraphCls,
            Scenario::Node2node | Scenario::Graph2node => HeadKind::NodeCls,
            Scenario::Graph2edge => HeadKind::EdgePred,
            Scenario::Graph2ptcld => HeadKind::PtcldCls,
        }
    }

    /// ROC-AUC for molecular and link tasks, accuracy elsewhere.
    pub fn metric(self) -> Metric {
        match self {
            Scenario::Graph2graph | Scenario::Graph2edge => Metric::RocAuc,
            _ => Metric::Accuracy,
        }
    }

    /// Container kind the downstream data must have.
    pub fn downstream_kind(self) -> TaskKind {
        match self {
            Scenario::Graph2graph | Scenario::Node2graph => TaskKind::GraphTask,
            Scenario::Node2node | Scenario::Graph2node | Scenario::Graph2edge => TaskKind::NodeTask,
            Scenario::Graph2ptcld => TaskKind::PointcloudTask,
        }
    }

    pub fn default_adapter(self) -> AdapterKind {
        match self {
            Scenario::Graph2ptcld => AdapterKind::LinearTrainable,
            _ => AdapterKind::PadTruncate,
        }
    }

    /// Pre-trained on a graph-level corpus rather than a single large graph.
    pub fn graph_pretrained(self) -> bool {
        !matches!(self, Scenario::Node2node | Scenario::Node2graph)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub mode: TuneMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    pub adapter: AdapterKind,
    pub head: HeadKind,
    pub seeds: Vec<u64>,
    pub side_hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub alpha_init_raw: f64,
    pub split_seed: u64,
    pub edge_ratio: f64,
    /// Also evaluate a frozen base with a fresh head and no tuning.
    pub no_tune: bool,
    /// Also run scratch training on the same seeds and report the speed-up against it.
    pub compare_scratch: bool,
    /// Architecture for scratch runs without a checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scratch_backbone: Option<BackboneConfig>,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, mode: TuneMode) -> Self {
        let d = SideTuneConfig::default();
        Self {
            scenario,
            mode,
            checkpoint: None,
            data: None,
            adapter: scenario.default_adapter(),
            head: scenario.head(),
            seeds: vec![0, 1, 2, 3, 4],
            side_hidden: d.side_hidden,
            epochs: d.epochs,
            lr: d.lr,
            patience: d.patience,
            batch_size: d.batch_size,
            alpha_init_raw: d.alpha_init_raw,
            split_seed: 0,
            edge_ratio: 0.1,
            no_tune: false,
            compare_scratch: false,
            scratch_backbone: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head != self.scenario.head() {
            return Err(Error::Config(format!(
                "scenario {} needs a {:?} head, got {:?}",
                self.scenario,
                self.scenario.head(),
                self.head
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.edge_ratio > 0.0 && self.edge_ratio < 1.0) {
            return Err(Error::Config(format!(
                "edge_ratio {} outside (0,1)",
                self.edge_ratio
            )));
        }
        self.tune_config(0).validate()
    }

    pub fn tune_config(&self, seed: u64) -> SideTuneConfig {
        SideTuneConfig {
            mode: self.mode,
            side_hidden: self.side_hidden,
            alpha_init_raw: self.alpha_init_raw,
            lr: self.lr,
            epochs: self.epochs,
            seed,
            patience: self.patience,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self {
            mean,
            std,
            n: xs.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ScenarioConfig,
    pub backbone: BackboneConfig,
    pub metric: Metric,
    pub runs: Vec<TrainReport>,
    /// Test metric over seeds.
    pub aggregate: Aggregate,
    pub tunable_params: usize,
    pub ft_tunable_params: usize,
    pub tunable_fraction: f64,
    pub mean_epochs_to_converge: f64,
    pub mean_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_tune: Option<Aggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup_vs_scratch_pct: Option<f64>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        crate::container::to_canonical_json_pretty(self)
    }

    /// Per-seed table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,train,val,test,epochs_to_converge,seconds,tunable_params\n");
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.seed,
                r.metrics.train,
                r.metrics.val,
                r.metrics.test,
                r.epochs_to_converge,
                r.seconds,
                r.tunable_params
            ));
        }
        s
    }
}

/// Keys holding wall-clock measurements.
pub const TIMING_KEYS: [&str; 3] = ["seconds", "mean_seconds", "speedup_vs_scratch_pct"];

/// Nulls every timing field, recursively, so reports can be compared byte for byte.
pub fn mask_timing(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for (k, x) in m.iter_mut() {
                if TIMING_KEYS.contains(&k.as_str()) {
                    *x = Value::Null;
                } else {
                    mask_timing(x);
                }
            }
        }
        Value::Array(a) => a.iter_mut().for_each(mask_timing),
        _ => {}
    }
}

/// `(t_scratch - t_method) / t_scratch * 100`.
pub fn speedup_pct(t_method: f64, t_scratch: f64) -> Result<f64> {
    if !(t_scratch > 0.0) || !(t_method >= 0.0) {
        return Err(Error::Numerical(format!(
            "speed-up needs positive scratch time (method {t_method}, scratch {t_scratch})"
        )));
    }
    Ok((t_scratch - t_method) / t_scratch * 100.0)
}

/// Speed-up of a method report against a scratch report over the same seeds.
pub fn speedup(method: &Report, scratch: &Report) -> Result<f64> {
    let a: Vec<u64> = method.runs.iter().map(|r| r.seed).collect();
    let b: Vec<u64> = scratch.runs.iter().map(|r| r.seed).collect();
    if a != b {
        return Err(Error::Config(format!("seed sets differ: {a:?} vs {b:?}")));
    }
    speedup_pct(method.mean_seconds, scratch.mean_seconds)
}

fn task_data(cfg: &ScenarioConfig, data: &GraphSet) -> Result<TaskData> {
    if data.kind != cfg.scenario.downstream_kind() {
        return Err(Error::Config(format!(
            "scenario {} expects {} data, got {}",
            cfg.scenario,
            cfg.scenario.downstream_kind().as_str(),
            data.kind.as_str()
        )));
    }
    if cfg.scenario == Scenario::Graph2edge {
        let task = sample_edge_task(
            &data.graphs[0],
            cfg.edge_ratio,
            derive(cfg.split_seed, &[0xed]),
        )?;
        TaskData::from_edge_task(task, cfg.split_seed)
    } else {
        TaskData::from_set(data, cfg.split_seed)
    }
}

fn build_model(
    cfg: &ScenarioConfig,
    tc: &SideTuneConfig,
    backbone: &BackboneConfig,
    ckpt: Option<&Checkpoint>,
    data: &TaskData,
) -> Result<SideTuneModel> {
    let adapter = AdapterSpec::new(
        cfg.adapter,
        data.raw_feature_dim(),
        backbone.in_dim,
        derive(tc.seed, &[0xad]),
    )?;
    SideTuneModel::new(
        backbone,
        ckpt.map(|c| &c.params),
        adapter,
        cfg.head,
        data.num_classes(),
        tc,
    )
}

fn map_seeds<T: Send>(
    seeds: &[u64],
    deterministic: bool,
    f: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if deterministic {
        seeds.iter().map(|&s| f(s)).collect()
    } else {
        seeds.par_iter().map(|&s| f(s)).collect()
    }
}

/// Runs one scenario over every seed on in-memory inputs.
pub fn run_scenario_with(
    cfg: &ScenarioConfig,
    ckpt: Option<&Checkpoint>,
    data: &GraphSet,
    deterministic: bool,
) -> Result<Report> {
    cfg.validate()?;
    let backbone = match (ckpt, &cfg.scratch_backbone) {
        (Some(c), _) => c.config.clone(),
        (None, Some(b)) if cfg.mode == TuneMode::Scratch => b.clone(),
        _ => {
            return Err(Error::Config(format!(
                "mode {} needs a checkpoint (scratch needs a checkpoint or scratch_backbone)",
                cfg.mode
            )))
        }
    };
    let ckpt = if cfg.mode == TuneMode::Scratch {
        None
    } else {
        ckpt
    };
    let task = task_data(cfg, data)?;
    let metric = cfg.scenario.metric();

    let runs = map_seeds(&cfg.seeds, deterministic, |seed| {
        let tc = cfg.tune_config(seed);
        let mut model = build_model(cfg, &tc, &backbone, ckpt, &task)?;
        tune(&mut model, &task, metric, &tc)
    })?;

    let no_tune = if cfg.no_tune {
        let vals = map_seeds(&cfg.seeds, deterministic, |seed| {
            let mut tc = cfg.tune_config(seed);
            tc.epochs = 0;
            let mut model = build_model(cfg, &tc, &backbone, ckpt, &task)?;
            Ok(tune(&mut model, &task, metric, &tc)?.metrics.test)
        })?;
        Some(Aggregate::of(&vals))
    } else {
        None
    };

    let head_classes = task.num_classes();
    let tunable_params =
        closed_form_tunables(cfg.mode, &backbone, cfg.side_hidden, cfg.head, head_classes)?;
    let ft_tunable_params = closed_form_tunables(
        TuneMode::Ft,
        &backbone,
        cfg.side_hidden,
        cfg.head,
        head_classes,
    )?;
    let tests: Vec<f64> = runs.iter().map(|r| r.metrics.test).collect();
    let secs: Vec<f64> = runs.iter().map(|r| r.seconds).collect();
    let convs: Vec<f64> = runs.iter().map(|r| r.epochs_to_converge as f64).collect();
    let mut report = Report {
        config: cfg.clone(),
        backbone: backbone.clone(),
        metric,
        aggregate: Aggregate::of(&tests),
        tunable_params,
        ft_tunable_params,
        tunable_fraction: tunable_params as f64 / ft_tunable_params as f64,
        mean_epochs_to_converge: mean_std(&convs).0,
        mean_seconds: mean_std(&secs).0,
        runs,
        no_tune,
        speedup_vs_scratch_pct: None,
    };
    if cfg.compare_scratch && cfg.mode != TuneMode::Scratch {
        let mut sc = cfg.clone();
        sc.mode = TuneMode::Scratch;
        sc.no_tune = false;
        sc.compare_scratch = false;
        sc.scratch_backbone = Some(backbone);
        let scratch = run_scenario_with(&sc, None, data, deterministic)?;
        report.speedup_vs_scratch_pct = speedup(&report, &scratch).ok();
    }
    Ok(report)
}

/// Loads the checkpoint and container named in the config and runs the scenario.
pub fn run_scenario(cfg: &ScenarioConfig, deterministic: bool) -> Result<Report> {
    let data_path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("scenario config has no data path".into()))?;
    let data = load_container(Path::new(data_path))?;
    let ckpt = match &cfg.checkpoint {
        Some(p) => Some(load_ckpt(p)?),
        None => None,
    };
    run_scenario_with(cfg, ckpt.as_ref(), &data, deterministic)
}

/// Architecture of one default-suite scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub scenario: Scenario,
    pub layers: usize,
    pub in_dim: usize,
    pub num_classes: usize,
}

pub const MOL_FEATURE_DIM: usize = 300;
pub const SBM_FEATURE_DIM: usize = 500;
pub const GRAPH_LAYERS: usize = 5;
pub const NODE_LAYERS: usize = 2;

/// Graph-pretrained scenarios share one 5-layer molecule backbone; node-pretrained ones
/// use a 2-layer backbone on the citation-style graph.
pub fn default_suite() -> Vec<SuiteSpec> {
    Scenario::ALL
        .into_iter()
        .map(|scenario| {
            let (layers, in_dim) = if scenario.graph_pretrained() {
                (GRAPH_LAYERS, MOL_FEATURE_DIM)
            } else {
                (NODE_LAYERS, SBM_FEATURE_DIM)
            };
            let num_classes = match scenario.downstream_kind() {
                TaskKind::GraphTask => 2,
                _ if scenario == Scenario::Graph2edge => 2,
                _ => 3,
            };
            SuiteSpec {
                scenario,
                layers,
                in_dim,
                num_classes,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub scenario: Scenario,
    pub mode: TuneMode,
    pub backbone: BackboneKind,
    pub layers: usize,
    pub in_dim: usize,
    pub tunable: usize,
    pub ft: usize,
    pub fraction: f64,
}

/// Tunable counts for every `(spec, mode, backbone)` in the grid at hidden 100.
pub fn audit_params(
    specs: &[SuiteSpec],
    modes: &[TuneMode],
    backbones: &[BackboneKind],
    side_hidden: usize,
) -> Result<Vec<AuditRow>> {
    let mut rows = Vec::new();
    for spec in specs {
        for &kind in backbones {
            let bb = BackboneConfig::new(
                kind,
                spec.layers,
                spec.in_dim,
                crate::backbone::DEFAULT_HIDDEN,
            );
            let head = spec.scenario.head();
            let ft = closed_form_tunables(TuneMode::Ft, &bb, side_hidden, head, spec.num_classes)?;
            for &mode in modes {
                let tunable = closed_form_tunables(mode, &bb, side_hidden, head, spec.num_classes)?;
                rows.push(AuditRow {
                    scenario: spec.scenario,
                    mode,
                    backbone: kind,
                    layers: spec.layers,
                    in_dim: spec.in_dim,
                    tunable,
                    ft,
                    fraction: tunable as f64 / ft as f64,
                });
            }
        }
    }
    Ok(rows)
}

/// The full default audit: every suite scenario, all modes, all backbones.
pub fn default_audit() -> Result<Vec<AuditRow>> {
    audit_params(
        &default_suite(),
        &TuneMode::ALL,
        &BackboneKind::ALL,
        crate::sidetune::DEFAULT_SIDE_HIDDEN,
    )
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut s = String::from("scenario,mode,backbone,layers,in_dim,tunable,ft,fraction\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scenario, r.mode, r.backbone, r.layers, r.in_dim, r.tunable, r.ft, r.fraction
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub mode: TuneMode,
    pub backbone: BackboneKind,
    pub passed: bool,
    pub worst_param: String,
    pub worst_rel_err: f64,
}

/// Random undirected graph with `n` nodes, edge probability `p` and Gaussian-ish features.
pub fn random_graph(n: usize, feature_dim: usize, p: f64, seed: u64) -> Result<Graph> {
    let mut rng = seeded(seed);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                pairs.push((i, j));
            }
        }
    }
    let feats = (0..n * feature_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut g = Graph::undirected(Tensor::new(vec![n, feature_dim], feats)?, &pairs)?;
    g.node_labels = Some((0..n).map(|_| rng.random_range(0..3)).collect());
    Ok(g)
}

/// Finite-difference check of every trainable parameter through the full model, for each
/// mode x backbone on a random 10-node graph.
pub fn gradient_suite(seed: u64, tol: f64) -> Result<Vec<GradEntry>> {
    let (in_dim, hidden, side, classes) = (5, 6, 4, 3);
    let mut out = Vec::new();
    for (bi, kind) in BackboneKind::ALL.into_iter().enumerate() {
        for (mi, mode) in TuneMode::ALL.into_iter().enumerate() {
            let gs = derive(seed, &[bi as u64, mi as u64]);
            let g = random_graph(10, in_dim, 0.3, gs)?;
            let mut bb = BackboneConfig::new(kind, 2, in_dim, hidden);
            if kind == BackboneKind::Gat {
                bb.gat_heads = 2;
            }
            let pre = bb.init(derive(gs, &[1]));
            let tc = SideTuneConfig {
                mode,
                side_hidden: side,
                seed: derive(gs, &[2]),
                // off-centre fusion weights exercise both blend branches
                alpha_init_raw: 0.3,
                ..SideTuneConfig::default()
            };
            let adapter = AdapterSpec::new(AdapterKind::Identity, in_dim, in_dim, 0)?;
            let model =
                SideTuneModel::new(&bb, Some(&pre), adapter, HeadKind::NodeCls, classes, &tc)?;
            let rows: Vec<usize> = (0..g.num_nodes()).collect();
            let batch = TuneBatch::for_nodes(&g, &rows, &bb)?;
            let params = model.trainable_list();
            let report = grad_check(
                |tape, vars| {
                    let mv = model.vars_from_list(tape, &params, vars);
                    model.loss(tape, &mv, &batch)
                },
                &params,
                tol,
            )?;
            let worst = report
                .params
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
            out.push(GradEntry {
                mode,
                backbone: kind,
                passed: report.passed(),
                worst_param: worst.map(|w| w.name.clone()).unwrap_or_default(),
                worst_rel_err: report.worst(),
            });
        }
    }
    Ok(out)
}

/// Scale knobs for the synthetic suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteScale {
    pub mol_count: usize,
    pub block_size: usize,
    pub ptcld_count: usize,
    pub pretrain_epochs: usize,
    pub backbone: BackboneKind,
}

impl Default for SuiteScale {
    fn default() -> Self {
        Self {
            mol_count: 200,
            block_size: 100,
            ptcld_count: 90,
            pretrain_epochs: 20,
            backbone: BackboneKind::Gcn,
        }
    }
}

/// Generated datasets and pre-trained checkpoints for every scenario.
#[derive(Clone, Debug)]
pub struct SuiteInputs {
    pub mol_pretrain: GraphSet,
    pub mol_down: GraphSet,
    pub sbm: GraphSet,
    pub ptcld: GraphSet,
    pub mol_ckpt: Checkpoint,
    pub sbm_ckpt: Checkpoint,
}

impl SuiteInputs {
    pub fn build(scale: &SuiteScale, seed: u64) -> Result<Self> {
        let mp = MolParams {
            count: scale.mol_count,
            ..MolParams::default()
        };
        let mol_pretrain = mol(&mp, derive(seed, &[1]))?;
        let mol_down = mol(&mp, derive(seed, &[2]))?;
        let sbm = sbm(
            &SbmParams {
                block_sizes: vec![scale.block_size; 3],
                ..SbmParams::default()
            },
            derive(seed, &[3]),
        )?;
        let ptcld = ptcld(
            &PtcldParams {
                count: scale.ptcld_count,
                ..PtcldParams::default()
            },
            derive(seed, &[4]),
        )?;
        let pc = PretrainConfig {
            epochs: scale.pretrain_epochs,
            seed: derive(seed, &[5]),
            ..PretrainConfig::default()
        };
        let mol_bb = BackboneConfig::new(
            scale.backbone,
            GRAPH_LAYERS,
            MOL_FEATURE_DIM,
            crate::backbone::DEFAULT_HIDDEN,
        );
        let mol_ckpt = pretrain(&mol_pretrain, &mol_bb, &pc)?.checkpoint;
        let sbm_bb = BackboneConfig::new(
            scale.backbone,
            NODE_LAYERS,
            SBM_FEATURE_DIM,
            crate::backbone::DEFAULT_HIDDEN,
        );
        let sbm_ckpt = pretrain(&sbm, &sbm_bb, &pc)?.checkpoint;
        Ok(Self {
            mol_pretrain,
            mol_down,
            sbm,
            ptcld,
            mol_ckpt,
            sbm_ckpt,
        })
    }

    /// `(checkpoint, downstream data)` for a scenario.
    pub fn for_scenario(&self, s: Scenario) -> (&Checkpoint, &GraphSet) {
        let ckpt = if s.graph_pretrained() {
            &self.mol_ckpt
        } else {
            &self.sbm_ckpt
        };
        let data = match s {
            Scenario::Graph2graph | Scenario::Node2graph => &self.mol_down,
            Scenario::Node2node | Scenario::Graph2node | Scenario::Graph2edge => &self.sbm,
            Scenario::Graph2ptcld => &self.ptcld,
        };
        (ckpt, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario: Scenario,
    pub metric: Metric,
    pub gsst: Aggregate,
    pub gmst: Aggregate,
    /// `gmst.mean - gsst.mean`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scale: SuiteScale,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario,metric,gsst_mean,gsst_std,gmst_mean,gmst_std,delta\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.scenario,
                serde_json::to_value(r.metric)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                r.gsst.mean,
                r.gsst.std,
                r.gmst.mean,
                r.gmst.std,
                r.delta
            ));
        }
        s
    }
}

/// Seeded GSST-vs-GMST comparison on synthetic scenarios. No ordering is asserted.
pub fn compare_gsst_gmst(
    inputs: &SuiteInputs,
    scenarios: &[Scenario],
    seeds: &[u64],
    epochs: usize,
    scale: &SuiteScale,
    seed: u64,
    deterministic: bool,
) -> Result<ComparisonReport> {
    let mut rows = Vec::new();
    for &s in scenarios {
        let (ckpt, data) = inputs.for_scenario(s);
        let mut agg = Vec::new();
        for mode in [TuneMode::Gsst, TuneMode::Gmst] {
            let mut cfg = ScenarioConfig::new(s, mode);
            cfg.seeds = seeds.to_vec();
            cfg.epochs = epochs;
            agg.push(run_scenario_with(&cfg, Some(ckpt), data, deterministic)?.aggregate);
        }
        rows.push(ComparisonRow {
            scenario: s,
            metric: s.metric(),
            gsst: agg[0],
            gmst: agg[1],
            delta: agg[1].mean - agg[0].mean,
        });
    }
    Ok(ComparisonReport {
        scale: scale.clone(),
        seed,
        seeds: seeds.to_vec(),
        epochs,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speedup_arithmetic() {
        assert_eq!(speedup_pct(2.0, 2.0).unwrap(), 0.0);
        assert!((speedup_pct(0.6, 1.0).unwrap() - 40.0).abs() < 1e-12);
        assert!(speedup_pct(1.0, 0.0).is_err());
    }

    #[test]
    fn head_must_match_scenario() {
        let mut cfg = ScenarioConfig::new(Scenario::Graph2edge, TuneMode::Gsst);
        cfg.head = HeadKind::GraphCls;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn empty_audit_grid() {
        assert!(audit_params(&[], &TuneMode::ALL, &BackboneKind::ALL, 16)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn mask_nested_timing() {
        let mut v = serde_json::json!({"seconds": 1.5, "runs": [{"seconds": 2.0, "seed": 1}]});
        mask_timing(&mut v);
        assert_eq!(
            v,
            serde_json::json!({"seconds": null, "runs": [{"seconds": null, "seed": 1}]})
        );
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.as_str().parse::<Scenario>().unwrap(), s);
        }
    }
}
