use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use graphbridge::backbone::{BackboneConfig, BackboneKind, DEFAULT_HIDDEN};
use graphbridge::bridges::AdapterKind;
use graphbridge::checkpoint::{load_ckpt, save_ckpt};
use graphbridge::container::{
    convert_edgelist_files, load_container, save_container, to_canonical_json_pretty,
};
use graphbridge::harness::{
    audit_csv, audit_params, compare_gsst_gmst, default_suite, gradient_suite, run_scenario_with,
    speedup, Scenario, ScenarioConfig, SuiteInputs, SuiteScale,
};
use graphbridge::metrics::{accuracy, argmax_rows, confusion, macro_auc, roc_auc};
use graphbridge::pretrain::{loss_csv, pretrain, PretrainConfig, PretrainMethod};
use graphbridge::sidetune::{TuneMode, DEFAULT_SIDE_HIDDEN};
use graphbridge::synth::{synth, MolParams, PtcldParams, SbmParams, SynthSpec};
use graphbridge::{Error, TaskKind, Tensor};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "graphbridge",
    version,
    about = "Side-tuning of frozen pre-trained GNN backbones"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file or directory (depends on the subcommand).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seeds sequentially so reports are byte-reproducible.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic container (sbm, mol or ptcld).
    Synth(SynthArgs),
    /// Build a node-task container from edge/feature/label CSV files.
    Convert(ConvertArgs),
    /// Contrastive pre-training; writes a checkpoint and a loss CSV.
    Pretrain(PretrainArgs),
    /// Tune one or more modes on a downstream container; writes JSON and CSV reports.
    Tune(TuneArgs),
    /// Score a saved score matrix against labels.
    Eval(EvalArgs),
    /// Tunable-parameter audit over the default scenario suite.
    Params(ParamsArgs),
    /// Finite-difference check of every mode x backbone.
    Gradcheck(GradcheckArgs),
    /// Seeded synthetic GSST-vs-GMST comparison.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = ["sbm", "mol", "ptcld"])]
    kind: Option<String>,
    /// Full generator spec as JSON (overrides --kind and the size flags).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Graphs for mol/ptcld.
    #[arg(long)]
    count: Option<usize>,
    /// Nodes per block for sbm.
    #[arg(long)]
    block_size: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "node_task", value_parser = ["node_task", "edge_task"])]
    kind: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "graphcl")]
    method: PretrainMethod,
    #[arg(long, default_value = "gcn")]
    backbone: BackboneKind,
    #[arg(long, default_value_t = 5)]
    layers: usize,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    temperature: f64,
    /// SimGRACE perturbation magnitude.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Loss CSV path (default: next to the checkpoint).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pre-trained checkpoint (optional for scratch).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "gsst")]
    mode: Vec<TuneMode>,
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value_t = DEFAULT_SIDE_HIDDEN)]
    side_hidden: usize,
    /// Defaults to the scenario's adapter.
    #[arg(long)]
    adapter: Option<AdapterKind>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    alpha_init: f64,
    #[arg(long, default_value_t = 0.1)]
    edge_ratio: f64,
    /// Also report a frozen base with a fresh head and no tuning.
    #[arg(long)]
    no_tune: bool,
    /// Also train from scratch and report the speed-up.
    #[arg(long)]
    compare_scratch: bool,
    /// Scratch architecture when no checkpoint is given.
    #[arg(long, default_value = "gcn")]
    backbone: BackboneKind,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    /// `--seed` sets the split seed; run seeds come from `--seeds`.
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV of scores, one row per item.
    #[arg(long)]
    scores: PathBuf,
    /// One integer label per line.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_parser = ["accuracy", "roc_auc"])]
    metric: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, default_value_t = DEFAULT_SIDE_HIDDEN)]
    side_hidden: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "graph2graph,node2node,node2graph"
    )]
    scenarios: Vec<Scenario>,
    #[arg(long, default_value_t = 200)]
    mol_count: usize,
    #[arg(long, default_value_t = 100)]
    block_size: usize,
    #[arg(long, default_value_t = 20)]
    pretrain_epochs: usize,
    #[command(flatten)]
    common: Common,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `--out` when given, otherwise prints.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn require_out(c: &Common) -> Result<&Path> {
    match &c.out {
        Some(p) => Ok(p),
        None => Err(Error::Config("--out is required".into()).into()),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = match (&a.spec, a.kind.as_deref()) {
        (Some(p), _) => graphbridge::container::parse_json::<SynthSpec>(&fs::read_to_string(p)?)?,
        (None, Some("sbm")) => {
            let mut p = SbmParams::default();
            if let Some(b) = a.block_size {
                p.block_sizes = vec![b; p.block_sizes.len()];
            }
            SynthSpec::Sbm(p)
        }
        (None, Some("mol")) => SynthSpec::Mol(MolParams {
            count: a.count.unwrap_or(MolParams::default().count),
            ..MolParams::default()
        }),
        (None, Some("ptcld")) => SynthSpec::Ptcld(PtcldParams {
            count: a.count.unwrap_or(PtcldParams::default().count),
            ..PtcldParams::default()
        }),
        _ => return Err(Error::Config("give --kind or --spec".into()).into()),
    };
    let set = synth(&spec, a.common.seed)?;
    save_container(&set, require_out(&a.common)?)?;
    eprintln!(
        "{} items, {} classes, feature_dim {}",
        set.num_items(),
        set.num_classes,
        set.feature_dim
    );
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let kind = match a.kind.as_str() {
        "edge_task" => TaskKind::EdgeTask,
        _ => TaskKind::NodeTask,
    };
    let set = convert_edgelist_files(&a.edges, &a.features, &a.labels, kind)?;
    save_container(&set, require_out(&a.common)?)?;
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let out = require_out(&a.common)?;
    let data = load_container(&a.data)?;
    let bb = BackboneConfig::new(a.backbone, a.layers, data.feature_dim, a.hidden);
    let cfg = PretrainConfig {
        method: a.method,
        temperature: a.temperature,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        eta: a.eta,
        seed: a.common.seed,
        ..PretrainConfig::default()
    };
    let outcome = pretrain(&data, &bb, &cfg)?;
    save_ckpt(&outcome.checkpoint, out)?;
    let loss_path = a.loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
    write(&loss_path, &loss_csv(&outcome.losses))?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        eprintln!(
            "nt-xent {first:.4} -> {last:.4} over {} epochs",
            outcome.losses.len()
        );
    }
    Ok(())
}

fn cmd_tune(a: TuneArgs) -> Result<()> {
    let data = load_container(&a.data)?;
    let ckpt = a.ckpt.as_ref().map(load_ckpt).transpose()?;
    let mut reports = Vec::new();
    for &mode in &a.mode {
        let mut cfg = ScenarioConfig::new(a.scenario, mode);
        cfg.checkpoint = a.ckpt.as_ref().map(|p| p.display().to_string());
        cfg.data = Some(a.data.display().to_string());
        if let Some(ad) = a.adapter {
            cfg.adapter = ad;
        }
        cfg.seeds = a.seeds.clone();
        cfg.side_hidden = a.side_hidden;
        cfg.epochs = a.epochs;
        cfg.lr = a.lr;
        cfg.patience = a.patience;
        cfg.batch_size = a.batch_size;
        cfg.alpha_init_raw = a.alpha_init;
        cfg.split_seed = a.common.seed;
        cfg.edge_ratio = a.edge_ratio;
        cfg.no_tune = a.no_tune;
        cfg.compare_scratch = a.compare_scratch;
        if ckpt.is_none() {
            cfg.scratch_backbone = Some(BackboneConfig::new(
                a.backbone,
                a.layers,
                data.feature_dim,
                a.hidden,
            ));
        }
        let r = run_scenario_with(&cfg, ckpt.as_ref(), &data, a.common.deterministic)?;
        println!(
            "{} {}: test {:.4} +- {:.4} (n={}), tunable {} ({:.3} of ft), {:.1} epochs to converge",
            a.scenario,
            mode,
            r.aggregate.mean,
            r.aggregate.std,
            r.aggregate.n,
            r.tunable_params,
            r.tunable_fraction,
            r.mean_epochs_to_converge
        );
        if let Some(nt) = &r.no_tune {
            println!("  no-tune: {:.4} +- {:.4}", nt.mean, nt.std);
        }
        if let Some(s) = r.speedup_vs_scratch_pct {
            println!("  speed-up vs scratch: {s:.1}%");
        }
        reports.push(r);
    }
    if let Some(scratch) = reports.iter().find(|r| r.config.mode == TuneMode::Scratch) {
        for r in reports
            .iter()
            .filter(|r| r.config.mode != TuneMode::Scratch)
        {
            if let Ok(s) = speedup(r, scratch) {
                println!("{} speed-up vs scratch run: {s:.1}%", r.config.mode);
            }
        }
    }
    if let Some(dir) = &a.common.out {
        for r in &reports {
            let stem = dir.join(format!("{}_{}", a.scenario, r.config.mode));
            write(&stem.with_extension("json"), &r.to_json()?)?;
            write(&stem.with_extension("csv"), &r.to_csv())?;
        }
    }
    Ok(())
}

fn read_scores(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("scores line {}: bad number {f:?}", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::Data("scores must be a non-empty rectangular CSV".into()).into());
    }
    Ok(Tensor::from_rows(&rows))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Data(format!("labels line {}: bad label {l:?}", i + 1)).into())
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let scores = read_scores(&a.scores)?;
    let labels = read_labels(&a.labels)?;
    if scores.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{} score rows vs {} labels",
            scores.rows(),
            labels.len()
        ))
        .into());
    }
    let c = scores.cols();
    let out = match a.metric.as_str() {
        "accuracy" => {
            let pred: Vec<usize> = if c == 1 {
                scores
                    .data()
                    .iter()
                    .map(|&s| usize::from(s > 0.5))
                    .collect()
            } else {
                argmax_rows(&scores)
            };
            let classes = c.max(2).max(labels.iter().max().map_or(0, |m| m + 1));
            json!({
                "metric": "accuracy",
                "value": accuracy(&pred, &labels)?,
                "n": labels.len(),
                "confusion": confusion(&pred, &labels, classes)?,
            })
        }
        _ => {
            let value = match c {
                1 | 2 => {
                    let col = c - 1;
                    let s: Vec<f64> = (0..scores.rows()).map(|r| scores.get(r, col)).collect();
                    let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                    roc_auc(&s, &pos)?
                }
                _ => macro_auc(&scores, &labels)?,
            };
            json!({"metric": "roc_auc", "value": value, "n": labels.len()})
        }
    };
    emit(a.common.out.as_deref(), &to_canonical_json_pretty(&out)?)
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let rows = audit_params(
        &default_suite(),
        &TuneMode::ALL,
        &BackboneKind::ALL,
        a.side_hidden,
    )?;
    match &a.common.out {
        Some(dir) => {
            write(&dir.join("audit.json"), &to_canonical_json_pretty(&rows)?)?;
            write(&dir.join("audit.csv"), &audit_csv(&rows))?;
        }
        None => print!("{}", audit_csv(&rows)),
    }
    let worst = rows
        .iter()
        .filter(|r| r.mode.is_side() && r.mode.layerwise())
        .map(|r| r.fraction)
        .fold(0.0, f64::max);
    eprintln!("largest gsst/gmst fraction vs ft: {worst:.4}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let entries = gradient_suite(a.common.seed, a.tol)?;
    for e in &entries {
        println!(
            "{:<7} {:<3} {} worst {:.3e} ({})",
            e.mode.as_str(),
            e.backbone,
            if e.passed { "ok  " } else { "FAIL" },
            e.worst_rel_err,
            e.worst_param
        );
    }
    if let Some(p) = &a.common.out {
        write(p, &to_canonical_json_pretty(&entries)?)?;
    }
    let failed = entries.iter().filter(|e| !e.passed).count();
    if failed > 0 {
        return Err(
            Error::Numerical(format!("{failed} gradient checks failed at tol {}", a.tol)).into(),
        );
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let scale = SuiteScale {
        mol_count: a.mol_count,
        block_size: a.block_size,
        pretrain_epochs: a.pretrain_epochs,
        ..SuiteScale::default()
    };
    let inputs = SuiteInputs::build(&scale, a.common.seed)?;
    let report = compare_gsst_gmst(
        &inputs,
        &a.scenarios,
        &a.seeds,
        a.epochs,
        &scale,
        a.common.seed,
        a.common.deterministic,
    )?;
    print!("{}", report.to_csv());
    if let Some(dir) = &a.common.out {
        write(
            &dir.join("comparison.json"),
            &to_canonical_json_pretty(&report)?,
        )?;
        write(&dir.join("comparison.csv"), &report.to_csv())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Convert(a) => cmd_convert(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Tune(a) => cmd_tune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Params(a) => cmd_params(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Compare(a) => cmd_compare(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) {
        return e.exit_code() as u8;
    }
    if err
        .chain()
        .any(|c| c.downcast_ref::<std::io::Error>().is_some())
    {
        return 3;
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
