use graphbridge::backbone::{BackboneConfig, BackboneKind};
use graphbridge::bridges::{AdapterKind, HeadKind};
use graphbridge::checkpoint::save_ckpt;
use graphbridge::container::save_container;
use graphbridge::harness::{
    audit_params, default_suite, mask_timing, run_scenario, run_scenario_with, speedup, Scenario,
    ScenarioConfig,
};
use graphbridge::metrics::mean_std;
use graphbridge::sidetune::TuneMode;
use graphbridge::synth::{sbm, SbmParams};
use graphbridge::{Checkpoint, Error, GraphSet};

fn small_sbm() -> GraphSet {
    sbm(
        &SbmParams {
            block_sizes: vec![25; 3],
            p_in: 0.15,
            feature_dim: 50,
            words_per_node: 8,
            ..SbmParams::default()
        },
        7,
    )
    .unwrap()
}

fn node_cfg(mode: TuneMode) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(Scenario::Node2node, mode);
    cfg.seeds = vec![0, 1];
    cfg.epochs = 40;
    cfg.adapter = AdapterKind::Identity;
    cfg
}

#[test]
fn scratch_node2node_beats_chance() {
    let set = small_sbm();
    let mut cfg = node_cfg(TuneMode::Scratch);
    cfg.seeds = vec![0];
    cfg.scratch_backbone = Some(BackboneConfig::new(BackboneKind::Gcn, 2, 50, 32));
    let r = run_scenario_with(&cfg, None, &set, true).unwrap();
    assert!(r.aggregate.mean > 1.0 / 3.0, "{}", r.aggregate.mean);
}

#[test]
fn masked_reports_repeat_byte_for_byte() {
    let set = small_sbm();
    let ckpt = Checkpoint::init(BackboneConfig::new(BackboneKind::Gin, 2, 50, 16), 3).unwrap();
    let cfg = node_cfg(TuneMode::Gsst);
    let masked = || {
        let r = run_scenario_with(&cfg, Some(&ckpt), &set, true).unwrap();
        let mut v = serde_json::to_value(&r).unwrap();
        mask_timing(&mut v);
        graphbridge::container::to_canonical_json(&v).unwrap()
    };
    assert_eq!(masked(), masked());
}

#[test]
fn edge_scenario_rejects_a_graph_head() {
    let mut cfg = ScenarioConfig::new(Scenario::Graph2edge, TuneMode::Gsst);
    cfg.head = HeadKind::GraphCls;
    let err = run_scenario_with(&cfg, None, &small_sbm(), true).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn side_modes_need_a_checkpoint() {
    let err = run_scenario_with(&node_cfg(TuneMode::Gmst), None, &small_sbm(), true).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn aggregate_recomputes_from_runs() {
    let set = small_sbm();
    let ckpt = Checkpoint::init(BackboneConfig::new(BackboneKind::Gcn, 2, 50, 16), 3).unwrap();
    let mut cfg = node_cfg(TuneMode::Gmst);
    cfg.seeds = vec![0, 1, 2];
    let r = run_scenario_with(&cfg, Some(&ckpt), &set, true).unwrap();
    let tests: Vec<f64> = r.runs.iter().map(|x| x.metrics.test).collect();
    let (m, s) = mean_std(&tests);
    assert!((r.aggregate.mean - m).abs() < 1e-12 && (r.aggregate.std - s).abs() < 1e-12);
    assert_eq!(r.aggregate.n, 3);
    assert_eq!(r.to_csv().lines().count(), 4);
}

#[test]
fn speedup_needs_matching_seeds() {
    let set = small_sbm();
    let ckpt = Checkpoint::init(BackboneConfig::new(BackboneKind::Gcn, 2, 50, 16), 3).unwrap();
    let a = run_scenario_with(&node_cfg(TuneMode::Gsst), Some(&ckpt), &set, true).unwrap();
    let mut cfg = node_cfg(TuneMode::Ft);
    cfg.seeds = vec![5];
    let b = run_scenario_with(&cfg, Some(&ckpt), &set, true).unwrap();
    assert!(matches!(speedup(&a, &b), Err(Error::Config(_))));
}

#[test]
fn scenario_loads_its_inputs_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = (dir.path().join("d.json"), dir.path().join("c.json"));
    save_container(&small_sbm(), &data).unwrap();
    save_ckpt(
        &Checkpoint::init(BackboneConfig::new(BackboneKind::Gcn, 2, 50, 16), 1).unwrap(),
        &ck,
    )
    .unwrap();
    let mut cfg = node_cfg(TuneMode::Gbst);
    cfg.seeds = vec![0];
    cfg.data = Some(data.display().to_string());
    cfg.checkpoint = Some(ck.display().to_string());
    let r = run_scenario(&cfg, true).unwrap();
    assert_eq!(r.runs.len(), 1);
    assert_eq!(
        r.backbone,
        BackboneConfig::new(BackboneKind::Gcn, 2, 50, 16)
    );
}

#[test]
fn gin_fine_tuning_dwarfs_gsst() {
    let five: Vec<_> = default_suite()
        .into_iter()
        .filter(|s| s.layers == 5)
        .collect();
    let rows = audit_params(&five, &[TuneMode::Gsst], &[BackboneKind::Gin], 16).unwrap();
    assert!(!rows.is_empty());
    for r in rows {
        assert!(
            r.ft >= 5 * r.tunable,
            "{} ft {} gsst {}",
            r.scenario,
            r.ft,
            r.tunable
        );
    }
}
