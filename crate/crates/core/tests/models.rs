use std::collections::BTreeSet;

use graphbridge::backbone::{BackboneConfig, BackboneKind};
use graphbridge::bridges::{knn_graph, sample_edge_task, AdapterKind, AdapterSpec, HeadKind};
use graphbridge::harness::random_graph;
use graphbridge::rng::seeded;
use graphbridge::sidetune::{SideTuneConfig, SideTuneModel, TuneBatch, TuneMode};
use graphbridge::synth::{sbm, SbmParams};
use graphbridge::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

fn loss_at(model: &SideTuneModel, batch: &TuneBatch) -> f64 {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let l = model.loss(&mut tape, &vars, batch).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn saturated_side_gates_silence_the_side_network() {
    let g = random_graph(9, 4, 0.4, 5).unwrap();
    let bb = BackboneConfig::new(BackboneKind::Gcn, 3, 4, 6);
    let pre = bb.init(2);
    let cfg = SideTuneConfig {
        side_hidden: 5,
        ..SideTuneConfig::new(TuneMode::Gsst)
    };
    let adapter = AdapterSpec::new(AdapterKind::Identity, 4, 4, 0).unwrap();
    let mut m = SideTuneModel::new(&bb, Some(&pre), adapter, HeadKind::NodeCls, 3, &cfg).unwrap();
    for i in 0..3 {
        *m.trainable.get_mut(&format!("alpha_s{i}")).unwrap() = Tensor::scalar(40.0);
    }
    let rows: Vec<usize> = (0..9).collect();
    let batch = TuneBatch::for_nodes(&g, &rows, &bb).unwrap();
    let h = 1e-4;
    let names: Vec<String> = m
        .trainable
        .iter()
        .map(|(k, _)| k.clone())
        .filter(|k| k.starts_with("side."))
        .collect();
    assert_eq!(names.len(), 6);
    let mut worst = 0.0f64;
    for name in names {
        let n = m.trainable.get(&name).unwrap().numel();
        for j in 0..n {
            let orig = m.trainable.get(&name).unwrap().data()[j];
            m.trainable.get_mut(&name).unwrap().data_mut()[j] = orig + h;
            let lp = loss_at(&m, &batch);
            m.trainable.get_mut(&name).unwrap().data_mut()[j] = orig - h;
            let lm = loss_at(&m, &batch);
            m.trainable.get_mut(&name).unwrap().data_mut()[j] = orig;
            worst = worst.max(((lp - lm) / (2.0 * h)).abs());
        }
    }
    assert!(worst < 1e-10, "side gradient {worst:e}");
}

fn canonical(pairs: impl IntoIterator<Item = (usize, usize)>) -> BTreeSet<(usize, usize)> {
    pairs
        .into_iter()
        .map(|(a, b)| (a.min(b), a.max(b)))
        .filter(|(a, b)| a != b)
        .collect()
}

#[test]
fn knn_graph_is_isomorphic_under_point_reordering() {
    let mut rng = seeded(8);
    let n = 30;
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut moved = vec![Vec::new(); n];
    for (old, &new) in perm.iter().enumerate() {
        moved[new] = pts[old].clone();
    }
    let a = knn_graph(&Tensor::from_rows(&pts), 4).unwrap();
    let b = knn_graph(&Tensor::from_rows(&moved), 4).unwrap();
    let mapped = canonical(a.adj.edges().iter().map(|&(s, d)| (perm[s], perm[d])));
    assert_eq!(mapped, canonical(b.adj.edges().iter().copied()));
}

#[test]
fn collinear_points_link_nearest_neighbours() {
    let pts = Tensor::from_rows(&[
        vec![0.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![3.0, 0.0, 0.0],
    ]);
    let g = knn_graph(&pts, 1).unwrap();
    assert_eq!(
        canonical(g.adj.edges().iter().copied()),
        BTreeSet::from([(0, 1), (1, 2)])
    );
}

#[test]
fn edge_holdout_is_balanced_and_disjoint() {
    let set = sbm(
        &SbmParams {
            block_sizes: vec![30; 3],
            ..SbmParams::default()
        },
        6,
    )
    .unwrap();
    let g = &set.graphs[0];
    let task = sample_edge_task(g, 0.2, 4).unwrap();
    let pos = task.labels.iter().filter(|&&l| l == 1).count();
    assert_eq!(pos * 2, task.labels.len());
    let remaining = canonical(task.graph.adj.edges().iter().copied());
    let original = canonical(g.adj.edges().iter().copied());
    for (&p, &l) in task.pairs.iter().zip(&task.labels) {
        let p = (p.0.min(p.1), p.0.max(p.1));
        assert!(!remaining.contains(&p));
        assert_eq!(original.contains(&p), l == 1);
    }
    assert_eq!(remaining.len() + pos, original.len());
}

#[test]
fn gsst_counts_do_not_depend_on_the_backbone() {
    let counts: Vec<usize> = BackboneKind::ALL
        .into_iter()
        .map(|kind| {
            let bb = BackboneConfig::new(kind, 5, 30, 20);
            let cfg = SideTuneConfig::new(TuneMode::Gsst);
            let adapter = AdapterSpec::new(AdapterKind::Identity, 30, 30, 0).unwrap();
            SideTuneModel::new(&bb, Some(&bb.init(0)), adapter, HeadKind::GraphCls, 2, &cfg)
                .unwrap()
                .count_tunables()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}
