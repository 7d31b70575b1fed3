use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use graphbridge::backbone::{BackboneConfig, BackboneKind};
use graphbridge::bridges::{AdapterKind, AdapterSpec, HeadKind};
use graphbridge::harness::random_graph;
use graphbridge::metrics::roc_auc;
use graphbridge::pretrain::ntxent_value;
use graphbridge::rng::seeded;
use graphbridge::sidetune::{SideTuneConfig, SideTuneModel, TuneBatch, TuneMode};
use graphbridge::{Tape, Tensor};
use rand::Rng;

fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (random_tensor(n, n, 1), random_tensor(n, n, 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let g = random_graph(300, 64, 0.02, 3).unwrap();
    let rows: Vec<usize> = (0..300).collect();
    let mut group = c.benchmark_group("train_step");
    for kind in BackboneKind::ALL {
        let bb = BackboneConfig::new(kind, 3, 64, 64);
        let batch = TuneBatch::for_nodes(&g, &rows, &bb).unwrap();
        for mode in [TuneMode::Gsst, TuneMode::Gmst, TuneMode::Ft] {
            let cfg = SideTuneConfig::new(mode);
            let adapter = AdapterSpec::new(AdapterKind::Identity, 64, 64, 0).unwrap();
            let m = SideTuneModel::new(&bb, Some(&bb.init(1)), adapter, HeadKind::NodeCls, 3, &cfg)
                .unwrap();
            group.bench_function(format!("{kind}/{mode}"), |bench| {
                bench.iter(|| {
                    let mut tape = Tape::new();
                    let vars = m.bind(&mut tape, true);
                    let loss = m.loss(&mut tape, &vars, &batch).unwrap();
                    black_box(tape.backward(loss).unwrap());
                })
            });
        }
    }
    group.finish();
}

fn losses_and_metrics(c: &mut Criterion) {
    let (za, zb) = (random_tensor(64, 100, 4), random_tensor(64, 100, 5));
    c.bench_function("ntxent/64x100", |b| {
        b.iter(|| black_box(ntxent_value(&za, &zb, 0.5).unwrap()))
    });
    let mut rng = seeded(6);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.3)).collect();
    c.bench_function("roc_auc/10k", |b| {
        b.iter(|| black_box(roc_auc(&scores, &labels).unwrap()))
    });
}

criterion_group!(benches, matmul, train_step, losses_and_metrics);
criterion_main!(benches);
