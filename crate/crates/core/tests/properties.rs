use std::sync::Arc;

use graphbridge::backbone::{backbone_forward, BackboneConfig, BackboneKind, Propagation};
use graphbridge::bridges::{input_adapt, knn_neighbors, AdapterKind, AdapterSpec};
use graphbridge::container::{container_from_str, container_to_string};
use graphbridge::gradcheck::grad_check;
use graphbridge::graph::make_splits;
use graphbridge::metrics::roc_auc;
use graphbridge::pretrain::{augment, ntxent_value, perturb_weights, AugmentKind, AugmentSpec};
use graphbridge::tape::{segment_softmax, Axis};
use graphbridge::{Graph, GraphSet, Tape, TaskKind, Tensor, Var};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |mut v| {
        // keep clear of the relu kink so central differences stay smooth
        for x in &mut v {
            if x.abs() < 0.05 {
                *x = 0.1;
            }
        }
        Tensor::new(vec![rows, cols], v).unwrap()
    })
}

fn undirected_graph(max_n: usize, d: usize) -> impl Strategy<Value = Graph> {
    (2..=max_n).prop_flat_map(move |n| {
        let pairs = prop::collection::vec((0..n, 0..n), 0..=2 * n);
        (tensor(n, d), pairs).prop_map(move |(x, pairs)| {
            let pairs: Vec<(usize, usize)> = pairs.into_iter().filter(|(a, b)| a != b).collect();
            Graph::undirected(x, &pairs).unwrap()
        })
    })
}

/// Weighted sum of an op output so every entry carries a distinct gradient.
fn probe(tape: &mut Tape, y: Var) -> graphbridge::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * (i % 7) as f64).collect()).unwrap();
    let w = tape.constant(w);
    let m = tape.mul(y, w)?;
    tape.sum_all(m)
}

fn passes(
    params: Vec<(String, Tensor)>,
    f: impl Fn(&mut Tape, &[Var]) -> graphbridge::Result<Var>,
) -> Result<(), TestCaseError> {
    let report = grad_check(
        |t, v| {
            let y = f(t, v)?;
            probe(t, y)
        },
        &params,
        1e-5,
    )
    .unwrap();
    prop_assert!(report.passed(), "worst {:?}", report.params);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dense_primitives_match_finite_differences(a in tensor(3, 4), b in tensor(4, 2), c in tensor(3, 4)) {
        let ps = |v: &[(&str, &Tensor)]| v.iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect::<Vec<_>>();
        passes(ps(&[("a", &a), ("b", &b)]), |t, v| t.matmul(v[0], v[1]))?;
        passes(ps(&[("a", &a)]), |t, v| t.transpose(v[0]))?;
        passes(ps(&[("a", &a), ("c", &c)]), |t, v| t.add(v[0], v[1]))?;
        passes(ps(&[("a", &a), ("c", &c)]), |t, v| t.mul(v[0], v[1]))?;
        passes(ps(&[("a", &a)]), |t, v| t.scale(v[0], -1.7))?;
        passes(ps(&[("a", &a)]), |t, v| t.relu(v[0]))?;
        passes(ps(&[("a", &a)]), |t, v| t.sigmoid(v[0]))?;
        passes(ps(&[("a", &a)]), |t, v| t.leaky_relu(v[0], 0.2))?;
        passes(ps(&[("a", &a), ("c", &c)]), |t, v| t.concat(&[v[0], v[1]], Axis::Rows))?;
        passes(ps(&[("a", &a), ("c", &c)]), |t, v| t.concat(&[v[0], v[1]], Axis::Cols))?;
        passes(ps(&[("a", &a)]), |t, v| t.row_select(v[0], Arc::new(vec![2, 0, 2])))?;
        passes(ps(&[("a", &a)]), |t, v| t.mean_rows(v[0]))?;
        passes(ps(&[("a", &a)]), |t, v| t.sum_rows(v[0]))?;
        passes(ps(&[("a", &a)]), |t, v| t.log_softmax(v[0]))?;
        passes(ps(&[("a", &a)]), |t, v| {
            let l = t.log_softmax(v[0])?;
            t.cross_entropy(l, Arc::new(vec![1, 3, 0]))
        })?;
        passes(ps(&[("a", &a)]), |t, v| t.l2_norm(v[0]))?;
        passes(ps(&[("a", &a)]), |t, v| t.reshape(v[0], vec![2, 6]))?;
        passes(ps(&[("a", &a), ("b", &b)]), |t, v| t.linear(v[0], v[1], None))?;
    }

    #[test]
    fn graph_primitives_match_finite_differences(g in undirected_graph(7, 3), seed in 0u64..1000) {
        let n = g.num_nodes();
        let adj = Arc::new(g.adj.with_self_loops());
        let e = adj.num_edges();
        let w = Tensor::new(vec![e, 1], (0..e).map(|i| ((i as u64 * 31 + seed) % 11) as f64 / 10.0 - 0.5).collect()).unwrap();
        let dst: Arc<Vec<usize>> = Arc::new(adj.edges().iter().map(|&(_, d)| d).collect());
        let x = g.features.clone();
        let segs: Arc<Vec<usize>> = Arc::new((0..n).map(|i| i % 2).collect());
        passes(vec![("x".into(), x.clone())], |t, v| t.spmm(adj.clone(), v[0]))?;
        passes(vec![("x".into(), x.clone()), ("w".into(), w.clone())], |t, v| t.spmm_weighted(adj.clone(), v[0], v[1]))?;
        passes(vec![("w".into(), w.clone())], |t, v| t.segment_softmax(v[0], dst.clone()))?;
        passes(vec![("x".into(), x)], |t, v| t.segment_mean(v[0], segs.clone(), 2))?;
    }

    #[test]
    fn segment_softmax_sums_to_one(
        logits in prop::collection::vec(-50.0f64..50.0, 1..40),
        nseg in 1usize..6,
        salt in 0usize..100,
    ) {
        let segs: Vec<usize> = (0..logits.len()).map(|i| (i * 7 + salt) % nseg).collect();
        let p = segment_softmax(&logits, &segs).unwrap();
        for s in 0..nseg {
            let members: Vec<f64> = p.iter().zip(&segs).filter(|(_, &g)| g == s).map(|(v, _)| *v).collect();
            if !members.is_empty() {
                let total: f64 = members.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12, "segment {s} sums to {total}");
                prop_assert!(members.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn container_round_trip(g in undirected_graph(10, 3), labels in prop::collection::vec(0usize..3, 10), seed in 0u64..50) {
        let mut g = g;
        let n = g.num_nodes();
        g.node_labels = Some(labels[..n].to_vec());
        let set = GraphSet { kind: TaskKind::NodeTask, graphs: vec![g], num_classes: 3, feature_dim: 3, splits: None };
        let set = if n >= 5 { make_splits(&set, [0.6, 0.2, 0.2], seed).unwrap() } else { set };
        let text = container_to_string(&set).unwrap();
        let back = container_from_str(&text).unwrap();
        prop_assert_eq!(container_to_string(&back).unwrap(), text);
        prop_assert_eq!(back.graphs[0].features.to_bits(), set.graphs[0].features.to_bits());
        prop_assert_eq!(back.splits, set.splits);
    }

    #[test]
    fn ntxent_is_non_negative(za in tensor(4, 3), zb in tensor(4, 3), tau in 0.05f64..2.0) {
        let l = ntxent_value(&za, &zb, tau).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0, "loss {l}");
    }

    #[test]
    fn perturbation_preserves_shapes(eta in 0.0f64..3.0, seed in any::<u64>()) {
        let cfg = BackboneConfig::new(BackboneKind::Gin, 2, 4, 5);
        let ps = cfg.init(seed ^ 1);
        let out = perturb_weights(&ps, eta, seed).unwrap();
        let shapes = |p: &graphbridge::ParamSet| p.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect::<Vec<_>>();
        prop_assert_eq!(shapes(&out), shapes(&ps));
        prop_assert!(out.iter().all(|(_, v)| v.all_finite()));
    }

    #[test]
    fn pad_truncate_is_injective_when_widening(x in tensor(3, 4), y in tensor(3, 4), extra in 0usize..4) {
        let spec = AdapterSpec::new(AdapterKind::PadTruncate, 4, 4 + extra, 0).unwrap();
        let (ax, ay) = (input_adapt(&x, &spec).unwrap(), input_adapt(&y, &spec).unwrap());
        prop_assert_eq!(ax == ay, x == y);
        for r in 0..3 {
            prop_assert_eq!(&ax.row(r)[..4], x.row(r));
            prop_assert!(ax.row(r)[4..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn knn_gives_exactly_k_out_neighbours(pts in tensor(12, 3), k in 1usize..6) {
        let nbrs = knn_neighbors(&pts, k).unwrap();
        for (i, ns) in nbrs.iter().enumerate() {
            prop_assert_eq!(ns.len(), k);
            prop_assert!(!ns.contains(&i));
        }
    }

    #[test]
    fn auc_complement(scores in prop::collection::vec(0u8..6, 2..30), labels in prop::collection::vec(any::<bool>(), 30)) {
        let n = scores.len();
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let l = &labels[..n];
        prop_assume!(l.iter().any(|&b| b) && l.iter().any(|&b| !b));
        let flipped: Vec<bool> = l.iter().map(|b| !b).collect();
        let a = roc_auc(&s, l).unwrap();
        let b = roc_auc(&s, &flipped).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backbones_are_permutation_equivariant(g in undirected_graph(9, 3), kind in 0usize..3, seed in any::<u64>()) {
        let n = g.num_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left((seed % n as u64) as usize);
        perm.swap(0, n - 1);
        let pg = g.permute(&perm).unwrap();
        let mut cfg = BackboneConfig::new(BackboneKind::ALL[kind], 2, 3, 4);
        cfg.gat_heads = 2;
        let params = cfg.init(seed);
        let run = |g: &Graph| {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, false);
            let x = tape.constant(g.features.clone());
            let prop = Propagation::new(cfg.kind, &g.adj);
            let out = backbone_forward(&mut tape, &cfg, &b, &prop, x, false).unwrap();
            tape.value(out.last).clone()
        };
        let (a, b) = (run(&g), run(&pg));
        for (old, &new) in perm.iter().enumerate() {
            for (u, v) in a.row(old).iter().zip(b.row(new)) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn augment_outputs_are_valid_graphs(g in undirected_graph(10, 2), kind in 0usize..4, ratio in 0.0f64..0.9, seed in any::<u64>()) {
        let spec = AugmentSpec::new(AugmentKind::ALL[kind], ratio, seed).unwrap();
        match augment(&g, &spec) {
            Ok(out) => {
                let n = out.num_nodes();
                prop_assert!(n >= 1 && n <= g.num_nodes());
                prop_assert_eq!(out.feature_dim(), g.feature_dim());
                prop_assert!(out.adj.edges().iter().all(|&(s, d)| s < n && d < n && s != d));
                prop_assert!(out.adj.is_symmetric());
                prop_assert!(out.features.all_finite());
                if AugmentKind::ALL[kind] == AugmentKind::EdgePerturb {
                    prop_assert_eq!(n, g.num_nodes());
                }
                prop_assert_eq!(augment(&g, &spec).unwrap(), out);
            }
            Err(graphbridge::Error::Data(_)) => prop_assert!(ratio > 0.0),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}
