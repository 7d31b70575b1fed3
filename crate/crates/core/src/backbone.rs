//! GCN / GAT / GIN layer stacks with per-layer activation capture.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{apply_linear, glorot, init_linear, Bound, ParamSet};
use crate::rng::seeded;
use crate::tape::{Tape, Var};
use crate::tensor::{SparseAdj, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Gcn,
    Gat,
    Gin,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [BackboneKind::Gcn, BackboneKind::Gat, BackboneKind::Gin];
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Gcn => "gcn",
            BackboneKind::Gat => "gat",
            BackboneKind::Gin => "gin",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gcn" => BackboneKind::Gcn,
            "gat" => BackboneKind::Gat,
            "gin" => BackboneKind::Gin,
            o => return Err(Error::Config(format!("unknown backbone {o:?}"))),
        })
    }
}

pub const DEFAULT_HIDDEN: usize = 100;
pub const DEFAULT_GAT_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub layers: usize,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub gat_heads: usize,
    pub gat_slope: f64,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind, layers: usize, in_dim: usize, hidden_dim: usize) -> Self {
        Self {
            kind,
            layers,
            in_dim,
            hidden_dim,
            gat_heads: 1,
            gat_slope: DEFAULT_GAT_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.in_dim == 0 || self.hidden_dim == 0 || self.gat_heads == 0 {
            return Err(Error::Config(format!(
                "backbone layers/dims/heads must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    fn layer_in(&self, i: usize) -> usize {
        if i == 0 {
            self.in_dim
        } else {
            self.hidden_dim
        }
    }

    /// Expected shape of every named parameter.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let h = self.hidden_dim;
        let mut m = BTreeMap::new();
        for i in 0..self.layers {
            let fin = self.layer_in(i);
            match self.kind {
                BackboneKind::Gcn => {
                    m.insert(format!("layer{i}.weight"), vec![fin, h]);
                    m.insert(format!("layer{i}.bias"), vec![1, h]);
                }
                BackboneKind::Gat => {
                    for hd in 0..self.gat_heads {
                        m.insert(format!("layer{i}.head{hd}.weight"), vec![fin, h]);
                        m.insert(format!("layer{i}.head{hd}.att_src"), vec![h, 1]);
                        m.insert(format!("layer{i}.head{hd}.att_dst"), vec![h, 1]);
                    }
                    m.insert(format!("layer{i}.bias"), vec![1, h]);
                }
                BackboneKind::Gin => {
                    m.insert(format!("layer{i}.mlp0.weight"), vec![fin, 2 * h]);
                    m.insert(format!("layer{i}.mlp0.bias"), vec![1, 2 * h]);
                    m.insert(format!("layer{i}.mlp1.weight"), vec![2 * h, h]);
                    m.insert(format!("layer{i}.mlp1.bias"), vec![1, h]);
                }
            }
        }
        m
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        (0..self.layers)
            .map(|i| {
                let fin = self.layer_in(i);
                match self.kind {
                    BackboneKind::Gcn => fin * h + h,
                    BackboneKind::Gat => self.gat_heads * (fin * h + 2 * h) + h,
                    BackboneKind::Gin => fin * 2 * h + 2 * h + 2 * h * h + h,
                }
            })
            .sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = seeded(seed);
        let h = self.hidden_dim;
        let mut ps = ParamSet::new();
        for i in 0..self.layers {
            let fin = self.layer_in(i);
            match self.kind {
                BackboneKind::Gcn => init_linear(&mut ps, &mut rng, &format!("layer{i}"), fin, h),
                BackboneKind::Gat => {
                    for hd in 0..self.gat_heads {
                        let p = format!("layer{i}.head{hd}");
                        ps.insert(format!("{p}.weight"), glorot(&mut rng, fin, h));
                        ps.insert(format!("{p}.att_src"), glorot(&mut rng, h, 1));
                        ps.insert(format!("{p}.att_dst"), glorot(&mut rng, h, 1));
                    }
                    ps.insert(format!("layer{i}.bias"), Tensor::zeros(&[1, h]));
                }
                BackboneKind::Gin => {
                    init_linear(&mut ps, &mut rng, &format!("layer{i}.mlp0"), fin, 2 * h);
                    init_linear(&mut ps, &mut rng, &format!("layer{i}.mlp1"), 2 * h, h);
                }
            }
        }
        ps
    }

    /// Checks a parameter set against [`Self::param_shapes`].
    pub fn check_params(&self, ps: &ParamSet) -> Result<()> {
        let shapes = self.param_shapes();
        for (name, t) in ps.iter() {
            match shapes.get(name) {
                None => return Err(Error::Shape(format!("unexpected parameter {name}"))),
                Some(s) if s.as_slice() != t.shape() => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, config expects {s:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(missing) = shapes.keys().find(|k| !ps.contains(k)) {
            return Err(Error::Shape(format!("missing parameter {missing}")));
        }
        Ok(())
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with degrees taken over the self-looped graph.
pub fn gcn_norm(adj: &SparseAdj) -> SparseAdj {
    let looped = adj.with_self_loops();
    let mut deg = vec![0.0; looped.num_nodes()];
    for (&(_, t), &w) in looped.edges().iter().zip(looped.weights()) {
        deg[t] += w;
    }
    let inv: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let weights = looped
        .edges()
        .iter()
        .zip(looped.weights())
        .map(|(&(s, t), &w)| inv[s] * w * inv[t])
        .collect();
    SparseAdj::new(looped.num_nodes(), looped.edges().to_vec(), weights, false)
        .expect("normalised adjacency keeps valid indices")
}

/// Precomputed message-passing structure for one graph and backbone kind.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub kind: BackboneKind,
    pub adj: Arc<SparseAdj>,
    src: Arc<Vec<usize>>,
    dst: Arc<Vec<usize>>,
}

impl Propagation {
    pub fn new(kind: BackboneKind, adj: &SparseAdj) -> Self {
        let adj = match kind {
            BackboneKind::Gcn => gcn_norm(adj),
            // attention segments must be grouped by destination
            BackboneKind::Gat => adj.with_self_loops().sorted_by_dst(),
            // (1 + eps) h_i + sum_j h_j with eps = 0
            BackboneKind::Gin => {
                let l = adj.with_self_loops();
                let w = vec![1.0; l.num_edges()];
                SparseAdj::new(l.num_nodes(), l.edges().to_vec(), w, false).unwrap()
            }
        };
        let src = Arc::new(adj.edges().iter().map(|e| e.0).collect());
        let dst = Arc::new(adj.edges().iter().map(|e| e.1).collect());
        Self {
            kind,
            adj: Arc::new(adj),
            src,
            dst,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.num_nodes()
    }
}

/// Output of a backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub last: Var,
    /// Per-layer outputs `b_1..b_L` (empty when capture is off).
    pub activations: Vec<Var>,
}

/// Per-edge attention coefficients of one GAT head, grouped by destination.
pub fn gat_attention(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    prop: &Propagation,
    wh: Var,
    att_src: Var,
    att_dst: Var,
) -> Result<Var> {
    let s_src = tape.matmul(wh, att_src)?;
    let s_dst = tape.matmul(wh, att_dst)?;
    let e_src = tape.row_select(s_src, prop.src.clone())?;
    let e_dst = tape.row_select(s_dst, prop.dst.clone())?;
    let e = tape.add(e_src, e_dst)?;
    let e = tape.leaky_relu(e, cfg.gat_slope)?;
    tape.segment_softmax(e, prop.dst.clone())
}

fn layer_forward(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    p: &Bound,
    prop: &Propagation,
    i: usize,
    h: Var,
) -> Result<Var> {
    match cfg.kind {
        BackboneKind::Gcn => {
            let xw = tape.matmul(h, p.get(&format!("layer{i}.weight"))?)?;
            let agg = tape.spmm(prop.adj.clone(), xw)?;
            tape.add(agg, p.get(&format!("layer{i}.bias"))?)
        }
        BackboneKind::Gat => {
            let mut acc: Option<Var> = None;
            for hd in 0..cfg.gat_heads {
                let pre = format!("layer{i}.head{hd}");
                let wh = tape.matmul(h, p.get(&format!("{pre}.weight"))?)?;
                let alpha = gat_attention(
                    tape,
                    cfg,
                    prop,
                    wh,
                    p.get(&format!("{pre}.att_src"))?,
                    p.get(&format!("{pre}.att_dst"))?,
                )?;
                let out = tape.spmm_weighted(prop.adj.clone(), wh, alpha)?;
                acc = Some(match acc {
                    None => out,
                    Some(a) => tape.add(a, out)?,
                });
            }
            let mut out = acc.expect("gat_heads >= 1");
            if cfg.gat_heads > 1 {
                out = tape.scale(out, 1.0 / cfg.gat_heads as f64)?;
            }
            tape.add(out, p.get(&format!("layer{i}.bias"))?)
        }
        BackboneKind::Gin => {
            let agg = tape.spmm(prop.adj.clone(), h)?;
            let m = apply_linear(tape, p, &format!("layer{i}.mlp0"), agg)?;
            let m = tape.relu(m)?;
            apply_linear(tape, p, &format!("layer{i}.mlp1"), m)
        }
    }
}

/// Runs the stack: ReLU between layers, none after the last.
pub fn backbone_forward(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    params: &Bound,
    prop: &Propagation,
    x: Var,
    capture: bool,
) -> Result<BackboneOutput> {
    let width = tape.value(x).cols();
    if width != cfg.in_dim {
        return Err(Error::dim(
            "backbone_forward",
            format!(
                "input width {width} != backbone in_dim {}; an input bridge is required",
                cfg.in_dim
            ),
        ));
    }
    if prop.kind != cfg.kind {
        return Err(Error::Config(format!(
            "propagation built for {} used with {} backbone",
            prop.kind, cfg.kind
        )));
    }
    let mut h = x;
    let mut acts = Vec::new();
    for i in 0..cfg.layers {
        h = layer_forward(tape, cfg, params, prop, i, h)?;
        if i + 1 < cfg.layers {
            h = tape.relu(h)?;
        }
        if capture {
            acts.push(h);
        }
    }
    Ok(BackboneOutput {
        last: h,
        activations: acts,
    })
}

/// Parameter roles for closed-form audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Backbone,
    Side,
    Head,
}

/// Closed-form counts. `Side` = MLP `in -> side -> ... -> side` with `layers` linear maps;
/// `Head` = linear `width -> classes` where `extras = (width, classes)`.
pub fn param_count(
    cfg: &BackboneConfig,
    role: ParamRole,
    side_hidden: usize,
    extras: (usize, usize),
) -> usize {
    match role {
        ParamRole::Backbone => cfg.param_count(),
        ParamRole::Side => side_mlp_count(cfg.in_dim, side_hidden, cfg.layers),
        ParamRole::Head => extras.0 * extras.1 + extras.1,
    }
}

pub fn side_mlp_count(in_dim: usize, side: usize, layers: usize) -> usize {
    (in_dim * side + side) + layers.saturating_sub(1) * (side * side + side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gcn_norm_isolated_node() {
        let a = SparseAdj::new(1, vec![], vec![], true).unwrap();
        let n = gcn_norm(&a);
        assert_eq!(n.edges(), &[(0, 0)]);
        assert_eq!(n.weights(), &[1.0]);
    }

    #[test]
    fn gcn_norm_path_weights() {
        let a = SparseAdj::unweighted(2, vec![(0, 1), (1, 0)], true).unwrap();
        let n = gcn_norm(&a);
        assert_eq!(n.num_edges(), 4);
        for &w in n.weights() {
            assert!((w - 0.5).abs() < 1e-15);
        }
        let x = Tensor::from_rows(&[vec![2.0], vec![4.0]]);
        let y = crate::tensor::spmm(&n, n.weights(), &x).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-15 && (y.data()[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn gcn_norm_not_idempotent() {
        let a = SparseAdj::unweighted(3, vec![(0, 1), (1, 0), (1, 2), (2, 1)], true).unwrap();
        let once = gcn_norm(&a);
        let twice = gcn_norm(&once);
        assert_ne!(once.weights(), twice.weights());
    }

    #[test]
    fn closed_form_counts() {
        let c = BackboneConfig::new(BackboneKind::Gcn, 2, 8, 100);
        assert_eq!(c.param_count(), 11_000);
        assert_eq!(c.init(0).scalar_count(), 11_000);
        for kind in BackboneKind::ALL {
            let mut c = BackboneConfig::new(kind, 3, 7, 5);
            c.gat_heads = 2;
            assert_eq!(c.param_count(), c.init(1).scalar_count(), "{kind}");
        }
        assert_eq!(side_mlp_count(8, 16, 2), 416);
    }

    #[test]
    fn dim_mismatch_names_both() {
        let c = BackboneConfig::new(BackboneKind::Gcn, 2, 8, 4);
        let mut tape = Tape::new();
        let p = c.init(0).bind(&mut tape, false);
        let prop = Propagation::new(BackboneKind::Gcn, &SparseAdj::identity(3));
        let x = tape.constant(Tensor::zeros(&[3, 5]));
        let err = backbone_forward(&mut tape, &c, &p, &prop, x, false)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains('5') && err.contains('8') && err.contains("bridge"),
            "{err}"
        );
    }

    #[test]
    fn zero_weights_propagate_zero() {
        let c = BackboneConfig::new(BackboneKind::Gcn, 2, 3, 4);
        let mut ps = c.init(0);
        for (_, t) in ps.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let adj = SparseAdj::unweighted(3, vec![(0, 1), (1, 0)], true).unwrap();
        let prop = Propagation::new(BackboneKind::Gcn, &adj);
        let x = tape.constant(Tensor::full(&[3, 3], 1.5));
        let out = backbone_forward(&mut tape, &c, &p, &prop, x, true).unwrap();
        for a in out.activations {
            assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gat_attention_sums_to_one() {
        let c = BackboneConfig::new(BackboneKind::Gat, 1, 2, 3);
        let ps = c.init(4);
        let adj = SparseAdj::unweighted(
            4,
            vec![(0, 1), (1, 0), (1, 2), (2, 1), (0, 3), (3, 0)],
            true,
        )
        .unwrap();
        let prop = Propagation::new(BackboneKind::Gat, &adj);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.3, -1.0],
            vec![2.0, 1.0],
            vec![-0.5, 0.5],
        ]));
        let wh = tape
            .matmul(x, p.get("layer0.head0.weight").unwrap())
            .unwrap();
        let alpha = gat_attention(
            &mut tape,
            &c,
            &prop,
            wh,
            p.get("layer0.head0.att_src").unwrap(),
            p.get("layer0.head0.att_dst").unwrap(),
        )
        .unwrap();
        let mut sums = [0.0; 4];
        for (&d, &a) in prop.dst.iter().zip(tape.value(alpha).data()) {
            sums[d] += a;
        }
        for s in sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extra_layer_arrays_rejected() {
        let c2 = BackboneConfig::new(BackboneKind::Gcn, 2, 4, 4);
        let c5 = BackboneConfig::new(BackboneKind::Gcn, 5, 4, 4);
        assert!(c2.check_params(&c5.init(0)).is_err());
        assert!(c2.check_params(&c2.init(0)).is_ok());
    }
}
