//! Seeded synthetic datasets standing in for citation graphs, molecules and point clouds.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridges::knn_graph;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphSet, TaskKind};
use crate::rng::{derive, seeded, Rng};
use crate::tensor::Tensor;

/// Stochastic block model with bag-of-words node features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub words_per_node: usize,
    /// Probability that a word is drawn from the node's own topic block.
    pub topic_purity: f64,
}

impl Default for SbmParams {
    fn default() -> Self {
        Self {
            block_sizes: vec![100, 100, 100],
            p_in: 0.05,
            p_out: 0.005,
            feature_dim: 500,
            words_per_node: 20,
            topic_purity: 0.3,
        }
    }
}

/// Tree-shaped molecules with a planted ring: label 0 = triangle, 1 = 4-cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolParams {
    pub count: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub feature_dim: usize,
    pub atom_types: usize,
    /// Fingerprint bits set per atom type beyond its one-hot slot.
    pub fingerprint_bits: usize,
    /// Probability that a ring atom takes a type from its motif's own pool
    /// (types `0..3` for triangles, `3..6` for 4-cycles) instead of a uniform type.
    pub motif_affinity: f64,
}

impl Default for MolParams {
    fn default() -> Self {
        Self {
            count: 200,
            min_nodes: 8,
            max_nodes: 16,
            feature_dim: 300,
            atom_types: 16,
            fingerprint_bits: 8,
            motif_affinity: 0.5,
        }
    }
}

/// Point clouds of three shape classes: 0 sphere, 1 cube, 2 two-cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtcldParams {
    pub count: usize,
    pub points: usize,
    pub k: usize,
}

impl Default for PtcldParams {
    fn default() -> Self {
        Self {
            count: 90,
            points: 64,
            k: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthSpec {
    Sbm(SbmParams),
    Mol(MolParams),
    Ptcld(PtcldParams),
}

pub const PTCLD_CLASSES: usize = 3;

/// Atom types reserved for each ring motif.
const MOTIF_POOL: usize = 3;

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name}={p} outside [0,1]")));
    }
    Ok(())
}

/// Pure function of `(spec, seed)`.
pub fn synth(spec: &SynthSpec, seed: u64) -> Result<GraphSet> {
    match spec {
        SynthSpec::Sbm(p) => sbm(p, seed),
        SynthSpec::Mol(p) => mol(p, seed),
        SynthSpec::Ptcld(p) => ptcld(p, seed),
    }
}

pub fn sbm(p: &SbmParams, seed: u64) -> Result<GraphSet> {
    check_prob("p_in", p.p_in)?;
    check_prob("p_out", p.p_out)?;
    check_prob("topic_purity", p.topic_purity)?;
    let blocks = p.block_sizes.len();
    if blocks < 2 || p.block_sizes.contains(&0) {
        return Err(Error::Config("sbm needs >= 2 non-empty blocks".into()));
    }
    if p.feature_dim == 0 {
        return Err(Error::Config("feature_dim must be >= 1".into()));
    }
    let labels: Vec<usize> = p
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = labels.len();

    let mut rng = seeded(derive(seed, &[1]));
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let prob = if labels[i] == labels[j] {
                p.p_in
            } else {
                p.p_out
            };
            if rng.random::<f64>() < prob {
                pairs.push((i, j));
            }
        }
    }

    let mut rng = seeded(derive(seed, &[2]));
    let d = p.feature_dim;
    let span = (d / blocks).max(1);
    let mut feats = vec![0.0; n * d];
    for (i, &c) in labels.iter().enumerate() {
        for _ in 0..p.words_per_node {
            let w = if rng.random::<f64>() < p.topic_purity {
                (c * span + rng.random_range(0..span)) % d
            } else {
                rng.random_range(0..d)
            };
            feats[i * d + w] = 1.0;
        }
    }
    let mut g = Graph::undirected(Tensor::new(vec![n, d], feats)?, &pairs)?;
    g.node_labels = Some(labels);
    let set = GraphSet {
        kind: TaskKind::NodeTask,
        graphs: vec![g],
        num_classes: blocks,
        feature_dim: d,
        splits: None,
    };
    set.validate()?;
    Ok(set)
}

fn atom_fingerprints(p: &MolParams, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seeded(derive(seed, &[10]));
    let extra: Vec<usize> = (p.atom_types..p.feature_dim).collect();
    (0..p.atom_types)
        .map(|t| {
            let mut bits = vec![t];
            if !extra.is_empty() {
                bits.extend(
                    extra
                        .choose_multiple(&mut rng, p.fingerprint_bits.min(extra.len()))
                        .copied(),
                );
            }
            bits
        })
        .collect()
}

/// Random tree on `base` nodes plus a ring of `ring` nodes hung off one tree node.
fn planted_graph(rng: &mut Rng, base: usize, ring: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 1..base {
        pairs.push((rng.random_range(0..i), i));
    }
    let r0 = base;
    for k in 0..ring {
        pairs.push((r0 + k, r0 + (k + 1) % ring));
    }
    if base > 0 {
        pairs.push((rng.random_range(0..base), r0 + rng.random_range(0..ring)));
    }
    pairs
}

pub fn mol(p: &MolParams, seed: u64) -> Result<GraphSet> {
    if p.count == 0 {
        return Err(Error::Config("mol count must be >= 1".into()));
    }
    if p.min_nodes < 4 || p.min_nodes > p.max_nodes {
        return Err(Error::Config(format!(
            "mol node range [{}, {}] invalid (min >= 4)",
            p.min_nodes, p.max_nodes
        )));
    }
    if p.atom_types < MOTIF_POOL * 2 || p.feature_dim < p.atom_types {
        return Err(Error::Config(format!(
            "mol needs feature_dim >= atom_types >= {}",
            MOTIF_POOL * 2
        )));
    }
    check_prob("motif_affinity", p.motif_affinity)?;
    let fps = atom_fingerprints(p, seed);
    let mut rng = seeded(derive(seed, &[11]));
    let d = p.feature_dim;
    let mut graphs = Vec::with_capacity(p.count);
    for _ in 0..p.count {
        let label = usize::from(rng.random_bool(0.5));
        let ring = 3 + label;
        let n = rng.random_range(p.min_nodes..=p.max_nodes);
        let pairs = planted_graph(&mut rng, n - ring, ring);
        let mut feats = vec![0.0; n * d];
        let base = n - ring;
        for i in 0..n {
            let t = if i >= base && rng.random::<f64>() < p.motif_affinity {
                label * MOTIF_POOL + rng.random_range(0..MOTIF_POOL)
            } else {
                rng.random_range(0..p.atom_types)
            };
            for &b in &fps[t] {
                feats[i * d + b] = 1.0;
            }
        }
        let mut g = Graph::undirected(Tensor::new(vec![n, d], feats)?, &pairs)?;
        g.graph_label = Some(label);
        graphs.push(g);
    }
    let set = GraphSet {
        kind: TaskKind::GraphTask,
        graphs,
        num_classes: 2,
        feature_dim: d,
        splits: None,
    };
    set.validate()?;
    Ok(set)
}

fn unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// `m` points of the given shape class, inside the unit sphere.
pub fn shape_points(class: usize, m: usize, rng: &mut Rng) -> Tensor {
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(m);
    match class {
        0 => {
            for _ in 0..m {
                pts.push(unit(rng));
            }
        }
        1 => {
            let s = 1.0 / 3f64.sqrt();
            for _ in 0..m {
                let mut p = [0.0; 3];
                for c in p.iter_mut() {
                    *c = rng.random_range(-1.0..1.0);
                }
                let face = rng.random_range(0..3);
                p[face] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                pts.push([p[0] * s, p[1] * s, p[2] * s]);
            }
        }
        _ => {
            let axis = unit(rng);
            let noise = Normal::new(0.0, 0.12).unwrap();
            for i in 0..m {
                let sign = if i < m / 2 { 0.6 } else { -0.6 };
                let mut p = [0.0; 3];
                for (c, a) in p.iter_mut().zip(axis) {
                    *c = sign * a + noise.sample(rng);
                }
                pts.push(p);
            }
            let maxn = pts
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            if maxn > 1.0 {
                for p in pts.iter_mut() {
                    p.iter_mut().for_each(|c| *c /= maxn);
                }
            }
        }
    }
    Tensor::new(vec![m, 3], pts.into_iter().flatten().collect()).unwrap()
}

pub fn ptcld(p: &PtcldParams, seed: u64) -> Result<GraphSet> {
    if p.count == 0 || p.points < 2 {
        return Err(Error::Config(
            "ptcld needs count >= 1 and points >= 2".into(),
        ));
    }
    let mut rng = seeded(derive(seed, &[20]));
    let mut graphs = Vec::with_capacity(p.count);
    for i in 0..p.count {
        let class = i % PTCLD_CLASSES;
        let pts = shape_points(class, p.points, &mut rng);
        let mut g = knn_graph(&pts, p.k)?;
        g.graph_label = Some(class);
        graphs.push(g);
    }
    let set = GraphSet {
        kind: TaskKind::PointcloudTask,
        graphs,
        num_classes: PTCLD_CLASSES,
        feature_dim: 3,
        splits: None,
    };
    set.validate()?;
    Ok(set)
}

/// Seeded random-walk subgraphs of roughly `size` nodes, as an unlabeled graph corpus
/// for graph-level pre-training on a single large graph.
pub fn chunk_graph(g: &Graph, size: usize, count: usize, seed: u64) -> Result<GraphSet> {
    let n = g.num_nodes();
    if n == 0 || size == 0 || count == 0 {
        return Err(Error::Config(
            "chunking needs a non-empty graph, size and count".into(),
        ));
    }
    let size = size.min(n);
    let mut nbrs = vec![Vec::new(); n];
    for &(s, t) in g.adj.edges() {
        if s != t {
            nbrs[s].push(t);
        }
    }
    let mut rng = seeded(derive(seed, &[30]));
    let mut graphs = Vec::with_capacity(count);
    for _ in 0..count {
        let nodes = random_walk_nodes(&nbrs, size, &mut rng);
        graphs.push(induced(g, &nodes)?);
    }
    for h in graphs.iter_mut() {
        h.graph_label = Some(0);
        h.node_labels = None;
    }
    Ok(GraphSet {
        kind: TaskKind::GraphTask,
        graphs,
        num_classes: 2,
        feature_dim: g.feature_dim(),
        splits: None,
    })
}

/// Visits nodes by random walk (restarting at a random unvisited node when stuck)
/// until `size` distinct nodes are collected; returned sorted.
pub(crate) fn random_walk_nodes(nbrs: &[Vec<usize>], size: usize, rng: &mut Rng) -> Vec<usize> {
    let n = nbrs.len();
    let mut seen = vec![false; n];
    let mut out = Vec::with_capacity(size);
    let mut cur = rng.random_range(0..n);
    seen[cur] = true;
    out.push(cur);
    let mut stall = 0;
    while out.len() < size {
        let next = if nbrs[cur].is_empty() || stall > 4 * size {
            stall = 0;
            let unvisited: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
            *unvisited.choose(rng).expect("size <= n")
        } else {
            nbrs[cur][rng.random_range(0..nbrs[cur].len())]
        };
        if !seen[next] {
            seen[next] = true;
            out.push(next);
            stall = 0;
        } else {
            stall += 1;
        }
        cur = next;
    }
    out.sort_unstable();
    out
}

/// Subgraph induced by sorted `nodes`, reindexed in that order.
pub(crate) fn induced(g: &Graph, nodes: &[usize]) -> Result<Graph> {
    let mut map = vec![usize::MAX; g.num_nodes()];
    for (new, &old) in nodes.iter().enumerate() {
        map[old] = new;
    }
    let edges: Vec<(usize, usize)> = g
        .adj
        .edges()
        .iter()
        .filter(|(s, t)| map[*s] != usize::MAX && map[*t] != usize::MAX)
        .map(|&(s, t)| (map[s], map[t]))
        .collect();
    let weights = vec![1.0; edges.len()];
    let adj = crate::tensor::SparseAdj::new(nodes.len(), edges, weights, g.adj.is_undirected())?;
    let mut out = Graph::new(g.features.select_rows(nodes), adj)?;
    out.graph_label = g.graph_label;
    out.node_labels = g
        .node_labels
        .as_ref()
        .map(|l| nodes.iter().map(|&i| l[i]).collect());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::container_to_string;

    #[test]
    fn degenerate_sbm_two_cliques() {
        let p = SbmParams {
            block_sizes: vec![2, 2],
            p_in: 1.0,
            p_out: 0.0,
            feature_dim: 4,
            ..SbmParams::default()
        };
        let set = sbm(&p, 5).unwrap();
        let g = &set.graphs[0];
        assert_eq!(g.undirected_pairs(), vec![(0, 1), (2, 3)]);
        assert_eq!(g.node_labels.as_deref(), Some(&[0, 0, 1, 1][..]));
    }

    #[test]
    fn invalid_probability() {
        let p = SbmParams {
            p_in: 1.5,
            ..SbmParams::default()
        };
        assert!(matches!(sbm(&p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mol_deterministic() {
        let p = MolParams {
            count: 10,
            ..MolParams::default()
        };
        let a = container_to_string(&mol(&p, 42).unwrap()).unwrap();
        let b = container_to_string(&mol(&p, 42).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = container_to_string(&mol(&p, 43).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    /// Brute-force cycle check: label 0 graphs contain a triangle, label 1 graphs do not.
    #[test]
    fn mol_labels_match_planted_ring() {
        let set = mol(
            &MolParams {
                count: 40,
                ..MolParams::default()
            },
            3,
        )
        .unwrap();
        for g in &set.graphs {
            let n = g.num_nodes();
            let pairs = g.undirected_pairs();
            let mut adj = vec![vec![false; n]; n];
            for &(a, b) in &pairs {
                adj[a][b] = true;
                adj[b][a] = true;
            }
            let mut triangles = 0;
            for a in 0..n {
                for b in a + 1..n {
                    for c in b + 1..n {
                        if adj[a][b] && adj[b][c] && adj[a][c] {
                            triangles += 1;
                        }
                    }
                }
            }
            // tree + one ring: edges = nodes
            assert_eq!(pairs.len(), n);
            assert_eq!(triangles == 1, g.graph_label == Some(0));
        }
    }

    #[test]
    fn ptcld_shapes() {
        let set = ptcld(
            &PtcldParams {
                count: 6,
                points: 32,
                k: 4,
            },
            1,
        )
        .unwrap();
        assert_eq!(set.feature_dim, 3);
        for g in &set.graphs {
            assert_eq!(g.num_nodes(), 32);
            for r in 0..32 {
                let n: f64 = g.features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(n <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn chunks_are_valid_subgraphs() {
        let set = sbm(&SbmParams::default(), 0).unwrap();
        let chunks = chunk_graph(&set.graphs[0], 50, 5, 1).unwrap();
        assert_eq!(chunks.graphs.len(), 5);
        for c in &chunks.graphs {
            assert_eq!(c.num_nodes(), 50);
            assert!(c.adj.is_symmetric());
        }
    }
}
