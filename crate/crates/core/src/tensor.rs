//! Dense row-major `f64` tensors and weighted sparse adjacency.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `rows x cols` matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count when viewed as a matrix; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count when viewed as a matrix (product of trailing dims).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Selects rows by index (repeats allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    /// Bit patterns of every entry; used for exact freezing checks.
    pub fn to_bits(&self) -> Vec<u64> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

/// `a[m x k] * b[k x n]`, skipping zero entries of `a` (sparse bag-of-words features).
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, orow): (usize, &mut [f64])| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m x k]^T * b[m x n]` -> `[k x n]`.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if n == 0 {
        return out;
    }
    // each output row sums over i in order, so the parallel split is bitwise identical
    let row = |(p, orow): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m x n] * b[k x n]^T` -> `[m x k]`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    if k == 0 {
        return out;
    }
    let row = |(i, orow): (usize, &mut [f64])| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_WORK {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

const PAR_WORK: usize = 1 << 18;

/// Weighted directed edge list over `num_nodes` nodes. Message flow is `src -> dst`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseAdj {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
    undirected: bool,
}

impl SparseAdj {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        weights: Vec<f64>,
        undirected: bool,
    ) -> Result<Self> {
        if edges.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} edges but {} weights",
                edges.len(),
                weights.len()
            )));
        }
        for (k, &(s, d)) in edges.iter().enumerate() {
            if s >= num_nodes || d >= num_nodes {
                return Err(Error::Index(format!(
                    "edge {k} ({s},{d}) out of range for {num_nodes} nodes"
                )));
            }
        }
        let adj = Self {
            num_nodes,
            edges,
            weights,
            undirected,
        };
        if undirected && !adj.is_symmetric() {
            return Err(Error::Data("undirected adjacency is not symmetric".into()));
        }
        Ok(adj)
    }

    /// Unit-weight adjacency.
    pub fn unweighted(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        undirected: bool,
    ) -> Result<Self> {
        let w = vec![1.0; edges.len()];
        Self::new(num_nodes, edges, w, undirected)
    }

    /// Self-loop-only adjacency with unit weights.
    pub fn identity(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            edges: (0..num_nodes).map(|i| (i, i)).collect(),
            weights: vec![1.0; num_nodes],
            undirected: true,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_undirected(&self) -> bool {
        self.undirected
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_symmetric(&self) -> bool {
        let mut fwd: Vec<(usize, usize, u64)> = self
            .edges
            .iter()
            .zip(&self.weights)
            .map(|(&(s, d), w)| (s, d, w.to_bits()))
            .collect();
        let mut rev: Vec<(usize, usize, u64)> = fwd.iter().map(|&(s, d, w)| (d, s, w)).collect();
        fwd.sort_unstable();
        rev.sort_unstable();
        fwd == rev
    }

    /// In-degree (count of incoming edges) per node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(_, d) in &self.edges {
            deg[d] += 1;
        }
        deg
    }

    /// Same structure, edges reordered so that destinations are grouped (stable sort by dst).
    pub fn sorted_by_dst(&self) -> Self {
        let mut order: Vec<usize> = (0..self.edges.len()).collect();
        order.sort_by_key(|&k| (self.edges[k].1, self.edges[k].0));
        Self {
            num_nodes: self.num_nodes,
            edges: order.iter().map(|&k| self.edges[k]).collect(),
            weights: order.iter().map(|&k| self.weights[k]).collect(),
            undirected: self.undirected,
        }
    }

    /// Adds a unit self-loop to every node lacking one.
    pub fn with_self_loops(&self) -> Self {
        let mut has = vec![false; self.num_nodes];
        for &(s, d) in &self.edges {
            if s == d {
                has[s] = true;
            }
        }
        let mut out = self.clone();
        for (i, h) in has.into_iter().enumerate() {
            if !h {
                out.edges.push((i, i));
                out.weights.push(1.0);
            }
        }
        out
    }
}

/// Forward sparse aggregation: `out[dst] += w * x[src]`.
pub fn spmm(adj: &SparseAdj, weights: &[f64], x: &Tensor) -> Result<Tensor> {
    if x.rows() != adj.num_nodes() {
        return Err(Error::dim(
            "spmm",
            format!(
                "adjacency has {} nodes, x has {} rows",
                adj.num_nodes(),
                x.rows()
            ),
        ));
    }
    let d = x.cols();
    let mut out = vec![0.0; adj.num_nodes() * d];
    for (&(s, t), &w) in adj.edges().iter().zip(weights) {
        let src = x.row(s);
        let dst = &mut out[t * d..(t + 1) * d];
        for (o, &v) in dst.iter_mut().zip(src) {
            *o += w * v;
        }
    }
    Tensor::new(vec![adj.num_nodes(), d], out)
}
