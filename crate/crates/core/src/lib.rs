//! Graph side-tuning: reuse a frozen, contrastively pre-trained GNN backbone on a
//! new graph task by training only a small MLP side network fused with the
//! backbone's per-layer activations.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`gradcheck`]: numeric core and reverse-mode differentiation
//! - [`graph`], [`container`], [`synth`]: graph containers, file formats, generators
//! - [`backbone`], [`checkpoint`]: GCN/GAT/GIN stacks and their serialization
//! - [`pretrain`]: GraphCL / SimGRACE contrastive pre-training
//! - [`sidetune`]: GBST/GAST/GSST/GMST side-tuning plus fine-tune and scratch baselines
//! - [`bridges`]: input adapters, task heads, point-cloud graphs, edge sampling
//! - [`harness`], [`metrics`]: scenario runner, reports and audits
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod bridges;
pub mod checkpoint;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod sidetune;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use backbone::{BackboneConfig, BackboneKind};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{Batch, Graph, GraphSet, Splits, TaskKind};
pub use params::ParamSet;
pub use tape::{Tape, Var};
pub use tensor::{SparseAdj, Tensor};
