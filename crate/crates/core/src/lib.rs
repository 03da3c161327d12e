//! Federated cross-domain recommendation with differentially private
//! prototypes.
//!
//! Each domain is a client that trains a graph-propagated embedding model on
//! its own interactions, clusters its users into prototypes, and uploads only
//! clipped, Laplace-noised prototypes together with the overlapping user ids
//! of each cluster. The server aggregates the uploads into per-domain global
//! and local prototype sets, which clients use in two contrastive losses.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod proto;
pub mod rng;
pub mod server;
pub mod synthetic;
pub mod trainer;
pub mod wire;

pub use dataset::{InteractionDataset, OverlapRegistry, SplitDataset};
pub use linalg::Matrix;
pub use server::{ClientUpload, DomainPrototypes, ServerPrototypes};
pub use trainer::{ClientState, Hyperparams};
