//! Federated learning simulator built around worst-case robust local
//! objectives.
//!
//! Each user minimizes its local cost plus a protection function
//! `ε‖·‖_q + δ` that bounds the unknown influence of the other users' data.
//! The crate provides the cost families, the protection machinery, the
//! local and proximal solvers, FedAvg / robust / proximal federation loops,
//! and variational-inequality diagnostics that compare the federated
//! solution with its centralized counterpart.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod harness;
pub mod problem;
pub mod solvers;
pub mod uncertainty;

pub use error::{Error, Result};
pub use problem::{CostModel, Family, LabeledDataset, Matrix, Vector, WeightVector};
