//! Intervention-weighted imitation learning on a planar grasp-and-thread
//! task: environment, policy network, synthetic operator, two-bucket dataset
//! store, method registry, trainer and experiment protocol.

// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod datastore;
pub mod env;
pub mod error;
pub mod methods;
pub mod operator;
pub mod orchestrator;
pub mod policy;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
