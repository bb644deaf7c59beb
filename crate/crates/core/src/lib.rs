//! Decentralized multi-agent reinforcement learning for cooperative adaptive
//! cruise control.
//!
//! The crate bundles a longitudinal platoon simulator with an electric-vehicle
//! energy model, a partially observed multi-agent environment whose agents
//! tune optimal-velocity-model gains, recurrent actor-critic agents, and
//! communication-efficient weight consensus between neighbouring vehicles.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod consensus;
pub mod data;
pub mod env;
pub mod error;
pub mod nn;
pub mod ovm;
pub mod train;
pub mod vehicle;

pub use error::{Error, Result};
