//! Hierarchical Mamba adapters for video features.
//!
//! The crate is organized bottom-up:
//!
//! - [`numeric`]: dense `f64` tensors, a reverse-mode tape, multiply-add
//!   instrumentation and a finite-difference oracle.
//! - [`ssm`]: zero-order-hold discretization, sequential and Blelloch
//!   selective scans, Mamba and bidirectional Mamba blocks.
//! - [`context`]: T, DST and JST context extractors over high and low
//!   temporal branches.
//! - [`fusion`]: the DA, IC and Q-Mamba adapters that merge contexts into
//!   the current-frame feature.
//! - [`model`]: the full model with a linear channel head, and a frozen
//!   random backbone stub.
//! - [`baselines`] and [`costmodel`]: attention baselines and closed-form
//!   parameter and FLOP counts.
//! - [`synthetic`], [`optim`], [`harness`] and [`gradsuite`]: the
//!   moving-target task, training, ablations, run directories and the
//!   gradient check suite.

pub mod baselines;
pub mod context;
pub mod costmodel;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod ssm;
pub mod synthetic;

pub use error::{Error, Result};
