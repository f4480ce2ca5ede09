//! Query-based multi-camera 3D detection decoder with state-space temporal
//! feature learning and a dynamic query set, plus a synthetic world to train
//! and evaluate it on.

pub mod config;
pub mod decoder;
pub mod error;
pub mod evalmetrics;
pub mod kernels;
pub mod nn;
pub mod par;
pub mod queries;
pub mod sampling;
pub mod simworld;
pub mod ssm;
pub mod supervision;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
