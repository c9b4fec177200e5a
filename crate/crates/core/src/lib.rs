//! Variational quantum classifiers with trainable and input-programmed
//! Hermitian observables, plus the benchmark harness that compares them.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradients;
pub mod models;
pub mod neural;
pub mod numfmt;
pub mod observable;
pub mod plot;
pub mod qstate;
pub mod selftest;
pub mod sweep;

pub use error::{QmlError, Result};
