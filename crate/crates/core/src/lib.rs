//! Training-free retrieval-augmented forecasting for short, covariate-coupled
//! operational regimes.
//!
//! The engine stores raw historical regimes in a hierarchical knowledge base,
//! retrieves physically aligned references with a bi-weighted two-stage
//! similarity search, calibrates how many references to splice into the
//! forecaster's context using the top retrieval as a self-supervised agent,
//! and scores forecast deviations for rolling-window fault-precursor
//! alerting. A seeded synthetic fleet generator backs the test and ablation
//! harness.
//!
//! Heavy scans are data-parallel behind the `parallel` feature (on by
//! default); disabling it swaps in sequential fallbacks with bit-identical
//! output.

pub mod augmentation;
pub mod error;
pub mod eval;
pub mod forecaster;
pub mod kb;
pub mod maintenance;
pub mod matrix;
pub mod par;
pub mod retrieval;
pub mod schema;
pub mod store;
pub mod synth;
pub mod weighting;

pub use error::{Error, Result};
