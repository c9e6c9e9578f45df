//! Interactive ensemble exploration engine.
//!
//! Trains a library of heterogeneous classifiers with cached out-of-fold
//! and test predictions, selects an initial ensemble by greedy hillclimbing,
//! and drives an interactive session in which data selections and model
//! toggles update each other.

pub mod dataio;
pub mod ensemble;
pub mod layout;
pub mod library;
pub mod linalg;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod session;
pub mod synthetic;
