//! Scene-adaptive crowd density estimation with guided batch normalization.
//!
//! The crate bundles everything needed to train and evaluate a small
//! encoder/decoder counting network whose decoder normalization parameters
//! are predicted per scene by a guiding network from unlabeled images:
//!
//! * [`tensor`] — dense f64 tensors with a reverse-mode differentiation graph
//! * [`norm`] — batch normalization and its guided variant, plus the flat
//!   parameter-vector slicing
//! * [`models`] — the counting and guiding networks and feed-forward adaptation
//! * [`scene`] — a deterministic synthetic multi-scene benchmark
//! * [`train`] — the episodic multi-scene training loop (Adam, clipping, LR decay)
//! * [`eval`] — MAE/RMSE, the multi-trial adaptation protocol and the
//!   parameter-variance analysis
//! * [`persist`] / [`config`] — checkpoint format and run configuration

pub mod config;
pub mod eval;
pub mod models;
pub mod norm;
pub mod persist;
pub mod scene;
pub mod seeding;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Tensor, TensorError};
