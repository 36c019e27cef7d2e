//! Federated class-incremental learning simulator.
//!
//! Clients learn a stream of disjoint class sets with category-balanced
//! reweighting and per-task semantic distillation. A proxy server rebuilds
//! perturbed class prototypes from encoder gradients, augments them in
//! feature space and keeps the best global model of each task as the
//! distillation teacher.

pub mod checkpoint;
pub mod client;
pub mod config;
pub mod coordinator;
pub mod data;
pub mod demo;
pub mod error;
pub mod gradcheck;
pub mod inversion;
pub mod loss;
pub mod model;
pub mod proxy;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Activation, Batch, Dense, LossSpec, ModelParams, ParamGrads};
pub use tensor::Tensor2;
