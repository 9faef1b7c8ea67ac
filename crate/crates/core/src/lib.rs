//! Continuous latent Dirichlet co-clustering (LDCC) of classification tasks.
//!
//! Each task is a set of classes, each class a set of real-valued samples.
//! Samples come from K Gaussian image-themes shared by all tasks; each class
//! mixes image-themes according to one of L Dirichlet task-themes; each task
//! mixes task-themes with proportions φ_d ~ Dir(δ).
//!
//! The crate provides:
//!
//! - [`specfn`]: ln Γ, ψ, ψ′, ln B and log-sum-exp.
//! - [`data`]: task containers, the binary task format and a synthetic sampler.
//! - [`model`]: the global parameters, initialization and JSON checkpoints.
//! - [`inference`]: the per-task variational E-step and the ELBO.
//! - [`learning`]: the M-step, the α Newton step and online mini-batch training.
//! - [`similarity`]: Dirichlet KL distances, correlation diagrams and task selection.
//! - [`report`]: CSV input and output.
//!
//! A task is embedded by the variational posterior Dir(λ_d) over its
//! task-theme proportions; distances between tasks are KL divergences between
//! these posteriors.

// `!(x > 0.0)` is used on purpose so NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod inference;
pub mod learning;
pub mod model;
pub mod report;
pub mod similarity;
pub mod specfn;

pub use data::{generate_synthetic, load_tasks, save_tasks, LatentRecord, Task, TaskCollection};
pub use error::{Error, Result};
pub use inference::{run_estep, EStepOutput, VariationalState};
pub use learning::{train, train_from, BatchLog};
pub use model::{init_model, random_model, ThemeModel, TrainConfig};
pub use similarity::{correlation_diagram, dirichlet_kl, distance_matrix, select_tasks};
