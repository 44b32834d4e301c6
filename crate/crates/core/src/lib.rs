//! Guided graph diffusion for unsupervised graph domain adaptation.
//!
//! A labeled source graph is pushed toward an unlabeled target graph by a
//! variance-exploding diffusion whose reverse process is steered by a
//! domain-classifier density ratio. A GCN trained on the generated graph with
//! an MMD alignment term then labels the target.

pub mod autodiff;
pub mod error;
pub mod matrix;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub mod checkpoint;
pub mod csbm;
pub mod graph;
pub mod sde;
pub mod score;
pub mod guidance;
pub mod pipeline;
