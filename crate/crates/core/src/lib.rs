//! Instance-based transfer learning for small differentiable classifiers.
//!
//! A model pre-trained on a source domain scores every target-domain training
//! sample by its influence on validation loss. Samples predicted to hurt are
//! dropped, and the model is fine-tuned on what remains with full or partial
//! parameter transfer.
//!
//! Modules, bottom-up:
//! - [`numkit`]: dense linear algebra, CG and Cholesky solvers, finite differences, seeded RNG
//! - [`model`]: softmax-linear and MLP classifiers with exact gradients and Hessian-vector products
//! - [`influence`]: inverse-Hessian-vector products and influence scores
//! - [`dropout`]: the single-pass dropping rule and its report
//! - [`transfer`]: parameter transfer, layer freezing, fine-tuning, evaluation
//! - [`data`]: datasets, generators, splitting, corruption, loaders

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dropout;
pub mod error;
pub mod influence;
pub mod model;
pub mod numkit;
pub mod transfer;

pub use error::{Error, Result};
