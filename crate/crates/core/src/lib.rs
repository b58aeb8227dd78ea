//! Large-label-set linear classification with adversarial negative sampling.
//!
//! The pipeline has three stages:
//!
//! 1. fit an auxiliary probabilistic label tree ([`aux_tree`]) that approximates
//!    the conditional label distribution in a PCA-reduced feature space;
//! 2. train a linear classifier ([`linear_model`]) by negative sampling, drawing
//!    negatives from a [`noise::NoiseModel`] (uniform, frequency, or the tree);
//! 3. at prediction time add `log p_n(y|x)` back to every score ([`inference`])
//!    so the ranking matches what full softmax training would produce.
//!
//! [`diagnostics`] evaluates the gradient signal-to-noise ratio of negative
//! sampling on explicit probability tables, where the Hessian and the gradient
//! covariance have closed forms.

pub mod aux_tree;
pub mod binio;
pub mod data_io;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod linear_model;
pub mod math;
pub mod noise;
pub mod training;

pub use error::{Error, ErrorKind, Result};
