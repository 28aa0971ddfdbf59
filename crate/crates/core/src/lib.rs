//! Desk-scale toolkit for training pixel-space border prompts on frozen
//! multimodal surrogate models and measuring how well a prompt trained on
//! one model transfers to others.
//!
//! The pieces, bottom up:
//!
//! - [`autodiff`]: a minimal reverse-mode tape over dense `f64` tensors;
//!   every differentiable computation goes through it.
//! - [`imaging`]: differentiable resize and border masks, procedural
//!   synthetic scenes standing in for real datasets, image corruptions.
//! - [`prompt`]: the learnable border perturbation and the transform that
//!   composes it with a resized input image.
//! - [`models`]: small frozen vision-language surrogates (patch encoder,
//!   projector, causal token head) and a contrastive dual encoder.
//! - [`losses`]: the autoregressive task loss, feature-consistency
//!   alignment, task-semantics enrichment, and their weighted composite.
//! - [`trainer`]: the prompt optimization loop (plain and normalized
//!   gradient updates, cosine schedule, ensembles, grid search).
//! - [`eval`]: task protocols, transfer matrices, feature-drift and
//!   separability diagnostics, ablation harness.
//! - [`persist`]: binary prompt/model/dataset formats, run configs, and
//!   CSV/JSON report export.

pub mod autodiff;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod models;
pub mod persist;
pub mod prompt;
pub mod rng;
pub mod task;
pub mod text;
pub mod trainer;

pub use autodiff::{grad_check, Tape, Tensor};
