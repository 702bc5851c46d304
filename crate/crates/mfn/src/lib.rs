//! Multi-interest, fine-granularity user modeling for CTR prediction.
//!
//! The crate builds user representations from behavior sequences along two
//! routes and fuses them against a candidate item:
//!
//! - **Similarity interests**: behaviors are soft-assigned to pretrained
//!   interest centers using a fixed embedding table, and pooled from a
//!   second, trainable table ([`centers`], [`model`]).
//! - **Combination interests**: a self-attentive weight matrix over the
//!   trainable embeddings captures co-occurrence structure ([`model`]).
//!
//! Interest centers are pretrained with an entropy objective that rewards
//! decisive per-behavior assignments while keeping all centers in use.
//! Everything runs on a small reverse-mode autodiff engine ([`diffcore`]),
//! trains on generated e-commerce-style behavior data ([`synthgen`]), and is
//! evaluated with AUC / relative-improvement tooling ([`traineval`]).

pub mod baseline;
pub mod centers;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod features;
pub mod model;
pub mod persist;
pub mod rng;
pub mod synthgen;
pub mod traineval;

pub use error::{MfnError, Result};
