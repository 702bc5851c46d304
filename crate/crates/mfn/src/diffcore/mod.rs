//! Minimal reverse-mode differentiation engine: dense f64 matrices, a
//! per-pass tape, an Adam optimizer, and a finite-difference gradient
//! checker.
//!
//! Training is single-threaded per step. Matrices and parameters move freely
//! between threads; a tape belongs to exactly one forward pass.

pub mod gradcheck;
pub mod matrix;
pub mod param;
pub mod tape;

pub use gradcheck::finite_diff_check;
pub use matrix::Matrix;
pub use param::{AdamConfig, ParamId, ParamStore, Parameter};
pub use tape::{NodeId, Tape};
