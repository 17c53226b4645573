//! Learned threshold token pruning for transformer encoders.
//!
//! The crate bundles a minimal reverse-mode autodiff engine, a
//! from-scratch encoder with per-layer attention records, threshold and
//! schedule based token pruning, the soft-to-hard training procedure, an
//! analytic FLOPs model, synthetic task generation, and a selection-kernel
//! micro-benchmark.

pub mod autodiff;
pub mod bench;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod flops;
pub mod pruning;
pub mod tensor;
pub mod training;

pub use autodiff::{grad_check, Adam, Graph, NodeId, Param};
pub use encoder::{EncoderModel, ModelConfig};
pub use error::{Error, Result};
pub use pruning::{PruneContext, PruneMode, PruneTrace, ThresholdSet};
pub use tensor::Tensor;
