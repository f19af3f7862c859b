//! Dense tensor algebra with reverse-mode differentiation.
//!
//! Everything is 64-bit and deterministic: contractions accumulate in a
//! fixed sequential order, so identical inputs give bit-identical outputs
//! across runs and across the `parallel` feature.

pub mod fdcheck;
pub mod mask;
pub mod params;
pub mod tape;
pub mod tensor;

pub use fdcheck::{finite_diff_check, LossEval, DEFAULT_FD_EPS};
pub use mask::Mask;
pub use params::{sgd_step, Parameter, ParameterSet};
pub use tape::{attention, masked_attention, GradMap, NodeId, Tape};
pub use tensor::Tensor;
