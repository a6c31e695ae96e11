//! A query-based detection decoder in which each query samples a
//! multi-scale feature pyramid at learned 3D locations and mixes what it
//! sampled with weights generated from its own content.
//!
//! Every differentiable operation has an explicit backward pass in `f64`,
//! checked against finite differences by [`gradcheck`].
//!
//! - [`tensor`]: dense tensors, linear layers, layer norm, seeded RNG.
//! - [`geometry`]: query positions `(x, y, z, r)`, boxes, IoF and GIoU.
//! - [`feature_space`]: the pyramid as a 3D space and its interpolation.
//! - [`sampler`]: query-conditioned sampling offsets and feature lookup.
//! - [`mixer`]: adaptive channel and spatial mixing.
//! - [`attention`]: multi-head self-attention with a log-IoF bias.
//! - [`decoder`]: stages, parameters, checkpoints.
//! - [`matching`]: Hungarian matching, focal, L1 and GIoU set loss.
//! - [`scene`], [`trace`], [`train`], [`harness`]: synthetic data, output
//!   files, toy training and the operations behind the `querymix` binary.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]

pub mod attention;
pub mod decoder;
pub mod error;
pub mod feature_space;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod matching;
pub mod mixer;
pub mod sampler;
pub mod scene;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
