//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The module is split into:
//!
//! - [`array`]: plain n-dimensional storage ([`Array`]), no graph involved;
//! - [`graph`]: the operation tape ([`Graph`], [`Tensor`]) and backward pass;
//! - [`params`]: named persistent parameters ([`ParamSet`]) bound per graph;
//! - [`check`]: finite-difference verification of analytic gradients.
//!
//! The op vocabulary is deliberately small — exactly what an attention
//! encoder-decoder over flattened order-book windows needs — and every op
//! is a straightforward sequential loop, so results are bit-reproducible
//! across runs on the same platform.

pub mod array;
pub mod check;
pub mod graph;
pub mod params;

pub use array::Array;
pub use check::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{concat, Graph, Tensor, TensorError};
pub use params::{Bound, ParamSet};
