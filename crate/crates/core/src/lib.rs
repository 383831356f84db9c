//! Progressive re-parameterized BatchNorm (PRepBN) and simplified linear
//! attention (SLA) for transformer blocks.
//!
//! The crate carries its own small tensor type and reverse-mode tape so that
//! every algebraic identity behind the two mechanisms can be checked exactly:
//! RepBN collapsing into a plain BatchNorm, BatchNorm folding into the next
//! linear layer, and linear attention computed in either association order.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod normalization;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Result, SlabError};
pub use tensor::{DType, Float, Tensor};
