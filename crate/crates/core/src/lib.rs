//! Ternary (1.58-bit) quantization-aware training core.
//!
//! Everything in this crate is allocation-only and IO-free so it builds under
//! `no_std` + `alloc`. The `std` feature adds `std::error::Error` plumbing and
//! `parallel` turns on rayon row-parallel matrix kernels (the accumulation
//! order per output element is the same either way).
//!
//! Layout:
//! - [`tensor`] dense row-major tensors and the matmul kernels
//! - [`ops`] elementwise/row kernels shared by the tape and inference paths
//! - [`autograd`] reverse-mode tape with a straight-through node
//! - [`quantize`] absmean ternary weights, 8-bit activations, lambda schedules
//! - [`layers`] RMSNorm, BitLinear and the decoder-only transformer
//! - [`distill`] block-wise MSE distillation loss
//! - [`optim`] AdamW over full-precision master weights
//! - [`ternpack`] 2-bit packing, multiply-free matmul and footprint arithmetic
//! - [`packed_model`] inference over a packed transformer
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod distill;
mod error;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod packed_model;
pub mod quantize;
pub mod tensor;
pub mod ternpack;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

use core::fmt::Debug;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type. Training runs in `f32`; `f64` exists for
/// finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
