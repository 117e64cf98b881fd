//! Volumetric U-Net segmentation with self-calibrated convolutions, built on
//! a small define-by-run autograd engine.
//!
//! Networks train in `f32`; every operation is generic over [`Scalar`] so
//! the same code runs in `f64` for finite-difference checks.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::sync::atomic::{AtomicBool, Ordering};

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod params;
pub mod regions;
pub mod sc_conv;
pub mod tensor;
pub mod train;
pub mod unet;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Force single-threaded kernels. Results are already independent of the
/// thread count; this additionally pins scheduling for bitwise audits.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::Relaxed);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(Ordering::Relaxed)
}
