//! Low-light image enhancement trained through a frozen recognizer.
//!
//! The enhancer is two stages: a global per-channel gain predicted from a
//! 32×32 thumbnail ([`gem`]) and an additive pixelwise correction predicted
//! by a small UNet ([`pam`]). Both are trained end-to-end to minimize the
//! loss of a frozen, bright-trained segmentation network ([`recognizer`]).

pub mod autograd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gem;
pub mod gradcheck;
pub mod nn;
pub mod pam;
pub mod recognizer;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{LabelMap, Scalar, Tensor};
