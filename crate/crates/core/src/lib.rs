//! Unsupervised domain adaptation for semantic segmentation.
//!
//! The crate is split into the pieces the adaptation pipeline needs:
//!
//! * [`tensor`], [`tape`] and [`ops`]: a small dense tensor kernel with
//!   reverse-mode differentiation, plus [`gradcheck`] for verifying it.
//! * [`backbone`]: a miniature dilated fully convolutional segmenter that
//!   exposes a named feature pyramid, a pyramid-pooling head and adaptive
//!   batch normalization.
//! * [`aan`]: appearance adaptation. Renders an image with the averaged Gram
//!   statistics of another domain by normalized gradient descent in pixel
//!   space.
//! * [`ran`]: representation adaptation. Adversarial training of the
//!   segmenter against an atrous region-level domain discriminator.
//! * [`data`]: a procedural two-domain scene generator.
//! * [`eval`]: confusion matrices, IoU, score fusion and multi-scale
//!   inference.
//!
//! The crate is `no_std` + `alloc`. Enable the `std` feature for runtime SIMD
//! dispatch in the matrix kernel.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod aan;
pub mod backbone;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
mod linalg;
mod math;
pub mod ops;
pub mod ran;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
