//! Slow-fast transformer recognition of dynamic gestures at long range.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`graph`], [`nn`], [`gradcheck`]: dense tensors, reverse-mode
//!   differentiation and finite-difference verification.
//! * [`preproc`]: keyframe selection by K-Means, subject detection, crop and
//!   resize.
//! * [`model`]: the two-pathway network with a transformer head.
//! * [`objective`]: cross-entropy, the distance-weighted loss, accuracy, mAP.
//! * [`synthdata`]: a synthetic, distance-parameterized gesture video
//!   generator and the clip file format.
//! * [`harness`]: training, evaluation and loss comparison.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod objective;
pub mod preproc;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use model::{SftConfig, SftParams};
pub use objective::LongLossParams;
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
