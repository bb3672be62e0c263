//! Label-guided auxiliary training for a desk-scale point-cloud detector.
//!
//! A seed-based detector (a point backbone and a detection head) is trained
//! with help from an auxiliary branch that sees the ground truth: label point
//! clouds go through a label encoder, annotations through an annotation
//! encoder, and two attention stages fuse them with a second backbone over
//! the full cloud into a guidance representation. The backbone's features
//! are pulled towards the guidance with an L2 loss; the branch is removed
//! before inference.

// Validation is written `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detection;
pub mod encoders;
pub mod error;
pub mod lai;
pub mod lkm;
pub mod model;
pub mod numerics;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
