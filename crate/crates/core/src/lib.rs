//! Cross-view object correspondence on synthetic view pairs.
//!
//! Given a query image with an object mask and a second (target) view of the
//! same scene, the crate predicts the object's mask in the target view with
//! three interchangeable experts (geometric anchor points, a transferred
//! appearance prompt, and their fusion) and picks among them post hoc by
//! cyclic consistency.

pub mod anchor;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod mask;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pccs;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Frame, Point2D, PointSet};
pub use mask::Mask;
