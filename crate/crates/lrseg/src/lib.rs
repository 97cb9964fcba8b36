//! Segment-level road obstacle detection by likelihood ratios.
//!
//! The toolkit models two feature distributions — free space and obstacles —
//! with pluggable density estimators (diagonal Gaussian mixtures, spline
//! flows, or nearest-neighbour similarity), classifies segments by the ratio
//! of the two estimates, composes per-image decision and score maps, and
//! scores predictions with pixel-level (AP, FPR95) and component-level
//! (sIoU, PPV, mean F1) metrics.

pub mod container;
pub mod error;
pub mod flow;
pub mod gmm;
pub mod knn;
pub mod pgm;
pub mod rle;
pub mod types;

pub use error::{Error, Result};
