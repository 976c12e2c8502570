//! Numeric core for shape-sensitive adversarial patches against monocular
//! depth estimators: raster types, detection post-processing, the patch
//! transformer/applier, losses, a toy victim network, the attack loop and
//! evaluation metrics.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command line
//! live in the `depthpatch` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attack;
pub mod bbox;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;

pub use bbox::{iou, BBox};
pub use detect::{DetectionSet, Detector, DetectorConfig, OracleDetector};
pub use error::{Error, Result};
pub use image::{BinaryMask, Denominator, DisparityMap, ImageTensor, MaskPair, Patch};
pub use model::{DepthModel, ModelHandle};
