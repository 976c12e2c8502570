//! File formats, dataset loading and experiment orchestration around
//! `depthpatch-core`. The `depthpatch` binary is a thin clap front end over
//! the functions in [`run`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod kitti;
pub mod model_store;
pub mod plot;
pub mod run;

pub use error::{AppError, AppResult};
