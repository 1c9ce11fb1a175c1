//! Open-set recognition for tabular data.
//!
//! Two pipelines share one evaluation harness:
//!
//! * [`gmvae`]: a class-conditional Gaussian-mixture VAE whose encoder means
//!   are scored with the [`decision::uncertainty`] ratio and thresholded at a
//!   validation-selected saturation point.
//! * [`iiloss`]: an embedding network trained with the intra/inter spread
//!   loss, thresholded on the squared distance to the nearest centroid.
//!
//! [`data`] covers ingestion through splitting, [`eval`] the metrics and the
//! incremental-novel-class protocol, and [`experiment`] wires it all up.

pub mod centroid;
pub mod data;
pub mod decision;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gmvae;
pub mod iiloss;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
