//! Blade inspection pipeline: pseudo-labelled blade segmentation, SLIC
//! superpixel decomposition and semi-supervised surface anomaly scoring.

pub mod anodet;
pub mod config;
pub mod error;
pub mod image;
pub mod ingest;
pub mod io;
pub mod metrics;
pub mod morphology;
pub mod nn;
pub mod overlay;
pub mod pipeline;
pub mod records;
pub mod segnet;
pub mod slic;
pub mod synth;

pub use error::{Error, Result};
