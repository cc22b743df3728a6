//! Multi-stain virtual staining from H&E: whole-slide tiling, activation
//! masks, dual-cycle losses, a desk-scale trainer, overlap-add stitching,
//! discriminator-based QC and evaluation metrics.

pub mod checkpoint;
pub mod color;
pub mod config;
pub mod error;
pub mod filter;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod qc;
pub mod raster;
pub mod stain_mask;
pub mod stitch;
pub mod synth;
pub mod train;
pub mod wsi;

pub use error::{Error, Result};
pub use raster::{BitPlane, Raster};
