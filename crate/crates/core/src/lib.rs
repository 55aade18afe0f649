//! Inspection toolkit for periodic-texture panel imagery.

pub mod classify;
pub mod config;
pub mod detect;
pub mod error;
pub mod imgproc;
pub mod impact;
pub mod periodicity;
pub mod pipeline;
pub mod raster;
pub mod reference;
pub mod selfref;
pub mod service;
pub mod synth;
pub mod workflow;

pub use error::{Error, ErrorCode, Result};
pub use raster::{BBox, ImageMeta, InspectionImage, Pixels, Raster};
