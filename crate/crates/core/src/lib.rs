//! Desk-scale 3D-consistent scene synthesis from a single RGB-D view.
//!
//! The pipeline lifts an input image to a colored point cloud, re-renders it
//! at new poses with a soft z-buffer, outpaints the missing region with an
//! autoregressive model over a quantized token grid using an image-specific
//! generation order, and accumulates every generated view back into the
//! point cloud so later renders share one world.

pub mod ar;
pub mod codebook;
pub mod corpus;
mod error;
pub mod experiments;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod ordering;
pub mod pipeline;
pub mod scene_io;
pub mod selection;
pub mod world;

pub use error::{Error, Result};
pub use grid::{Grid, Image, Mask, Rgb};
