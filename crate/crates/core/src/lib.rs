//! Context-driven copy-paste augmentation for object detection and
//! segmentation datasets.
//!
//! The pipeline estimates where objects of each class plausibly appear by
//! scoring "contextual images" (crops whose target box is masked out) with a
//! pluggable scorer, then pastes matching instance cut-outs into the
//! selected boxes and rewrites the annotations.

pub mod annotate;
pub mod blend;
pub mod context;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod instance_db;
pub mod pipeline;
pub mod placement;
pub mod raster;
pub mod rng;
pub mod scorer;
pub mod shape_model;
pub mod weak;

pub use error::{Error, Result};
