//! Multi-object, multi-grasp detection from RGB-D imagery.
//!
//! Grasps are oriented rectangles; a region proposal stage finds grasp
//! candidates and a second stage classifies their orientation and refines
//! them.

pub mod augment;
pub mod autodiff;
pub mod encoding;
pub mod geometry;
pub mod evaluation;
pub mod ingest;
pub mod detector;
