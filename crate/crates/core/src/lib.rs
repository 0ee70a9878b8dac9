//! Selective-attention region proposals and a contextual organ detector.
//!
//! The pipeline is a patch-embedding backbone, a proposal network that only
//! evaluates anchors inside a fixed attention region of the image, and a
//! small classification head that sees pooled features plus the normalized
//! proposal coordinates.

pub mod anchors;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod detector;
pub mod evalbench;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod rpn;
pub mod synthdata;
pub mod training;
