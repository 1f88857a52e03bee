//! Mixtures-of-sub-trees human pose estimation.
//!
//! The body is modelled in two layers: each limb (left/right arm and
//! leg) is a *sub-tree* with several learned mixture topologies rooted
//! at a latent node, and an upper layer ties the sub-tree roots and the
//! torso/head chain into one global tree. Structure comes from
//! correlation distances and Chow-Liu grouping, inference is exact
//! message passing with generalized distance transforms, training is a
//! two-stage latent max-margin scheme, and an occlusion-aware pass
//! re-scores overlapping sub-tree candidates before the final parse.
//!
//! See the `book/` guide for a walkthrough of each stage; the `mstpose`
//! CLI exposes training, inference, evaluation and the synthetic data
//! generator.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod raster;
pub mod features;
pub mod parts;
pub mod inference;
pub mod model;
pub mod occlusion;
pub mod structure;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
