//! Dense image correspondence matching with flexible hierarchical refinement.
//!
//! Two stages: coarse mutual nearest-neighbour matches on the deepest pyramid
//! level give a homography that warps image B into A's frame; the warped
//! image C is then matched against A from the deepest level down to the
//! full-resolution descriptor layer, and the final matches are traced back
//! into B.

pub mod cli;
pub mod descriptor;
pub mod distill;
pub mod error;
pub mod eval;
pub mod feature_io;
pub mod fhr;
pub mod geometry;
pub mod matcher;
pub mod pipeline;
pub mod types;

pub use error::{Error, Result};
pub use types::{bilinear_sample, FeatureMap, FeaturePyramid, Image, Match, MatchSet, PixelCoord};
