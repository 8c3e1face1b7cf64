//! BEV scene-graph navigation.
//!
//! An agent in a synthetic discrete environment lifts multi-view feature maps
//! into a bird's-eye-view grid, keeps a topological graph whose node
//! embeddings are pooled from that grid, and picks actions by fusing a
//! graph-level and a grid-level score. A set-prediction 3D box detector
//! supervises the BEV features.

pub mod bevtransform;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod navmetrics;
pub mod numcore;
pub mod policy;
pub mod rng;
pub mod scenegraph;
pub mod synthworld;

pub use error::{Error, Result};
pub use numcore::{ParamStore, Tensor};
pub use rng::SplitMix64;
