//! Instance segmentation as iterative binary coloring.
//!
//! An agent colors every pixel over `T` binary steps; after the last step
//! pixels sharing a color and touching each other form one instance. The
//! environment rewards per-pixel actions with background, splitting and
//! merging terms computed from the ground truth.

pub mod check;
pub mod dataset;
pub mod env;
pub mod error;
pub mod graph;
pub mod grid;
pub mod metrics;
pub mod policy;
pub mod raw;
pub mod reward;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{ActionMap, ColorState, Connectivity, Image, LabelMap};
