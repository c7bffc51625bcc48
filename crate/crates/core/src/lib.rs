//! Panoramic multi-object tracking on a cylindrical (wrap-around) image
//! domain.

pub mod ablation;
pub mod assignment;
pub mod association;
pub mod config;
pub mod detection;
pub mod dynamicssm;
pub mod error;
pub mod feedback;
pub mod geometry;
pub mod kalman;
pub mod memory;
pub mod metrics;
pub mod mot;
pub mod params;
pub mod refine;
pub mod rng;
pub mod synth;
pub mod tracker;
pub mod vector;

pub use detection::Detection;
pub use error::{Error, Result};
pub use geometry::{cyclic_iou, wrap_delta, wrap_unit, Geometry, PanoBox};
pub use tracker::{FrameResult, TrackId, Tracker, TrackerConfig, TrackingMode};
