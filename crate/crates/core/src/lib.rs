//! Pseudo labels and pseudo boxes for point clouds from a handful of labeled
//! points.
//!
//! The pipeline indexes the cloud with an [`octree`], estimates per-point
//! normals and curvature ([`geometry`]), grows regions from labeled and
//! low-curvature seeds ([`expansion`]), merges over-segmented regions by a
//! scheduled geometric/semantic similarity ([`merge`]), and turns the merged
//! instances into axis-aligned boxes ([`detection`]). The [`loss`] module holds
//! the training losses that consume these pseudo labels, and [`metrics`] scores
//! results against ground truth.

pub mod bbox;
pub mod cloud;
pub mod geometry;
pub mod octree;
pub mod expansion;
pub mod synthetic;
pub mod merge;
pub mod loss;
pub mod detection;
pub mod metrics;
pub mod pipeline;
