//! Event-augmented global optimization of camera poses, intrinsics and depth.
//!
//! Given pairwise pointmaps, intensity frames and event streams, the solver
//! jointly refines per-frame poses and depth maps under an alignment term,
//! trajectory smoothness, optical-flow agreement and an event-based
//! photometric consistency term. Around the solver sit the pieces needed to
//! feed and check it: event parsing and accumulation, classical image
//! operations (SNR map, Harris corners, hole filling), SE(3) geometry,
//! sensor synchronization, a linearized event simulator and trajectory/depth
//! metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod events;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod solver;
pub mod sync;
pub mod synth;

pub use config::Config;
pub use error::{Error, Result};
pub use events::{Event, EventStream, VoxelGrid};
pub use geometry::{DepthMap, Intrinsics, MotionField, Pointmap, Pose};
pub use imaging::{CornerSet, FeatureMap, Image, SnrMap};
pub use metrics::Trajectory;
pub use objective::{LossBreakdown, Weights};
pub use solver::{GlobalState, PairGraph};
pub use synth::SceneSpec;
