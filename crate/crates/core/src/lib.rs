//! Decoupled keypoint detection and description on synthetic two-view
//! scenes with known geometry.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`geometry`] – cameras, depth maps, and dense warps between views.
//! - [`scenegen`] – deterministic synthetic scenes with simulated 3D tracks.
//! - [`targets`] – the two-view detection prior, top-k targets, and the
//!   detection/coverage losses.
//! - [`descobj`] – conditional matching distributions and the descriptor
//!   log-likelihood objective.
//! - [`tinynet`] – small encoder/decoder networks with exact reverse-mode
//!   gradients and the training loops.
//! - [`matcher`] – top-K keypoint sampling, descriptor sampling,
//!   dual-softmax and warp-quantized matching.
//! - [`eval`] – repeatability, pose errors, AUC, mAA, and a RANSAC
//!   relative-pose solver.

pub mod descobj;
pub mod eval;
pub mod geometry;
pub mod ioutil;
pub mod map;
pub mod matcher;
pub mod scenegen;
pub mod selfcheck;
pub mod targets;
pub mod tinynet;

pub use descobj::{CorrespondenceSet, DescriptorSet, MatchParams};
pub use geometry::{Camera, DepthMap, Warp};
pub use map::{BinaryMap, ChannelMap, Map2, PixelGrid, ScoreMap};
pub use matcher::{KeypointSet, MatchSet};
pub use scenegen::{Scene, SceneParams, TrackSet, View};
pub use targets::{PriorParams, TargetDistribution};
pub use tinynet::{NetConfig, NetState, TrainConfig};
