//! Multi-view correspondence mining from 360-degree equirectangular video.
//!
//! Panoramic frames are cut into perspective views, candidate view pairs
//! within a temporal window are scored by a pluggable relative-pose
//! estimator, accepted pairs are refined and propagated through the frame
//! correspondence graph, and poses are brought to metric scale against
//! monocular depth. A small ray tracer supplies ground truth for testing,
//! and [`loss`] holds the motion-masked denoising loss kernels.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod graph;
pub mod ingest;
pub mod loss;
pub mod manifest;
pub mod pipeline;
pub mod pose;
pub mod projection;
pub mod raster;
pub mod scale;
pub mod search;
pub mod seed;
pub mod synth;

pub use graph::{build_graph, connected_components, propagate, FrameGraph};
pub use loss::{LossConfig, MotionMask, Residual};
pub use manifest::{read_manifest, validate_manifest, write_manifest, ManifestRecord};
pub use pose::{
    ConfidenceMap, DepthEstimator, EstimatorError, PointMap, PoseEstimate, PoseEstimator, RelativePose, ScaleState,
};
pub use projection::{FrameId, PanoFrame, PerspectiveView, ViewAngles};
pub use scale::{fit_scale, DepthMap, ScaleFit};
pub use search::{CandidatePair, CorrespondenceRecord, FrameStore, Provenance, SearchConfig, ViewConfig, ViewRef};
pub use synth::{CameraPose, SceneSpec};
