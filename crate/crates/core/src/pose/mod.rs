//! Relative-pose and depth estimation interfaces.
//!
//! The pipeline treats the pose estimator as a black box returning a relative
//! pose, a per-pixel confidence map and a pointmap for a pair of views. Two
//! implementations ship here: [`OracleEstimator`], which answers from synthetic
//! ground truth, and [`RemoteEstimator`], an HTTP client for an external
//! inference service. Every result passes through [`checked_estimate`] /
//! [`checked_depth`], which enforce the output invariants regardless of which
//! implementation produced it.

mod oracle;
mod remote;

pub use oracle::{
    oracle_depth, oracle_estimate, GroundTruthIndex, OracleConfig, OracleDepthEstimator,
    OracleEstimator,
};
pub use remote::{
    DepthRequest, DepthResponse, EstimateRequest, EstimateResponse, RemoteConfig,
    RemoteEstimator, WireArray,
};

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::projection::{FrameId, PerspectiveView};
use crate::raster::Grid;
use crate::scale::DepthMap;

/// Pixels with confidence below this are exempt from the positive-depth
/// check and excluded from scale fitting.
pub const CONFIDENCE_FLOOR: f64 = 0.01;

/// Tolerance on `|q| - 1` for quaternions coming out of an estimator.
pub const ESTIMATOR_QUAT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("estimator unavailable: {0}")]
    Unavailable(String),
    #[error("view dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("estimator output violates invariant: {0}")]
    InvariantViolation(String),
    #[error("confidence map is empty")]
    EmptyMap,
    #[error("no ground truth for frame {0}")]
    UnknownFrame(FrameId),
    #[error("request timed out")]
    Timeout,
    #[error("service returned HTTP status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("transport error: {0}")]
    Transport(String),
}

impl EstimatorError {
    /// Transient failures worth retrying against a remote service.
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Timeout | Self::Transport(_) | Self::Unavailable(_) => true,
            Self::Status(code) => *code >= 500 || *code == 429,
            _ => false,
        }
    }

    /// Failures caused by an external service rather than by the data.
    pub fn is_external(&self) -> bool {
        matches!(
            self,
            Self::Unavailable(_) | Self::Timeout | Self::Status(_) | Self::Malformed(_) | Self::Transport(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleState {
    /// Estimator units, dimensionless.
    Raw,
    /// Meters.
    Metric,
}

/// Transform taking camera-`a` coordinates to camera-`b` coordinates:
/// `x_b = R x_a + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale_state: ScaleState,
}

impl RelativePose {
    pub fn identity(scale_state: ScaleState) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            scale_state,
        }
    }

    pub fn from_isometry(iso: &Isometry3<f64>, scale_state: ScaleState) -> Self {
        Self {
            rotation: iso.rotation,
            translation: iso.translation.vector,
            scale_state,
        }
    }

    /// Builds a pose from raw components, requiring `||q|| = 1` within `tol`.
    /// The quaternion is stored as given, not renormalized.
    pub fn from_wxyz(
        wxyz: [f64; 4],
        translation: [f64; 3],
        scale_state: ScaleState,
        tol: f64,
    ) -> Result<Self, EstimatorError> {
        if wxyz.iter().chain(&translation).any(|v| !v.is_finite()) {
            return Err(EstimatorError::InvariantViolation("non-finite pose component".into()));
        }
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let norm = q.norm();
        if (norm - 1.0).abs() > tol {
            return Err(EstimatorError::InvariantViolation(format!(
                "rotation quaternion has norm {norm}"
            )));
        }
        Ok(Self {
            rotation: UnitQuaternion::new_unchecked(q),
            translation: Vector3::from(translation),
            scale_state,
        })
    }

    pub fn rotation_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn inverse(&self) -> Self {
        Self::from_isometry(&self.isometry().inverse(), self.scale_state)
    }

    /// `self` followed by `next`: a->b then b->c gives a->c.
    pub fn then(&self, next: &RelativePose) -> Self {
        Self::from_isometry(&(next.isometry() * self.isometry()), self.scale_state)
    }
}

/// Per-pixel non-negative estimator confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(Grid<f64>);

impl ConfidenceMap {
    pub fn new(values: Grid<f64>) -> Result<Self, EstimatorError> {
        if let Some(bad) = values.as_slice().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(EstimatorError::InvariantViolation(format!(
                "confidence value {bad} is negative or non-finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// Per-pixel 3D scene point, in the first camera's frame and estimator units.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap(Grid<Vector3<f64>>);

impl PointMap {
    pub fn new(points: Grid<Vector3<f64>>) -> Result<Self, EstimatorError> {
        if points.as_slice().iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(EstimatorError::InvariantViolation("non-finite pointmap entry".into()));
        }
        Ok(Self(points))
    }

    pub fn grid(&self) -> &Grid<Vector3<f64>> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    /// Depth (z) component per pixel.
    pub fn depths(&self) -> Grid<f64> {
        self.0.map(|p| p.z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RelativePose,
    pub confidence: ConfidenceMap,
    pub pointmap: PointMap,
}

impl PoseEstimate {
    /// Checks the invariants every estimator output must satisfy for a view
    /// pair of `dims`.
    pub fn validate(&self, dims: (usize, usize)) -> Result<(), EstimatorError> {
        let q = self.pose.rotation.quaternion();
        if !((q.norm() - 1.0).abs() <= ESTIMATOR_QUAT_TOL) {
            return Err(EstimatorError::InvariantViolation(format!(
                "rotation quaternion has norm {}",
                q.norm()
            )));
        }
        if !self.pose.translation.iter().all(|t| t.is_finite()) {
            return Err(EstimatorError::InvariantViolation("non-finite translation".into()));
        }
        if self.pose.scale_state != ScaleState::Raw {
            return Err(EstimatorError::InvariantViolation(
                "estimator must return raw-scale poses".into(),
            ));
        }
        if self.confidence.dims() != dims || self.pointmap.dims() != dims {
            return Err(EstimatorError::InvariantViolation(format!(
                "output dims {:?}/{:?} do not match views {:?}",
                self.confidence.dims(),
                self.pointmap.dims(),
                dims
            )));
        }
        let conf = self.confidence.grid().as_slice();
        let pts = self.pointmap.grid().as_slice();
        if let Some(i) = conf
            .iter()
            .zip(pts)
            .position(|(c, p)| *c >= CONFIDENCE_FLOOR && !(p.z > 0.0))
        {
            return Err(EstimatorError::InvariantViolation(format!(
                "non-positive depth at confident pixel {i}"
            )));
        }
        Ok(())
    }
}

/// Spatial mean of a confidence map.
pub fn mean_confidence(c: &ConfidenceMap) -> Result<f64, EstimatorError> {
    let values = c.grid().as_slice();
    if values.is_empty() {
        return Err(EstimatorError::EmptyMap);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub trait PoseEstimator: Send + Sync {
    /// Relative pose from `a` to `b` with confidence and pointmap at the
    /// views' resolution. Callers should go through [`checked_estimate`].
    fn estimate(&self, a: &PerspectiveView, b: &PerspectiveView) -> Result<PoseEstimate, EstimatorError>;
}

pub trait DepthEstimator: Send + Sync {
    /// Metric z-depth per pixel of `view`.
    fn estimate_depth(&self, view: &PerspectiveView) -> Result<DepthMap, EstimatorError>;
}

/// Runs `estimator` and verifies its output before handing it on.
pub fn checked_estimate<E: PoseEstimator + ?Sized>(
    estimator: &E,
    a: &PerspectiveView,
    b: &PerspectiveView,
) -> Result<PoseEstimate, EstimatorError> {
    let (da, db) = ((a.height(), a.width()), (b.height(), b.width()));
    if da != db {
        return Err(EstimatorError::DimensionMismatch { a: da, b: db });
    }
    let est = estimator.estimate(a, b)?;
    est.validate(da)?;
    Ok(est)
}

pub fn checked_depth<E: DepthEstimator + ?Sized>(
    estimator: &E,
    view: &PerspectiveView,
) -> Result<DepthMap, EstimatorError> {
    let depth = estimator.estimate_depth(view)?;
    let dims = (view.height(), view.width());
    if depth.dims() != dims {
        return Err(EstimatorError::InvariantViolation(format!(
            "depth dims {:?} do not match view {:?}",
            depth.dims(),
            dims
        )));
    }
    Ok(depth)
}

impl<T: PoseEstimator + ?Sized> PoseEstimator for Box<T> {
    fn estimate(&self, a: &PerspectiveView, b: &PerspectiveView) -> Result<PoseEstimate, EstimatorError> {
        (**self).estimate(a, b)
    }
}

impl<T: DepthEstimator + ?Sized> DepthEstimator for Box<T> {
    fn estimate_depth(&self, view: &PerspectiveView) -> Result<DepthMap, EstimatorError> {
        (**self).estimate_depth(view)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_confidence_examples() {
        let c = ConfidenceMap::new(Grid::filled(3, 5, 4.0)).unwrap();
        assert_eq!(mean_confidence(&c).unwrap(), 4.0);
        let c = ConfidenceMap::new(Grid::from_vec(2, 2, vec![2.0, 2.0, 6.0, 6.0]).unwrap()).unwrap();
        assert_eq!(mean_confidence(&c).unwrap(), 4.0);
        let empty = ConfidenceMap::new(Grid::from_vec(0, 0, vec![]).unwrap()).unwrap();
        assert_eq!(mean_confidence(&empty), Err(EstimatorError::EmptyMap));
    }

    #[test]
    fn mean_confidence_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (37, 23);
        let g = Grid::from_fn(h, w, |_, _| rng.random_range(0.0..10.0));
        let mut naive = 0.0;
        for i in 0..h {
            for j in 0..w {
                naive += *g.get(i, j);
            }
        }
        naive /= (h * w) as f64;
        let got = mean_confidence(&ConfidenceMap::new(g).unwrap()).unwrap();
        assert!((got - naive).abs() < 1e-9);
    }

    #[test]
    fn negative_confidence_rejected() {
        let g = Grid::from_vec(1, 2, vec![1.0, -0.5]).unwrap();
        assert!(matches!(ConfidenceMap::new(g), Err(EstimatorError::InvariantViolation(_))));
    }

    #[test]
    fn quaternion_norm_checked() {
        assert!(RelativePose::from_wxyz([0.5, 0.0, 0.0, 0.0], [0.0; 3], ScaleState::Raw, 1e-9).is_err());
        let p = RelativePose::from_wxyz([1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0], ScaleState::Raw, 1e-9).unwrap();
        assert_eq!(p.rotation_wxyz(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn validate_requires_positive_depth_where_confident() {
        let pose = RelativePose::identity(ScaleState::Raw);
        let conf = ConfidenceMap::new(Grid::from_vec(1, 2, vec![0.005, 1.0]).unwrap()).unwrap();
        let bad_where_unconfident = PointMap::new(
            Grid::from_vec(1, 2, vec![Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.0, 0.0, 2.0)]).unwrap(),
        )
        .unwrap();
        let est = PoseEstimate {
            pose,
            confidence: conf.clone(),
            pointmap: bad_where_unconfident,
        };
        assert!(est.validate((1, 2)).is_ok());
        assert!(est.validate((2, 1)).is_err());
        let bad = PointMap::new(
            Grid::from_vec(1, 2, vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, -2.0)]).unwrap(),
        )
        .unwrap();
        let est = PoseEstimate {
            pose,
            confidence: conf,
            pointmap: bad,
        };
        assert!(est.validate((1, 2)).is_err());
    }

    #[test]
    fn retry_classification() {
        assert!(EstimatorError::Timeout.is_retryable());
        assert!(EstimatorError::Status(503).is_retryable());
        assert!(!EstimatorError::Status(400).is_retryable());
        assert!(!EstimatorError::Malformed("x".into()).is_retryable());
        assert!(EstimatorError::Malformed("x".into()).is_external());
    }
}
