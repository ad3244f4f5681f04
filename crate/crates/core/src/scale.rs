//! Metric scale recovery: anchor a dimensionless pointmap to metric depth.
//!
//! The scale `sigma` minimizes `sum C_ij * |sigma * z_ij - D_ij|` over valid
//! pixels. That objective equals `sum w_i * |sigma - q_i|` with ratios
//! `q = D / z` and weights `w = C * z`, so its minimizer is the weighted
//! median of the ratios.

use std::cmp::Ordering;

use thiserror::Error;

use crate::pose::{
    checked_depth, ConfidenceMap, DepthEstimator, EstimatorError, PointMap, PoseEstimate,
    RelativePose, ScaleState, CONFIDENCE_FLOOR,
};
use crate::projection::PerspectiveView;
use crate::raster::Grid;
use crate::search::CorrespondenceRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("depth value {value} at index {index} is not finite and positive")]
    InvalidDepth { index: usize, value: f64 },
    #[error("dimension mismatch: pointmap {pointmap:?}, depth {depth:?}, confidence {confidence:?}")]
    DimensionMismatch {
        pointmap: (usize, usize),
        depth: (usize, usize),
        confidence: (usize, usize),
    },
    #[error("no pixel has confidence above the floor and positive depth")]
    NoValidPixels,
    #[error("scale factor must be finite and positive, got {0}")]
    InvalidSigma(f64),
    #[error("pose is already metric")]
    AlreadyMetric,
    #[error("calibrating {record}: {source}")]
    Record {
        record: String,
        #[source]
        source: Box<ScaleError>,
    },
    #[error("depth estimation failed: {0}")]
    Depth(#[from] EstimatorError),
}

/// Per-pixel depth in meters along the optical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Grid<f64>);

impl DepthMap {
    pub fn new(values: Grid<f64>) -> Result<Self, ScaleError> {
        if let Some((index, &value)) = values
            .as_slice()
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(ScaleError::InvalidDepth { index, value });
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

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFit {
    /// Meters per estimator unit.
    pub sigma: f64,
    /// Objective value at `sigma`.
    pub objective: f64,
    pub valid_pixel_count: usize,
}

/// `(ratio, weight)` for every pixel that participates in the fit.
fn weighted_ratios(
    pointmap: &PointMap,
    depth: &DepthMap,
    conf: &ConfidenceMap,
) -> Result<Vec<(f64, f64)>, ScaleError> {
    let dims = pointmap.dims();
    if depth.dims() != dims || conf.dims() != dims {
        return Err(ScaleError::DimensionMismatch {
            pointmap: dims,
            depth: depth.dims(),
            confidence: conf.dims(),
        });
    }
    let pts = pointmap.grid().as_slice();
    let ds = depth.grid().as_slice();
    let cs = conf.grid().as_slice();
    Ok(pts
        .iter()
        .zip(ds)
        .zip(cs)
        .filter(|((p, _), c)| **c > CONFIDENCE_FLOOR && p.z > 0.0)
        .map(|((p, d), c)| (d / p.z, c * p.z))
        .collect())
}

/// Value of the scale objective at `sigma`, over the pixels the fit uses.
pub fn scale_objective(
    sigma: f64,
    pointmap: &PointMap,
    depth: &DepthMap,
    conf: &ConfidenceMap,
) -> Result<f64, ScaleError> {
    let dims = pointmap.dims();
    if depth.dims() != dims || conf.dims() != dims {
        return Err(ScaleError::DimensionMismatch {
            pointmap: dims,
            depth: depth.dims(),
            confidence: conf.dims(),
        });
    }
    Ok(pointmap
        .grid()
        .as_slice()
        .iter()
        .zip(depth.grid().as_slice())
        .zip(conf.grid().as_slice())
        .filter(|((p, _), c)| **c > CONFIDENCE_FLOOR && p.z > 0.0)
        .map(|((p, d), c)| c * (sigma * p.z - d).abs())
        .sum())
}

/// Exact minimizer of the scale objective. When a whole interval of scales
/// is optimal the lower end is returned.
pub fn fit_scale(pointmap: &PointMap, depth: &DepthMap, conf: &ConfidenceMap) -> Result<ScaleFit, ScaleError> {
    let mut items = weighted_ratios(pointmap, depth, conf)?;
    if items.is_empty() {
        return Err(ScaleError::NoValidPixels);
    }
    items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let half = 0.5 * total;
    let mut cum = 0.0;
    let mut sigma = items[items.len() - 1].0;
    for &(q, w) in &items {
        cum += w;
        if cum >= half {
            sigma = q;
            break;
        }
    }
    let objective = items.iter().map(|(q, w)| w * (sigma - q).abs()).sum();
    Ok(ScaleFit {
        sigma,
        objective,
        valid_pixel_count: items.len(),
    })
}

/// Scales a raw pose's translation into meters.
pub fn to_metric(pose: &RelativePose, sigma: f64) -> Result<RelativePose, ScaleError> {
    if pose.scale_state == ScaleState::Metric {
        return Err(ScaleError::AlreadyMetric);
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(ScaleError::InvalidSigma(sigma));
    }
    Ok(RelativePose {
        rotation: pose.rotation,
        translation: pose.translation * sigma,
        scale_state: ScaleState::Metric,
    })
}

/// Converts a raw record to meters using depth estimated on its first view
/// and the pointmap of `estimate`, the pose estimate for the record's views.
pub fn calibrate_record<D: DepthEstimator + ?Sized>(
    record: &CorrespondenceRecord,
    depth_estimator: &D,
    estimate: &PoseEstimate,
    view_a: &PerspectiveView,
) -> Result<CorrespondenceRecord, ScaleError> {
    let wrap = |e: ScaleError| ScaleError::Record {
        record: record.pair.id(),
        source: Box::new(e),
    };
    if record.pose.scale_state == ScaleState::Metric {
        return Err(wrap(ScaleError::AlreadyMetric));
    }
    let depth = checked_depth(depth_estimator, view_a).map_err(|e| wrap(e.into()))?;
    let fit = fit_scale(&estimate.pointmap, &depth, &estimate.confidence).map_err(wrap)?;
    let pose = to_metric(&record.pose, fit.sigma).map_err(wrap)?;
    Ok(CorrespondenceRecord {
        pose,
        sigma: fit.sigma,
        ..record.clone()
    })
}
