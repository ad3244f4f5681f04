//! Ground-truth-backed estimators for synthetic fixtures.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    ConfidenceMap, DepthEstimator, EstimatorError, PointMap, PoseEstimate, PoseEstimator,
    RelativePose, ScaleState,
};
use crate::projection::{FrameId, PerspectiveView};
use crate::raster::Grid;
use crate::scale::DepthMap;
use crate::seed;
use crate::synth::{CameraPose, SceneSpec, ViewCamera};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Confidence reported for a pixel whose whole 3x3 neighbourhood is co-visible.
    pub conf_scale: f64,
    /// Metric length of one estimator unit (s*).
    pub planted_scale: f64,
    /// Standard deviation of the rotation perturbation, radians per axis.
    pub rot_sigma: f64,
    /// Standard deviation of the translation perturbation, estimator units per axis.
    pub trans_sigma: f64,
    /// Log-space standard deviation of multiplicative depth noise.
    pub depth_sigma: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            conf_scale: 8.0,
            planted_scale: 1.0,
            rot_sigma: 0.0,
            trans_sigma: 0.0,
            depth_sigma: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        let ok = self.conf_scale.is_finite()
            && self.conf_scale >= 0.0
            && self.planted_scale.is_finite()
            && self.planted_scale > 0.0
            && [self.rot_sigma, self.trans_sigma, self.depth_sigma]
                .iter()
                .all(|s| s.is_finite() && *s >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(EstimatorError::Unavailable(format!("invalid oracle configuration {self:?}")))
        }
    }
}

/// Scene plus the camera pose of every frame it can answer for.
#[derive(Debug, Clone)]
pub struct GroundTruthIndex {
    pub scene: SceneSpec,
    pub poses: HashMap<FrameId, CameraPose>,
}

impl GroundTruthIndex {
    pub fn new(scene: SceneSpec, poses: impl IntoIterator<Item = (FrameId, CameraPose)>) -> Self {
        Self {
            scene,
            poses: poses.into_iter().collect(),
        }
    }

    pub fn pose(&self, id: &FrameId) -> Result<&CameraPose, EstimatorError> {
        self.poses
            .get(id)
            .ok_or_else(|| EstimatorError::UnknownFrame(id.clone()))
    }
}

fn view_seed(root: u64, salt: u64, views: &[&PerspectiveView]) -> u64 {
    let mut parts = vec![salt];
    for v in views {
        parts.extend([
            seed::hash_str(&v.source.video_id),
            v.source.timestamp_ms,
            v.angles.pitch().to_bits(),
            v.angles.yaw().to_bits(),
            v.angles.fov().to_bits(),
        ]);
    }
    seed::derive(root, &parts)
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated finite and non-negative")
}

/// Answers a pose query from ground truth.
///
/// Confidence is `conf_scale` times the fraction of co-visible pixels in each
/// pixel's 3x3 neighbourhood (clipped at the image border). Pointmap entries
/// are surface points in camera-`a` coordinates divided by the planted scale.
pub fn oracle_estimate(
    scene: &SceneSpec,
    cam_a: &CameraPose,
    cam_b: &CameraPose,
    view_a: &PerspectiveView,
    view_b: &PerspectiveView,
    cfg: &OracleConfig,
) -> Result<PoseEstimate, EstimatorError> {
    cfg.validate()?;
    let (h, w) = (view_a.height(), view_a.width());
    if (view_b.height(), view_b.width()) != (h, w) {
        return Err(EstimatorError::DimensionMismatch {
            a: (h, w),
            b: (view_b.height(), view_b.width()),
        });
    }
    let va = ViewCamera::new(cam_a, &view_a.angles, h, w);
    let vb = ViewCamera::new(cam_b, &view_b.angles, h, w);
    let origin = va.origin();
    let s = cfg.planted_scale;

    let mut visible = Grid::filled(h, w, false);
    let mut points = Grid::filled(h, w, Vector3::zeros());
    for row in 0..h {
        for col in 0..w {
            let ray = va.world_ray(col as f64 + 0.5, row as f64 + 0.5);
            let Some(t) = scene.hit_distance(&origin, &ray) else {
                return Err(EstimatorError::InvariantViolation(format!(
                    "ray at pixel ({row}, {col}) of {} escapes the scene",
                    view_a.source
                )));
            };
            let point = origin + ray * t;
            *visible.get_mut(row, col) = vb.sees(scene, &point);
            let local = va.world_from_cam.inverse_transform_point(&Point3::from(point));
            *points.get_mut(row, col) = local.coords / s;
        }
    }

    let confidence = Grid::from_fn(h, w, |row, col| {
        let (mut seen, mut total) = (0u32, 0u32);
        for r in row.saturating_sub(1)..(row + 2).min(h) {
            for c in col.saturating_sub(1)..(col + 2).min(w) {
                total += 1;
                seen += u32::from(*visible.get(r, c));
            }
        }
        cfg.conf_scale * f64::from(seen) / f64::from(total)
    });

    let rel = vb.world_from_cam.inverse() * va.world_from_cam;
    let mut rotation = rel.rotation;
    let mut translation = rel.translation.vector / s;
    if cfg.rot_sigma > 0.0 || cfg.trans_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(view_seed(cfg.seed, 1, &[view_a, view_b]));
        let (nr, nt) = (normal(cfg.rot_sigma), normal(cfg.trans_sigma));
        let axis_angle = Vector3::from_fn(|_, _| nr.sample(&mut rng));
        rotation = UnitQuaternion::from_scaled_axis(axis_angle) * rotation;
        translation += Vector3::from_fn(|_, _| nt.sample(&mut rng));
    }

    Ok(PoseEstimate {
        pose: RelativePose {
            rotation,
            translation,
            scale_state: ScaleState::Raw,
        },
        confidence: ConfidenceMap::new(confidence)?,
        pointmap: PointMap::new(points)?,
    })
}

/// Ground-truth z-depth of a view in meters, optionally with multiplicative
/// lognormal noise.
pub fn oracle_depth(
    scene: &SceneSpec,
    cam: &CameraPose,
    view: &PerspectiveView,
    cfg: &OracleConfig,
) -> Result<DepthMap, EstimatorError> {
    cfg.validate()?;
    let (h, w) = (view.height(), view.width());
    let vc = ViewCamera::new(cam, &view.angles, h, w);
    let origin = vc.origin();
    let mut depth = Grid::filled(h, w, 0.0);
    for row in 0..h {
        for col in 0..w {
            let ray_cam = vc.geometry.pixel_ray(row, col);
            let ray = vc.world_ray(col as f64 + 0.5, row as f64 + 0.5);
            let hit = scene.raycast(&origin, &ray).ok_or_else(|| {
                EstimatorError::InvariantViolation(format!(
                    "ray at pixel ({row}, {col}) of {} escapes the scene",
                    view.source
                ))
            })?;
            *depth.get_mut(row, col) = hit.distance / ray_cam.norm();
        }
    }
    if cfg.depth_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(view_seed(cfg.seed, 2, &[view]));
        let n = normal(cfg.depth_sigma);
        for d in depth.as_mut_slice() {
            *d *= n.sample(&mut rng).exp();
        }
    }
    DepthMap::new(depth).map_err(|e| EstimatorError::InvariantViolation(e.to_string()))
}

/// Pose estimator answering from a [`GroundTruthIndex`].
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    truth: Arc<GroundTruthIndex>,
    cfg: OracleConfig,
}

impl OracleEstimator {
    pub fn new(truth: Arc<GroundTruthIndex>, cfg: OracleConfig) -> Self {
        Self { truth, cfg }
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }
}

impl PoseEstimator for OracleEstimator {
    fn estimate(&self, a: &PerspectiveView, b: &PerspectiveView) -> Result<PoseEstimate, EstimatorError> {
        let cam_a = self.truth.pose(&a.source)?;
        let cam_b = self.truth.pose(&b.source)?;
        oracle_estimate(&self.truth.scene, cam_a, cam_b, a, b, &self.cfg)
    }
}

/// Depth estimator answering from a [`GroundTruthIndex`].
#[derive(Debug, Clone)]
pub struct OracleDepthEstimator {
    truth: Arc<GroundTruthIndex>,
    cfg: OracleConfig,
}

impl OracleDepthEstimator {
    pub fn new(truth: Arc<GroundTruthIndex>, cfg: OracleConfig) -> Self {
        Self { truth, cfg }
    }
}

impl DepthEstimator for OracleDepthEstimator {
    fn estimate_depth(&self, view: &PerspectiveView) -> Result<DepthMap, EstimatorError> {
        let cam = self.truth.pose(&view.source)?;
        oracle_depth(&self.truth.scene, cam, view, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{checked_estimate, mean_confidence};
    use crate::projection::ViewAngles;
    use crate::synth::{
        covisibility, make_trajectory, relative_pose, render_perspective, TrajectoryKind,
    };
    use image::RgbImage;
    use std::f64::consts::{FRAC_PI_2, PI};

    const N: usize = 24;

    fn view(id: &FrameId, pitch: f64, yaw: f64) -> PerspectiveView {
        PerspectiveView {
            source: id.clone(),
            angles: ViewAngles::new(pitch, yaw, FRAC_PI_2).unwrap(),
            image: RgbImage::new(N as u32, N as u32),
        }
    }

    fn fixture(kind: TrajectoryKind) -> (SceneSpec, Vec<CameraPose>, Vec<FrameId>) {
        let scene = SceneSpec::hall();
        let poses = make_trajectory(&scene, 12, kind, 1.0).unwrap();
        let ids = (0..poses.len()).map(|k| FrameId::new("v", k as u64 * 1000)).collect();
        (scene, poses, ids)
    }

    #[test]
    fn identical_views_give_identity() {
        let (scene, poses, ids) = fixture(TrajectoryKind::Line);
        let v = view(&ids[0], 0.0, 0.3);
        let est = oracle_estimate(&scene, &poses[0], &poses[0], &v, &v, &OracleConfig::default()).unwrap();
        assert!(est.pose.rotation.angle() < 1e-12);
        assert!(est.pose.translation.norm() < 1e-12);
        assert_eq!(mean_confidence(&est.confidence).unwrap(), 8.0);
    }

    #[test]
    fn zero_noise_pose_matches_ground_truth_with_planted_scale() {
        let (scene, poses, ids) = fixture(TrajectoryKind::Line);
        let (a, b) = (view(&ids[2], 0.0, 0.0), view(&ids[4], 0.1, 0.2));
        let cfg = OracleConfig {
            planted_scale: 2.0,
            ..Default::default()
        };
        let est = oracle_estimate(&scene, &poses[2], &poses[4], &a, &b, &cfg).unwrap();
        // independent: express view frames through the pano pose composition
        let va = ViewCamera::new(&poses[2], &a.angles, N, N);
        let vb = ViewCamera::new(&poses[4], &b.angles, N, N);
        let pano_rel = relative_pose(&poses[2], &poses[4]);
        let la = poses[2].isometry().inverse() * va.world_from_cam;
        let lb = poses[4].isometry().inverse() * vb.world_from_cam;
        let truth = lb.inverse() * pano_rel * la;
        assert!(est.pose.rotation.angle_to(&truth.rotation) < 1e-9);
        let t = truth.translation.vector;
        assert!((est.pose.translation * 2.0 - t).norm() < 1e-9);
        assert!((t.norm() - 2.0).abs() < 1e-9, "1 m/s for two frames");
    }

    #[test]
    fn pointmap_depth_is_truth_over_planted_scale() {
        let (scene, poses, ids) = fixture(TrajectoryKind::Line);
        let a = view(&ids[3], 0.0, PI);
        let cfg = OracleConfig {
            planted_scale: 2.0,
            ..Default::default()
        };
        let est = oracle_estimate(&scene, &poses[3], &poses[3], &a, &a, &cfg).unwrap();
        let vc = ViewCamera::new(&poses[3], &a.angles, N, N);
        let (_, depth) = render_perspective(&scene, &vc, 1);
        for (p, d) in est.pointmap.grid().as_slice().iter().zip(depth.as_slice()) {
            assert!((p.z * 2.0 - d).abs() < 1e-9 * d);
        }
        let od = oracle_depth(&scene, &poses[3], &a, &cfg).unwrap();
        assert_eq!(od.grid().as_slice(), depth.as_slice());
    }

    #[test]
    fn disjoint_views_fall_below_threshold() {
        let (scene, poses, ids) = fixture(TrajectoryKind::Line);
        let (a, b) = (view(&ids[5], 0.0, 0.0), view(&ids[5], 0.0, PI));
        let va = ViewCamera::new(&poses[5], &a.angles, N, N);
        let vb = ViewCamera::new(&poses[5], &b.angles, N, N);
        assert_eq!(covisibility(&scene, &va, &vb, 1024, 1), 0.0);
        let est = oracle_estimate(&scene, &poses[5], &poses[5], &a, &b, &OracleConfig::default()).unwrap();
        assert!(mean_confidence(&est.confidence).unwrap() < 4.0);
    }

    #[test]
    fn swapped_estimates_compose_to_identity() {
        let (scene, poses, ids) = fixture(TrajectoryKind::Loop);
        let (a, b) = (view(&ids[1], 0.0, FRAC_PI_2), view(&ids[3], -0.1, 0.4));
        let cfg = OracleConfig::default();
        let ab = oracle_estimate(&scene, &poses[1], &poses[3], &a, &b, &cfg).unwrap();
        let ba = oracle_estimate(&scene, &poses[3], &poses[1], &b, &a, &cfg).unwrap();
        let id = ab.pose.then(&ba.pose);
        assert!(id.rotation.angle() < 1e-6);
        assert!(id.translation.norm() < 1e-6);
    }

    #[test]
    fn chained_estimates_reproduce_end_to_end_pose() {
        let (scene, poses, ids) = fixture(TrajectoryKind::Loop);
        let cfg = OracleConfig::default();
        let views: Vec<_> = ids.iter().map(|id| view(id, 0.0, 0.0)).collect();
        let mut acc = RelativePose::identity(ScaleState::Raw);
        for k in 0..poses.len() - 1 {
            let est = oracle_estimate(&scene, &poses[k], &poses[k + 1], &views[k], &views[k + 1], &cfg).unwrap();
            acc = acc.then(&est.pose);
        }
        let last = poses.len() - 1;
        let direct = oracle_estimate(&scene, &poses[0], &poses[last], &views[0], &views[last], &cfg).unwrap();
        assert!(acc.rotation.angle_to(&direct.pose.rotation) < 1e-6);
        assert!((acc.translation - direct.pose.translation).norm() < 1e-6);
    }

    #[test]
    fn noise_is_seeded_per_call() {
        let (scene, poses, ids) = fixture(TrajectoryKind::Line);
        let truth = Arc::new(GroundTruthIndex::new(scene, ids.iter().cloned().zip(poses.iter().copied())));
        let cfg = OracleConfig {
            rot_sigma: 0.01,
            trans_sigma: 0.01,
            seed: 9,
            ..Default::default()
        };
        let est = OracleEstimator::new(truth, cfg);
        let (a, b) = (view(&ids[0], 0.0, 0.0), view(&ids[1], 0.0, 0.0));
        let first = checked_estimate(&est, &a, &b).unwrap();
        let second = checked_estimate(&est, &a, &b).unwrap();
        assert_eq!(first, second);
        let other = checked_estimate(&est, &a, &view(&ids[2], 0.0, 0.0)).unwrap();
        assert_ne!(first.pose.rotation, other.pose.rotation);
        assert!(first.pose.rotation.angle() > 0.0);
    }

    #[test]
    fn unknown_frame_is_reported() {
        let (scene, poses, ids) = fixture(TrajectoryKind::Line);
        let truth = Arc::new(GroundTruthIndex::new(scene, ids.iter().cloned().zip(poses)));
        let est = OracleEstimator::new(truth, OracleConfig::default());
        let stray = view(&FrameId::new("other", 0), 0.0, 0.0);
        assert!(matches!(
            est.estimate(&stray, &stray),
            Err(EstimatorError::UnknownFrame(_))
        ));
    }

    #[test]
    fn spherical_room_depth_is_range_times_cosine() {
        let scene = SceneSpec::spherical_room(3.0);
        let cam = CameraPose::at(Vector3::zeros());
        let v = view(&FrameId::new("s", 0), 0.0, 1.0);
        let d = oracle_depth(&scene, &cam, &v, &OracleConfig::default()).unwrap();
        let g = v.geometry();
        for row in 0..N {
            for col in 0..N {
                let ray = g.pixel_ray(row, col);
                let range = d.grid().get(row, col) * ray.norm() / ray.z;
                assert!((range - 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lognormal_depth_noise_stays_in_band() {
        let scene = SceneSpec::hall();
        let cam = CameraPose::at(Vector3::new(0.0, 0.0, 1.5));
        let v = PerspectiveView {
            image: RgbImage::new(64, 64),
            ..view(&FrameId::new("n", 0), 0.0, 0.0)
        };
        let clean = oracle_depth(&scene, &cam, &v, &OracleConfig::default()).unwrap();
        let cfg = OracleConfig {
            depth_sigma: 0.05,
            seed: 4,
            ..Default::default()
        };
        let noisy = oracle_depth(&scene, &cam, &v, &cfg).unwrap();
        let inside = noisy
            .grid()
            .as_slice()
            .iter()
            .zip(clean.grid().as_slice())
            .filter(|(n, c)| (0.8..=1.25).contains(&(*n / *c)))
            .count();
        assert!(inside as f64 >= 0.99 * (64.0 * 64.0));
    }
}
