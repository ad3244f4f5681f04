//! End-to-end stages over on-disk frames and manifests: synthetic fixture
//! generation, windowed search, propagation and calibration.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{ImageBuffer, Luma};
use log::{info, warn};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_graph, connected_components, frame_pair, propagate, FramePair, GraphError};
use crate::ingest::{frame_path, list_timestamps, list_videos, load_frame, IngestError};
use crate::manifest::{ManifestError, ManifestRecord};
use crate::pose::{
    checked_estimate, DepthEstimator, EstimatorError, GroundTruthIndex, OracleConfig, OracleDepthEstimator,
    OracleEstimator, PoseEstimator, RemoteConfig, RemoteEstimator, ScaleState,
};
use crate::projection::FrameId;
use crate::raster::{save_png, RasterError};
use crate::scale::{calibrate_record, ScaleError};
use crate::search::{
    evaluate_all, subsample, translation_filter, window_frame_pairs, window_pairs, with_workers,
    CorrespondenceRecord, FrameStore, PairOutcome, Provenance, SearchConfig, SearchError, ViewConfig,
};
use crate::synth::{make_trajectory, render_equirect_supersampled, CameraPose, SceneSpec, SynthError, TrajectoryKind};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("manifest record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("manifest record {index} is already metric")]
    AlreadyMetric { index: usize },
    #[error("{errors} of {total} evaluations failed")]
    TooManyErrors { errors: usize, total: usize, external: bool },
}

impl PipelineError {
    /// Whether the failure came from an external estimator service.
    pub fn is_external(&self) -> bool {
        match self {
            Self::Estimator(e) => e.is_external(),
            Self::TooManyErrors { external, .. } => *external,
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Which estimator answers pose or depth queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSelection {
    /// Ground truth from a synthetic fixture sidecar.
    Oracle { groundtruth: PathBuf },
    Remote {
        #[serde(flatten)]
        remote: RemoteConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub search: SearchConfig,
    pub view: ViewConfig,
    pub estimator: Option<EstimatorSelection>,
    /// Defaults to the pose estimator's source.
    pub depth_estimator: Option<EstimatorSelection>,
    /// Components above this many frames only propagate over pairs at graph
    /// distance 2 to 4.
    pub k_max: usize,
    pub hamming_max: u32,
    pub decoder_cmd: String,
    /// Worker threads; 0 means one per logical CPU.
    pub workers: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            view: ViewConfig::default(),
            estimator: None,
            depth_estimator: None,
            k_max: 50,
            hamming_max: 10,
            decoder_cmd: String::new(),
            workers: 0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.search.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.view.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.k_max < 2 {
            return Err(PipelineError::Config("k_max must be at least 2".into()));
        }
        Ok(())
    }

    fn pose_selection(&self) -> Result<&EstimatorSelection, PipelineError> {
        self.estimator
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no estimator selected".into()))
    }

    /// Builds the configured pose estimator.
    pub fn pose_estimator(&self) -> Result<Box<dyn PoseEstimator>, PipelineError> {
        Ok(match self.pose_selection()? {
            EstimatorSelection::Oracle { groundtruth } => {
                let gt = GroundTruth::read(groundtruth)?;
                Box::new(OracleEstimator::new(Arc::new(gt.index()?), gt.oracle_config(self.seed)))
            }
            EstimatorSelection::Remote { remote } => Box::new(RemoteEstimator::new(remote.clone())?),
        })
    }

    /// Builds the configured depth estimator.
    pub fn depth_estimator(&self) -> Result<Box<dyn DepthEstimator>, PipelineError> {
        let sel = match &self.depth_estimator {
            Some(s) => s,
            None => self.pose_selection()?,
        };
        Ok(match sel {
            EstimatorSelection::Oracle { groundtruth } => {
                let gt = GroundTruth::read(groundtruth)?;
                Box::new(OracleDepthEstimator::new(Arc::new(gt.index()?), gt.oracle_config(self.seed)))
            }
            EstimatorSelection::Remote { remote } => Box::new(RemoteEstimator::new(remote.clone())?),
        })
    }
}

/// One frame of a synthetic fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFrame {
    pub timestamp_ms: u64,
    /// Meters, world frame.
    pub position: [f64; 3],
    pub orientation_wxyz: [f64; 4],
}

/// Sidecar describing a synthetic fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub video_id: String,
    pub scene: SceneSpec,
    pub trajectory: TrajectoryKind,
    pub speed: f64,
    pub pano_width: u32,
    pub pano_height: u32,
    /// Directory of panoramas, relative to the sidecar.
    pub frames_dir: String,
    /// Directory of 16-bit millimeter range images, relative to the sidecar.
    pub depth_dir: String,
    /// Oracle behaviour, including the planted scale.
    pub oracle: OracleConfig,
    pub frames: Vec<GroundTruthFrame>,
}

pub const GROUND_TRUTH_FILE: &str = "groundtruth.json";

impl GroundTruth {
    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| PipelineError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn frame_ids(&self) -> Vec<FrameId> {
        self.frames
            .iter()
            .map(|f| FrameId::new(self.video_id.clone(), f.timestamp_ms))
            .collect()
    }

    pub fn poses(&self) -> Result<Vec<CameraPose>, PipelineError> {
        self.frames
            .iter()
            .map(|f| {
                let [w, x, y, z] = f.orientation_wxyz;
                let q = Quaternion::new(w, x, y, z);
                if (q.norm() - 1.0).abs() > 1e-9 {
                    return Err(PipelineError::Config(format!(
                        "ground-truth orientation at {} ms is not unit",
                        f.timestamp_ms
                    )));
                }
                Ok(CameraPose::new(Vector3::from(f.position), UnitQuaternion::new_unchecked(q)))
            })
            .collect()
    }

    pub fn index(&self) -> Result<GroundTruthIndex, PipelineError> {
        Ok(GroundTruthIndex::new(self.scene.clone(), self.frame_ids().into_iter().zip(self.poses()?)))
    }

    /// Oracle settings with the noise seed taken from the pipeline.
    pub fn oracle_config(&self, seed: u64) -> OracleConfig {
        OracleConfig { seed, ..self.oracle }
    }
}

/// Parameters of a synthetic fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub scene: SceneSpec,
    pub video_id: String,
    pub frames: usize,
    pub trajectory: TrajectoryKind,
    pub speed: f64,
    pub pano_width: u32,
    /// Rays per pixel edge when rendering panoramas.
    pub supersample: u32,
    pub oracle: OracleConfig,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::hall(),
            video_id: "synth".into(),
            frames: 60,
            trajectory: TrajectoryKind::Line,
            speed: 1.0,
            pano_width: 256,
            supersample: 1,
            oracle: OracleConfig::default(),
        }
    }
}

/// Renders a fixture into `out_dir`: `frames/{video}/{ts}.png`,
/// `depth/{video}/{ts}.png` and the `groundtruth.json` sidecar. Frames are
/// one second apart.
pub fn write_fixture(spec: &FixtureSpec, out_dir: &Path) -> Result<GroundTruth, PipelineError> {
    spec.scene.validate()?;
    let poses = make_trajectory(&spec.scene, spec.frames, spec.trajectory, spec.speed)?;
    let (w, h) = (spec.pano_width, spec.pano_width / 2);
    let frames_dir = out_dir.join("frames").join(&spec.video_id);
    let depth_dir = out_dir.join("depth").join(&spec.video_id);
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    fs::create_dir_all(&depth_dir).map_err(io_err(&depth_dir))?;
    let frames: Vec<GroundTruthFrame> = poses
        .par_iter()
        .enumerate()
        .map(|(k, pose)| {
            let ts = k as u64 * 1000;
            let (image, range) = render_equirect_supersampled(&spec.scene, pose, w, h, spec.supersample)?;
            save_png(&image, &frames_dir.join(format!("{ts}.png")))?;
            let mm: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
                let d = range.get(y as usize, x as usize) * 1000.0;
                Luma([d.round().clamp(0.0, f64::from(u16::MAX)) as u16])
            });
            let depth_path = depth_dir.join(format!("{ts}.png"));
            mm.save(&depth_path).map_err(|source| RasterError::Write {
                path: depth_path.display().to_string(),
                source,
            })?;
            let q = pose.orientation.quaternion();
            Ok(GroundTruthFrame {
                timestamp_ms: ts,
                position: pose.position.into(),
                orientation_wxyz: [q.w, q.i, q.j, q.k],
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let gt = GroundTruth {
        video_id: spec.video_id.clone(),
        scene: spec.scene.clone(),
        trajectory: spec.trajectory,
        speed: spec.speed,
        pano_width: w,
        pano_height: h,
        frames_dir: "frames".into(),
        depth_dir: "depth".into(),
        oracle: spec.oracle,
        frames,
    };
    let path = out_dir.join(GROUND_TRUTH_FILE);
    let text = serde_json::to_string_pretty(&gt).expect("ground truth serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(gt)
}

/// Subsampled frame ids of every video under `frames_root`, each list in
/// timestamp order.
pub fn discover_frames(frames_root: &Path, fps: f64) -> Result<BTreeMap<String, Vec<FrameId>>, PipelineError> {
    if !frames_root.is_dir() {
        return Err(PipelineError::Io {
            path: frames_root.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "frames directory not found"),
        });
    }
    let mut out = BTreeMap::new();
    for video in list_videos(frames_root)? {
        let ts = subsample(&list_timestamps(&frames_root.join(&video))?, fps);
        out.insert(video.clone(), ts.into_iter().map(|t| FrameId::new(video.clone(), t)).collect());
    }
    Ok(out)
}

/// Loads and validates the listed panoramas.
pub fn load_frames(frames_root: &Path, ids: &[FrameId]) -> Result<FrameStore, PipelineError> {
    let frames = ids
        .par_iter()
        .map(|id| load_frame(frames_root, id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrameStore::new(frames))
}

/// Evaluations of a stage plus the accepted records they produced.
#[derive(Debug, Default)]
pub struct StageOutput {
    pub outcomes: Vec<PairOutcome>,
    pub records: Vec<CorrespondenceRecord>,
}

impl StageOutput {
    pub fn errors(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }

    pub fn log_lines(&self) -> Vec<String> {
        self.outcomes.iter().map(PairOutcome::log_line).collect()
    }

    fn push(&mut self, outcomes: Vec<PairOutcome>) {
        for o in &outcomes {
            match &o.result {
                Ok(ev) => self.records.extend(ev.record.clone()),
                Err(e) => warn!("{}: {e}", o.pair),
            }
        }
        self.outcomes.extend(outcomes);
    }

    /// Fails when more than 10% of evaluations errored.
    pub fn check_error_rate(&self) -> Result<(), PipelineError> {
        let errors = self.errors();
        let total = self.outcomes.len();
        if errors * 10 > total {
            let external = self.outcomes.iter().any(|o| {
                matches!(&o.result, Err(SearchError::Estimator { source, .. }) if source.is_external())
            });
            return Err(PipelineError::TooManyErrors { errors, total, external });
        }
        Ok(())
    }
}

/// Subsample, cut cardinal views, pair frames within the window, evaluate and
/// refine. Records are raw-scale and carry window provenance.
pub fn run_search<E: PoseEstimator + ?Sized>(
    frames_root: &Path,
    cfg: &PipelineConfig,
    estimator: &E,
) -> Result<StageOutput, PipelineError> {
    cfg.validate()?;
    let videos = discover_frames(frames_root, cfg.search.fps)?;
    let mut out = StageOutput::default();
    for (video, ids) in &videos {
        let pairs = window_pairs(ids, &cfg.search, &cfg.view)?;
        info!("{video}: {} frames, {} candidates", ids.len(), pairs.len());
        let frames = load_frames(frames_root, ids)?;
        let outcomes = with_workers(cfg.workers, || {
            evaluate_all(pairs, &frames, estimator, &cfg.search, &cfg.view, Provenance::Window)
        })?;
        out.push(outcomes);
    }
    Ok(out)
}

/// Converts manifest lines to records, reporting the offending index.
pub fn manifest_records(manifest: &[ManifestRecord]) -> Result<Vec<CorrespondenceRecord>, PipelineError> {
    manifest
        .iter()
        .enumerate()
        .map(|(index, m)| m.to_record().map_err(|message| PipelineError::Record { index, message }))
        .collect()
}

/// Evaluates frame pairs that share a connected component but were never
/// evaluated: neither inside the search window of the subsampled frames nor
/// already present in the manifest.
pub fn run_propagate<E: PoseEstimator + ?Sized>(
    records: &[CorrespondenceRecord],
    frames_root: &Path,
    cfg: &PipelineConfig,
    estimator: &E,
) -> Result<StageOutput, PipelineError> {
    cfg.validate()?;
    let videos = discover_frames(frames_root, cfg.search.fps)?;
    let mut by_video: BTreeMap<&str, Vec<CorrespondenceRecord>> = BTreeMap::new();
    for r in records {
        by_video.entry(&r.pair.a.frame.video_id).or_default().push(r.clone());
    }
    let mut out = StageOutput::default();
    for (video, recs) in by_video {
        let ids = videos.get(video).cloned().unwrap_or_default();
        let mut evaluated: HashSet<FramePair> = window_frame_pairs(ids.len(), cfg.search.window)
            .into_iter()
            .map(|(i, j)| frame_pair(&ids[i], &ids[j]))
            .collect();
        evaluated.extend(recs.iter().map(|r| frame_pair(&r.pair.a.frame, &r.pair.b.frame)));
        let graph = build_graph(&recs)?;
        for component in connected_components(&graph) {
            let frames = load_frames(frames_root, &component)?;
            let prop = with_workers(cfg.workers, || {
                propagate(&graph, &component, &evaluated, &frames, estimator, &cfg.search, &cfg.view, cfg.k_max)
            })??;
            info!(
                "{video}: component of {} frames, {} new frame pairs",
                component.len(),
                prop.frame_pairs.len()
            );
            out.push(prop.outcomes);
        }
    }
    Ok(out)
}

/// Fits a metric scale for every raw record and drops records whose metric
/// baseline is below `min_translation`.
pub fn run_calibrate<P, D>(
    records: &[CorrespondenceRecord],
    frames_root: &Path,
    cfg: &PipelineConfig,
    pose_estimator: &P,
    depth_estimator: &D,
) -> Result<Vec<CorrespondenceRecord>, PipelineError>
where
    P: PoseEstimator + ?Sized,
    D: DepthEstimator + ?Sized,
{
    cfg.validate()?;
    if let Some(index) = records.iter().position(|r| r.pose.scale_state == ScaleState::Metric) {
        return Err(PipelineError::AlreadyMetric { index });
    }
    let mut ids: Vec<FrameId> = records
        .iter()
        .flat_map(|r| [r.pair.a.frame.clone(), r.pair.b.frame.clone()])
        .collect();
    ids.sort();
    ids.dedup();
    for id in &ids {
        if !frame_path(frames_root, id).is_file() {
            return Err(SearchError::MissingFrame(id.clone()).into());
        }
    }
    let frames = load_frames(frames_root, &ids)?;
    let calibrated = with_workers(cfg.workers, || {
        records
            .par_iter()
            .map(|r| -> Result<CorrespondenceRecord, PipelineError> {
                let va = frames.view(&r.pair.a, &cfg.view)?;
                let vb = frames.view(&r.pair.b, &cfg.view)?;
                let est = checked_estimate(pose_estimator, &va, &vb)?;
                calibrate_record(r, depth_estimator, &est, &va).map_err(|e| match e {
                    ScaleError::Record { source, .. } if matches!(*source, ScaleError::Depth(_)) => match *source {
                        ScaleError::Depth(d) => PipelineError::Estimator(d),
                        _ => unreachable!(),
                    },
                    other => PipelineError::Record {
                        index: 0,
                        message: other.to_string(),
                    },
                })
            })
            .collect::<Vec<_>>()
    })?;
    let mut metric = Vec::with_capacity(calibrated.len());
    for (index, r) in calibrated.into_iter().enumerate() {
        metric.push(r.map_err(|e| match e {
            PipelineError::Record { message, .. } => PipelineError::Record { index, message },
            other => other,
        })?);
    }
    Ok(translation_filter(metric, cfg.search.min_translation)?)
}
