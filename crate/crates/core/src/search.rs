//! Windowed correspondence search over the cardinal views of subsampled
//! frames, with confidence filtering and view-angle refinement.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{checked_estimate, mean_confidence, EstimatorError, PoseEstimate, PoseEstimator, RelativePose, ScaleState};
use crate::projection::{cardinal_angles, project, FrameId, PanoFrame, PerspectiveView, ProjectionError, ViewAngles};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("frame {0} is not loaded")]
    MissingFrame(FrameId),
    #[error("estimating {pair}: {source}")]
    Estimator {
        pair: String,
        #[source]
        source: EstimatorError,
    },
    #[error("record {index} is not metric; calibrate before filtering by translation")]
    RawScale { index: usize },
    #[error("failed to build worker pool: {0}")]
    WorkerPool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Frames per second kept by temporal subsampling.
    pub fps: f64,
    /// Number of following frames each frame is paired with.
    pub window: usize,
    /// Minimum mean confidence for acceptance.
    pub tau: f64,
    /// Minimum metric baseline kept after calibration, meters.
    pub min_translation: f64,
    pub refine_iters: usize,
    /// Finite-difference step for refinement gradients, radians.
    pub refine_step: f64,
    /// Refinement step length, radians.
    pub refine_lr: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            fps: 1.0,
            window: 20,
            tau: 4.0,
            min_translation: 0.25,
            refine_iters: 20,
            refine_step: 0.05,
            refine_lr: 0.02,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.into()));
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        // tau may be +inf to reject everything
        if self.tau.is_nan() || self.tau < 0.0 {
            return bad("tau must be non-negative");
        }
        if !(self.min_translation.is_finite() && self.min_translation >= 0.0) {
            return bad("min_translation must be non-negative");
        }
        if self.refine_iters == 0 {
            return bad("refine_iters must be positive");
        }
        if !(self.refine_step.is_finite() && self.refine_step > 0.0 && self.refine_lr.is_finite() && self.refine_lr > 0.0) {
            return bad("refine_step and refine_lr must be positive");
        }
        Ok(())
    }
}

/// Field of view and resolution of extracted perspective views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub fov: f64,
    pub height: u32,
    pub width: u32,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            fov: FRAC_PI_2,
            height: 256,
            width: 256,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(SearchError::InvalidConfig(format!("fov {} outside (0, pi)", self.fov)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(SearchError::InvalidConfig("view dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Pitch range keeping the view clear of the poles.
    pub fn pitch_limit(&self) -> f64 {
        FRAC_PI_2 - self.fov / 2.0
    }
}

/// A view of one frame, identified without its pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRef {
    pub frame: FrameId,
    pub angles: ViewAngles,
}

/// Two views of distinct frames of the same video, earlier frame first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub a: ViewRef,
    pub b: ViewRef,
}

impl CandidatePair {
    pub fn frame_gap_s(&self) -> f64 {
        self.b.frame.timestamp_ms.abs_diff(self.a.frame.timestamp_ms) as f64 / 1000.0
    }

    /// Stable textual identifier used in logs and errors.
    pub fn id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CandidatePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}[{:.6},{:.6}]-{}[{:.6},{:.6}]",
            self.a.frame.video_id,
            self.a.frame.timestamp_ms,
            self.a.angles.yaw(),
            self.a.angles.pitch(),
            self.b.frame.timestamp_ms,
            self.b.angles.yaw(),
            self.b.angles.pitch()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Window,
    Propagated,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Window => "window",
            Self::Propagated => "propagated",
        }
    }
}

/// An accepted view pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceRecord {
    /// View angles after refinement.
    pub pair: CandidatePair,
    pub pose: RelativePose,
    pub mean_conf: f64,
    /// Meters per estimator unit; 1.0 until the record is calibrated.
    pub sigma: f64,
    pub provenance: Provenance,
}

/// Loaded panoramas, keyed by frame.
#[derive(Debug, Clone, Default)]
pub struct FrameStore {
    frames: BTreeMap<FrameId, PanoFrame>,
}

impl FrameStore {
    pub fn new(frames: impl IntoIterator<Item = PanoFrame>) -> Self {
        Self {
            frames: frames.into_iter().map(|f| (f.id().clone(), f)).collect(),
        }
    }

    pub fn insert(&mut self, frame: PanoFrame) {
        self.frames.insert(frame.id().clone(), frame);
    }

    pub fn get(&self, id: &FrameId) -> Option<&PanoFrame> {
        self.frames.get(id)
    }

    /// Frame ids in (video, timestamp) order.
    pub fn ids(&self) -> impl Iterator<Item = &FrameId> {
        self.frames.keys()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Projects the referenced view from its panorama.
    pub fn view(&self, r: &ViewRef, view: &ViewConfig) -> Result<PerspectiveView, SearchError> {
        let pano = self.get(&r.frame).ok_or_else(|| SearchError::MissingFrame(r.frame.clone()))?;
        Ok(project(pano, r.angles, view.height, view.width)?)
    }
}

/// Greedy temporal subsampling: keeps the first timestamp, then each one at
/// least `1000 / fps` ms after the last kept.
pub fn subsample(timestamps: &[u64], fps: f64) -> Vec<u64> {
    let gap = 1000.0 / fps;
    let mut out: Vec<u64> = Vec::new();
    for &t in timestamps {
        match out.last() {
            Some(&last) if ((t - last) as f64) < gap => {}
            _ => out.push(t),
        }
    }
    out
}

/// All 16 cardinal view pairs between two frames.
pub fn frame_pair_candidates(a: &FrameId, b: &FrameId, fov: f64) -> Result<Vec<CandidatePair>, SearchError> {
    let angles = cardinal_angles(fov)?;
    let mut out = Vec::with_capacity(16);
    for aa in angles {
        for ab in angles {
            out.push(CandidatePair {
                a: ViewRef {
                    frame: a.clone(),
                    angles: aa,
                },
                b: ViewRef {
                    frame: b.clone(),
                    angles: ab,
                },
            });
        }
    }
    Ok(out)
}

/// Frame index pairs `(i, j)` with `i < j <= i + window`.
pub fn window_frame_pairs(n: usize, window: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| ((i + 1)..=(i + window).min(n.saturating_sub(1))).map(move |j| (i, j)))
        .collect()
}

/// Candidates for every frame pair inside the window, ordered by
/// `(i, j, yaw_a, yaw_b)`. `frames` must be in timestamp order.
pub fn window_pairs(frames: &[FrameId], cfg: &SearchConfig, view: &ViewConfig) -> Result<Vec<CandidatePair>, SearchError> {
    let mut out = Vec::new();
    for (i, j) in window_frame_pairs(frames.len(), cfg.window) {
        out.extend(frame_pair_candidates(&frames[i], &frames[j], view.fov)?);
    }
    Ok(out)
}

/// Result of evaluating one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean confidence at the unrefined angles.
    pub initial_conf: f64,
    /// Present when the pair cleared the threshold.
    pub record: Option<CorrespondenceRecord>,
    /// Mean confidence after each accepted refinement step, initial value first.
    pub trace: Vec<f64>,
}

/// Output of [`refine_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub pair: CandidatePair,
    pub estimate: PoseEstimate,
    pub mean_conf: f64,
    /// Mean confidence after each accepted step, initial value first.
    pub trace: Vec<f64>,
}

fn estimate_views<E: PoseEstimator + ?Sized>(
    pair: &CandidatePair,
    va: &PerspectiveView,
    vb: &PerspectiveView,
    estimator: &E,
) -> Result<(PoseEstimate, f64), SearchError> {
    let wrap = |source| SearchError::Estimator {
        pair: pair.id(),
        source,
    };
    let est = checked_estimate(estimator, va, vb).map_err(wrap)?;
    let mu = mean_confidence(&est.confidence).map_err(wrap)?;
    Ok((est, mu))
}

fn estimate_pair<E: PoseEstimator + ?Sized>(
    pair: &CandidatePair,
    frames: &FrameStore,
    estimator: &E,
    view: &ViewConfig,
) -> Result<(PoseEstimate, f64), SearchError> {
    let va = frames.view(&pair.a, view)?;
    let vb = frames.view(&pair.b, view)?;
    estimate_views(pair, &va, &vb, estimator)
}

fn with_angles(pair: &CandidatePair, x: [f64; 4], fov: f64) -> Result<CandidatePair, SearchError> {
    Ok(CandidatePair {
        a: ViewRef {
            frame: pair.a.frame.clone(),
            angles: ViewAngles::new(x[0], x[1], fov)?,
        },
        b: ViewRef {
            frame: pair.b.frame.clone(),
            angles: ViewAngles::new(x[2], x[3], fov)?,
        },
    })
}

fn clamp_pitches(mut x: [f64; 4], limit: f64) -> [f64; 4] {
    x[0] = x[0].clamp(-limit, limit);
    x[2] = x[2].clamp(-limit, limit);
    x
}

/// Finite-difference ascent on `(pitch_a, yaw_a, pitch_b, yaw_b)` maximizing
/// mean confidence. Views are re-projected at every trial.
///
/// A trial step is kept only if it strictly raises the mean confidence. After
/// a rejection the step length halves and the gradient is reused; it resets
/// after an acceptance. Stops after `refine_iters` trials or three
/// consecutive rejections.
pub fn refine_pair<E: PoseEstimator + ?Sized>(
    pair: &CandidatePair,
    initial: PoseEstimate,
    initial_conf: f64,
    frames: &FrameStore,
    estimator: &E,
    cfg: &SearchConfig,
    view: &ViewConfig,
) -> Result<Refinement, SearchError> {
    let fov = view.fov;
    let limit = view.pitch_limit();
    let mut x = [pair.a.angles.pitch(), pair.a.angles.yaw(), pair.b.angles.pitch(), pair.b.angles.yaw()];
    let mut best = Refinement {
        pair: pair.clone(),
        estimate: initial,
        mean_conf: initial_conf,
        trace: vec![initial_conf],
    };
    let mut views = (frames.view(&pair.a, view)?, frames.view(&pair.b, view)?);
    let mut grad: Option<[f64; 4]> = None;
    let mut lr = cfg.refine_lr;
    let mut rejects = 0;
    for _ in 0..cfg.refine_iters {
        let g = match grad {
            Some(g) => g,
            None => {
                let mut g = [0.0; 4];
                for k in 0..4 {
                    let mut hi = x;
                    let mut lo = x;
                    hi[k] += cfg.refine_step;
                    lo[k] -= cfg.refine_step;
                    let (hi, lo) = (clamp_pitches(hi, limit), clamp_pitches(lo, limit));
                    let span = hi[k] - lo[k];
                    if span <= 0.0 {
                        continue;
                    }
                    // only the perturbed side needs re-projecting
                    let probe = |x: [f64; 4]| -> Result<f64, SearchError> {
                        let p = with_angles(pair, x, fov)?;
                        let mu = if k < 2 {
                            estimate_views(&p, &frames.view(&p.a, view)?, &views.1, estimator)?.1
                        } else {
                            estimate_views(&p, &views.0, &frames.view(&p.b, view)?, estimator)?.1
                        };
                        Ok(mu)
                    };
                    g[k] = (probe(hi)? - probe(lo)?) / span;
                }
                grad = Some(g);
                g
            }
        };
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let trial_x = clamp_pitches(std::array::from_fn(|k| x[k] + lr * g[k] / norm), limit);
        let trial = with_angles(pair, trial_x, fov)?;
        let trial_views = (frames.view(&trial.a, view)?, frames.view(&trial.b, view)?);
        let (est, mu) = estimate_views(&trial, &trial_views.0, &trial_views.1, estimator)?;
        if mu > best.mean_conf {
            views = trial_views;
            debug!("{pair}: refinement step accepted, mean confidence {mu}");
            x = trial_x;
            best.pair = trial;
            best.estimate = est;
            best.mean_conf = mu;
            best.trace.push(mu);
            grad = None;
            lr = cfg.refine_lr;
            rejects = 0;
        } else {
            rejects += 1;
            lr *= 0.5;
            if rejects == 3 {
                break;
            }
        }
    }
    Ok(best)
}

/// Estimates a candidate, applies the confidence threshold (`mean >= tau`
/// accepts) and refines accepted pairs. Records are raw-scale.
pub fn evaluate_pair<E: PoseEstimator + ?Sized>(
    pair: &CandidatePair,
    frames: &FrameStore,
    estimator: &E,
    cfg: &SearchConfig,
    view: &ViewConfig,
    provenance: Provenance,
) -> Result<Evaluation, SearchError> {
    let (est, mu) = estimate_pair(pair, frames, estimator, view)?;
    if !(mu >= cfg.tau) {
        return Ok(Evaluation {
            initial_conf: mu,
            record: None,
            trace: vec![mu],
        });
    }
    let refined = refine_pair(pair, est, mu, frames, estimator, cfg, view)?;
    Ok(Evaluation {
        initial_conf: mu,
        record: Some(CorrespondenceRecord {
            pair: refined.pair,
            pose: refined.estimate.pose,
            mean_conf: refined.mean_conf,
            sigma: 1.0,
            provenance,
        }),
        trace: refined.trace,
    })
}

/// Outcome of one candidate in a batch run.
#[derive(Debug)]
pub struct PairOutcome {
    pub pair: CandidatePair,
    pub result: Result<Evaluation, SearchError>,
}

impl PairOutcome {
    /// One JSON object describing the evaluation, for line-oriented logs.
    pub fn log_line(&self) -> String {
        let value = match &self.result {
            Ok(ev) => serde_json::json!({
                "candidate": self.pair.id(),
                "mean_conf": ev.initial_conf,
                "accepted": ev.record.is_some(),
                "refined_conf": ev.record.as_ref().map(|r| r.mean_conf),
            }),
            Err(e) => serde_json::json!({
                "candidate": self.pair.id(),
                "mean_conf": null,
                "accepted": false,
                "error": e.to_string(),
            }),
        };
        value.to_string()
    }
}

/// Runs `f` on a pool of `workers` threads (0 means one per logical CPU).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, SearchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SearchError::WorkerPool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Evaluates candidates in parallel on the current rayon pool. Outcomes come
/// back in input order regardless of scheduling.
pub fn evaluate_all<E: PoseEstimator + ?Sized>(
    pairs: Vec<CandidatePair>,
    frames: &FrameStore,
    estimator: &E,
    cfg: &SearchConfig,
    view: &ViewConfig,
    provenance: Provenance,
) -> Vec<PairOutcome> {
    pairs
        .into_par_iter()
        .map(|pair| {
            let result = evaluate_pair(&pair, frames, estimator, cfg, view, provenance);
            PairOutcome { pair, result }
        })
        .collect()
}

/// Keeps metric records whose baseline is at least `min_translation` meters.
pub fn translation_filter(
    records: Vec<CorrespondenceRecord>,
    min_translation: f64,
) -> Result<Vec<CorrespondenceRecord>, SearchError> {
    if let Some(index) = records.iter().position(|r| r.pose.scale_state != ScaleState::Metric) {
        return Err(SearchError::RawScale { index });
    }
    Ok(records
        .into_iter()
        .filter(|r| r.pose.translation.norm() >= min_translation)
        .collect())
}
