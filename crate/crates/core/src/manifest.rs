//! Correspondence manifests: JSON-lines, one accepted view pair per line.
//!
//! Each line is an object with keys in this order:
//!
//! ```text
//! schema_version  integer, currently 1
//! video_id        string
//! frame_a         {"timestamp_ms", "yaw", "pitch", "fov"}, radians
//! frame_b         same shape; frame_a.timestamp_ms < frame_b.timestamp_ms
//! rotation_wxyz   [w, x, y, z], unit norm within 1e-6
//! translation_m   [x, y, z], camera-a to camera-b; meters when scale_state is "metric"
//! mean_conf       mean estimator confidence, >= 0
//! sigma           meters per estimator unit, > 0 (1.0 before calibration)
//! provenance      "window" | "propagated"
//! scale_state     "raw" | "metric"
//! ```
//!
//! Floats are rounded to 9 significant digits and printed in their shortest
//! round-tripping form. Lines are sorted by
//! `(video_id, frame_a.timestamp_ms, frame_b.timestamp_ms, frame_a.yaw, frame_b.yaw)`,
//! ties broken by the full line text, so equal record sets give identical bytes.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::frame_path;
use crate::pose::{RelativePose, ScaleState};
use crate::projection::{FrameId, PanoFrame, ViewAngles};
use crate::raster::load_png;
use crate::search::{CandidatePair, CorrespondenceRecord, Provenance, ViewRef};

pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance on `|q| - 1` for stored rotations.
pub const MANIFEST_QUAT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: unknown schema_version {version}")]
    UnknownSchema { line: usize, version: u32 },
    #[error("line {line}: {message}")]
    Invariant { line: usize, message: String },
    #[error("record {index}: {message}")]
    InvalidRecord { index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub timestamp_ms: u64,
    pub yaw: f64,
    pub pitch: f64,
    pub fov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub schema_version: u32,
    pub video_id: String,
    pub frame_a: ManifestView,
    pub frame_b: ManifestView,
    pub rotation_wxyz: [f64; 4],
    pub translation_m: [f64; 3],
    pub mean_conf: f64,
    pub sigma: f64,
    pub provenance: Provenance,
    pub scale_state: ScaleState,
}

/// Rounds to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

impl ManifestView {
    fn from_view(v: &ViewRef) -> Self {
        Self {
            timestamp_ms: v.frame.timestamp_ms,
            yaw: v.angles.yaw(),
            pitch: v.angles.pitch(),
            fov: v.angles.fov(),
        }
    }

    fn normalized(&self) -> Self {
        Self {
            timestamp_ms: self.timestamp_ms,
            yaw: round_sig9(self.yaw),
            pitch: round_sig9(self.pitch),
            fov: round_sig9(self.fov),
        }
    }

    fn angles(&self) -> Result<ViewAngles, String> {
        ViewAngles::new(self.pitch, self.yaw, self.fov).map_err(|e| e.to_string())
    }
}

impl ManifestRecord {
    pub fn from_record(r: &CorrespondenceRecord) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            video_id: r.pair.a.frame.video_id.clone(),
            frame_a: ManifestView::from_view(&r.pair.a),
            frame_b: ManifestView::from_view(&r.pair.b),
            rotation_wxyz: r.pose.rotation_wxyz(),
            translation_m: r.pose.translation.into(),
            mean_conf: r.mean_conf,
            sigma: r.sigma,
            provenance: r.provenance,
            scale_state: r.pose.scale_state,
        }
    }

    pub fn to_record(&self) -> Result<CorrespondenceRecord, String> {
        self.validate()?;
        let frame = |v: &ManifestView| -> Result<ViewRef, String> {
            Ok(ViewRef {
                frame: FrameId::new(self.video_id.clone(), v.timestamp_ms),
                angles: v.angles()?,
            })
        };
        let [w, x, y, z] = self.rotation_wxyz;
        Ok(CorrespondenceRecord {
            pair: CandidatePair {
                a: frame(&self.frame_a)?,
                b: frame(&self.frame_b)?,
            },
            pose: RelativePose {
                rotation: UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
                translation: Vector3::from(self.translation_m),
                scale_state: self.scale_state,
            },
            mean_conf: self.mean_conf,
            sigma: self.sigma,
            provenance: self.provenance,
        })
    }

    /// Copy with every float rounded to 9 significant digits.
    pub fn normalized(&self) -> Self {
        Self {
            frame_a: self.frame_a.normalized(),
            frame_b: self.frame_b.normalized(),
            rotation_wxyz: self.rotation_wxyz.map(round_sig9),
            translation_m: self.translation_m.map(round_sig9),
            mean_conf: round_sig9(self.mean_conf),
            sigma: round_sig9(self.sigma),
            ..self.clone()
        }
    }

    pub fn frame_ids(&self) -> [FrameId; 2] {
        [
            FrameId::new(self.video_id.clone(), self.frame_a.timestamp_ms),
            FrameId::new(self.video_id.clone(), self.frame_b.timestamp_ms),
        ]
    }

    /// Checks every record invariant except the schema version.
    pub fn validate(&self) -> Result<(), String> {
        let floats = self
            .rotation_wxyz
            .iter()
            .chain(&self.translation_m)
            .chain([&self.mean_conf, &self.sigma])
            .chain([&self.frame_a.yaw, &self.frame_a.pitch, &self.frame_a.fov])
            .chain([&self.frame_b.yaw, &self.frame_b.pitch, &self.frame_b.fov]);
        for v in floats {
            if !v.is_finite() {
                return Err(format!("non-finite value {v}"));
            }
        }
        if self.video_id.is_empty() {
            return Err("empty video_id".into());
        }
        let [w, x, y, z] = self.rotation_wxyz;
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > MANIFEST_QUAT_TOL {
            return Err(format!("rotation quaternion has norm {norm}"));
        }
        if !(self.sigma > 0.0) {
            return Err(format!("sigma {} is not positive", self.sigma));
        }
        if !(self.mean_conf >= 0.0) {
            return Err(format!("mean_conf {} is negative", self.mean_conf));
        }
        if self.frame_a.timestamp_ms >= self.frame_b.timestamp_ms {
            return Err(format!(
                "frame_a timestamp {} is not before frame_b timestamp {}",
                self.frame_a.timestamp_ms, self.frame_b.timestamp_ms
            ));
        }
        self.frame_a.angles()?;
        self.frame_b.angles()?;
        Ok(())
    }

    fn sort_key_cmp(&self, other: &Self) -> Ordering {
        self.video_id
            .cmp(&other.video_id)
            .then(self.frame_a.timestamp_ms.cmp(&other.frame_a.timestamp_ms))
            .then(self.frame_b.timestamp_ms.cmp(&other.frame_b.timestamp_ms))
            .then(self.frame_a.yaw.total_cmp(&other.frame_a.yaw))
            .then(self.frame_b.yaw.total_cmp(&other.frame_b.yaw))
    }
}

/// Serializes records into manifest bytes (normalized, validated, sorted).
pub fn encode_manifest(records: &[ManifestRecord]) -> Result<Vec<u8>, ManifestError> {
    let mut lines = Vec::with_capacity(records.len());
    for (index, r) in records.iter().enumerate() {
        if r.schema_version != SCHEMA_VERSION {
            return Err(ManifestError::InvalidRecord {
                index,
                message: format!("unsupported schema_version {}", r.schema_version),
            });
        }
        let n = r.normalized();
        n.validate()
            .map_err(|message| ManifestError::InvalidRecord { index, message })?;
        let line = serde_json::to_string(&n).expect("manifest records always serialize");
        lines.push((n, line));
    }
    lines.sort_by(|(a, la), (b, lb)| a.sort_key_cmp(b).then_with(|| la.cmp(lb)));
    let mut out = Vec::new();
    for (_, line) in lines {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<(), ManifestError> {
    let bytes = encode_manifest(records)?;
    fs::write(path, bytes).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses one manifest line (1-based `line` for error messages).
pub fn parse_line(text: &str, line: usize) -> Result<ManifestRecord, ManifestError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|source| ManifestError::Parse { line, source })?;
    if let Some(v) = value.get("schema_version").and_then(|v| v.as_u64()) {
        if v != u64::from(SCHEMA_VERSION) {
            return Err(ManifestError::UnknownSchema {
                line,
                version: v.try_into().unwrap_or(u32::MAX),
            });
        }
    }
    let record: ManifestRecord =
        serde_json::from_value(value).map_err(|source| ManifestError::Parse { line, source })?;
    record
        .validate()
        .map_err(|message| ManifestError::Invariant { line, message })?;
    Ok(record)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, ManifestError> {
    let io_err = |source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

/// Outcome of checking a manifest's frame references.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    /// Distinct frames that exist and load as equirectangular PNGs.
    pub ok: usize,
    pub missing: Vec<PathBuf>,
    pub corrupt: Vec<PathBuf>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.corrupt.is_empty()
    }
}

/// Checks that every frame referenced by the manifest exists under
/// `frames_root` and loads. Never modifies anything on disk.
pub fn validate_manifest(path: &Path, frames_root: &Path) -> Result<ValidationReport, ManifestError> {
    let records = read_manifest(path)?;
    let mut frames: Vec<FrameId> = records.iter().flat_map(|r| r.frame_ids()).collect();
    frames.sort();
    frames.dedup();
    let mut report = ValidationReport {
        records: records.len(),
        ..Default::default()
    };
    for id in frames {
        let p = frame_path(frames_root, &id);
        if !p.is_file() {
            report.missing.push(p);
            continue;
        }
        match load_png(&p).map(|img| PanoFrame::new(id, img)) {
            Ok(Ok(_)) => report.ok += 1,
            _ => report.corrupt.push(p),
        }
    }
    Ok(report)
}
