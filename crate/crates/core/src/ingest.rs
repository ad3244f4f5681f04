//! Video catalog handling: metadata filtering, thumbnail deduplication,
//! frame extraction through an external decoder, and dataset statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::Command;

use image::RgbImage;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::ManifestRecord;
use crate::projection::{FrameId, PanoFrame};
use crate::raster::{load_png, RasterError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("catalog line {line}: {message}")]
    Catalog { line: usize, message: String },
    #[error("image is {width}x{height}; hashing needs a non-empty image")]
    DegenerateImage { width: u32, height: u32 },
    #[error("manifest references video {0}, which is not in the catalog")]
    DanglingReference(String),
    #[error("decoder command is empty")]
    EmptyDecoderCommand,
    #[error("could not start decoder `{program}`: {source}")]
    DecoderSpawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("decoder failed on {video} ({status}): {stderr}")]
    DecoderFailed {
        video: String,
        status: String,
        stderr: String,
    },
    #[error("{0}: frame file name is not {{timestamp_ms}}.png")]
    Naming(PathBuf),
    #[error("{path}: frame is {width}x{height}, expected width = 2 x height")]
    Aspect { path: PathBuf, width: u32, height: u32 },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{0}: no frames")]
    NoFrames(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionFormat {
    Equirectangular,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub duration_s: f64,
    pub category: String,
    pub projection_format: ProjectionFormat,
    pub view_count: u64,
    #[serde(default)]
    pub language: Option<String>,
}

/// Parses a JSON-lines catalog, enforcing non-empty unique ids and
/// non-negative durations.
pub fn parse_catalog(reader: impl BufRead) -> Result<Vec<VideoMeta>, IngestError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| IngestError::Catalog {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| IngestError::Catalog { line: line_no, message };
        let meta: VideoMeta = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if meta.video_id.is_empty() {
            return Err(bad("empty video_id".into()));
        }
        if !(meta.duration_s.is_finite() && meta.duration_s >= 0.0) {
            return Err(bad(format!("invalid duration {}", meta.duration_s)));
        }
        if !seen.insert(meta.video_id.clone()) {
            return Err(bad(format!("duplicate video_id {}", meta.video_id)));
        }
        out.push(meta);
    }
    Ok(out)
}

pub fn read_catalog(path: &Path) -> Result<Vec<VideoMeta>, IngestError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_catalog(BufReader::new(file))
}

/// Equirectangular videos, in catalog order.
pub fn filter_equirectangular(catalog: &[VideoMeta]) -> Vec<VideoMeta> {
    catalog
        .iter()
        .filter(|m| m.projection_format == ProjectionFormat::Equirectangular)
        .cloned()
        .collect()
}

const HASH_W: u64 = 9;
const HASH_H: u64 = 8;

/// Difference hash: grayscale, area-average to 9x8, and set one bit per
/// horizontally adjacent cell pair where the left cell is darker.
///
/// Computed in exact integer arithmetic: luma is `299 R + 587 G + 114 B` and
/// each cell sums source pixels weighted by their overlap area, so uniform
/// brightness shifts leave every comparison unchanged.
pub fn perceptual_hash(image: &RgbImage) -> Result<u64, IngestError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(IngestError::DegenerateImage { width: w, height: h });
    }
    let (w, h) = (u64::from(w), u64::from(h));
    // In scaled units source pixel x spans [9x, 9x + 9) and cell c spans [w c, w c + w).
    let overlaps = |n: u64, cells: u64| -> Vec<Vec<(usize, u64)>> {
        (0..n)
            .map(|p| {
                let (lo, hi) = (p * cells, (p + 1) * cells);
                (0..cells)
                    .filter_map(|c| {
                        let (clo, chi) = (c * n, (c + 1) * n);
                        let ov = hi.min(chi).saturating_sub(lo.max(clo));
                        (ov > 0).then_some((c as usize, ov))
                    })
                    .collect()
            })
            .collect()
    };
    let xo = overlaps(w, HASH_W);
    let yo = overlaps(h, HASH_H);
    let mut cells = [[0u64; HASH_W as usize]; HASH_H as usize];
    for (y, row_ov) in yo.iter().enumerate() {
        for (x, col_ov) in xo.iter().enumerate() {
            let p = image.get_pixel(x as u32, y as u32).0;
            let gray = 299 * u64::from(p[0]) + 587 * u64::from(p[1]) + 114 * u64::from(p[2]);
            for &(cy, wy) in row_ov {
                for &(cx, wx) in col_ov {
                    cells[cy][cx] += gray * wx * wy;
                }
            }
        }
    }
    let mut hash = 0u64;
    for row in &cells {
        for pair in row.windows(2) {
            hash = (hash << 1) | u64::from(pair[0] < pair[1]);
        }
    }
    Ok(hash)
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Greedy first-wins deduplication: a video is kept iff its thumbnail hash is
/// more than `hamming_max` bits from every previously kept hash.
pub fn dedup(thumbs: &[(String, RgbImage)], hamming_max: u32) -> Result<Vec<String>, IngestError> {
    let hashes: Vec<u64> = thumbs
        .par_iter()
        .map(|(_, img)| perceptual_hash(img))
        .collect::<Result<_, _>>()?;
    let mut kept: Vec<u64> = Vec::new();
    let mut out = Vec::new();
    for ((id, _), h) in thumbs.iter().zip(hashes) {
        if kept.iter().all(|k| hamming(*k, h) > hamming_max) {
            kept.push(h);
            out.push(id.clone());
        }
    }
    Ok(out)
}

/// Upper edges, in minutes, of all duration buckets but the last.
pub const DURATION_BUCKETS_MIN: [f64; 4] = [1.0, 5.0, 10.0, 30.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBucket {
    pub min_minutes: f64,
    /// `None` for the open-ended last bucket.
    pub max_minutes: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CatalogStats {
    pub video_count: usize,
    /// Distinct frames referenced by the manifest.
    pub total_frames: usize,
    pub frames_per_video_mean: f64,
    pub duration_histogram: Vec<HistogramBucket>,
    pub category_counts: BTreeMap<String, usize>,
    pub correspondence_count: usize,
}

/// Aggregates catalog and manifest counts. The frame mean is over all
/// catalog videos.
pub fn compute_stats(catalog: &[VideoMeta], manifest: &[ManifestRecord]) -> Result<CatalogStats, IngestError> {
    let ids: HashSet<&str> = catalog.iter().map(|m| m.video_id.as_str()).collect();
    let mut frames: BTreeSet<(&str, u64)> = BTreeSet::new();
    for r in manifest {
        if !ids.contains(r.video_id.as_str()) {
            return Err(IngestError::DanglingReference(r.video_id.clone()));
        }
        frames.insert((&r.video_id, r.frame_a.timestamp_ms));
        frames.insert((&r.video_id, r.frame_b.timestamp_ms));
    }
    let mut lower = 0.0;
    let mut histogram: Vec<HistogramBucket> = DURATION_BUCKETS_MIN
        .iter()
        .map(|&upper| {
            let b = HistogramBucket {
                min_minutes: lower,
                max_minutes: Some(upper),
                count: 0,
            };
            lower = upper;
            b
        })
        .collect();
    histogram.push(HistogramBucket {
        min_minutes: lower,
        max_minutes: None,
        count: 0,
    });
    let mut category_counts = BTreeMap::new();
    for m in catalog {
        let minutes = m.duration_s / 60.0;
        let bucket = DURATION_BUCKETS_MIN
            .iter()
            .position(|&upper| minutes < upper)
            .unwrap_or(DURATION_BUCKETS_MIN.len());
        histogram[bucket].count += 1;
        *category_counts.entry(m.category.clone()).or_insert(0) += 1;
    }
    let video_count = catalog.len();
    Ok(CatalogStats {
        video_count,
        total_frames: frames.len(),
        frames_per_video_mean: if video_count == 0 {
            0.0
        } else {
            frames.len() as f64 / video_count as f64
        },
        duration_histogram: histogram,
        category_counts,
        correspondence_count: manifest.len(),
    })
}

/// `root/{video_id}/{timestamp_ms}.png`.
pub fn frame_path(root: &Path, id: &FrameId) -> PathBuf {
    root.join(&id.video_id).join(format!("{}.png", id.timestamp_ms))
}

/// Sorted timestamps of the frames in one video directory, checking names
/// only.
pub fn list_timestamps(dir: &Path) -> Result<Vec<u64>, IngestError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            continue;
        }
        let ts = (path.extension().and_then(|e| e.to_str()) == Some("png"))
            .then(|| path.file_stem().and_then(|s| s.to_str()))
            .flatten()
            .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| IngestError::Naming(path.clone()))?;
        out.push(ts);
    }
    out.sort_unstable();
    Ok(out)
}

/// Video directories under a frames root, sorted.
pub fn list_videos(root: &Path) -> Result<Vec<String>, IngestError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.path().is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_frame(root: &Path, id: &FrameId) -> Result<PanoFrame, IngestError> {
    let path = frame_path(root, id);
    let image = load_png(&path)?;
    let (width, height) = image.dimensions();
    PanoFrame::new(id.clone(), image).map_err(|_| IngestError::Aspect { path, width, height })
}

/// Checks an extracted frame directory: every file is `{timestamp_ms}.png`,
/// decodes as PNG, and is 2:1. Returns the sorted timestamps.
pub fn validate_frame_dir(dir: &Path) -> Result<Vec<u64>, IngestError> {
    let timestamps = list_timestamps(dir)?;
    if timestamps.is_empty() {
        return Err(IngestError::NoFrames(dir.to_path_buf()));
    }
    for ts in &timestamps {
        let path = dir.join(format!("{ts}.png"));
        let image = load_png(&path)?;
        let (width, height) = image.dimensions();
        if width != 2 * height || height == 0 {
            return Err(IngestError::Aspect { path, width, height });
        }
    }
    Ok(timestamps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Command template; `{input}`, `{fps}` and `{outdir}` are substituted
    /// in each whitespace-separated argument. Run directly, not via a shell.
    pub decoder_cmd: String,
    pub fps: f64,
    /// Maximum number of decoder processes running at once.
    pub max_processes: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            decoder_cmd: String::new(),
            fps: 1.0,
            max_processes: 2,
        }
    }
}

/// Runs the decoder for one video into `out_root/{video_id}` and validates
/// what it wrote.
pub fn extract_frames(video_id: &str, video_path: &Path, out_root: &Path, cfg: &ExtractionConfig) -> Result<Vec<u64>, IngestError> {
    let outdir = out_root.join(video_id);
    fs::create_dir_all(&outdir).map_err(io_err(&outdir))?;
    let input = video_path.display().to_string();
    let out = outdir.display().to_string();
    let fps = cfg.fps.to_string();
    let args: Vec<String> = cfg
        .decoder_cmd
        .split_whitespace()
        .map(|a| a.replace("{input}", &input).replace("{fps}", &fps).replace("{outdir}", &out))
        .collect();
    let (program, rest) = args.split_first().ok_or(IngestError::EmptyDecoderCommand)?;
    info!("extracting {video_id}: {}", args.join(" "));
    let output = Command::new(program)
        .args(rest)
        .output()
        .map_err(|source| IngestError::DecoderSpawn {
            program: program.clone(),
            source,
        })?;
    if !output.status.success() {
        return Err(IngestError::DecoderFailed {
            video: video_id.to_string(),
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    validate_frame_dir(&outdir)
}

/// Extracts several videos with at most `cfg.max_processes` decoders running
/// concurrently. Results are in input order.
pub fn extract_all(
    videos: &[(String, PathBuf)],
    out_root: &Path,
    cfg: &ExtractionConfig,
) -> Result<Vec<Result<Vec<u64>, IngestError>>, IngestError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_processes.max(1))
        .build()
        .map_err(|e| IngestError::Io {
            path: out_root.display().to_string(),
            source: std::io::Error::other(e),
        })?;
    Ok(pool.install(|| {
        videos
            .par_iter()
            .map(|(id, path)| extract_frames(id, path, out_root, cfg))
            .collect()
    }))
}
