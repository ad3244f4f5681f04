//! `pano-forge`: staged correspondence mining over panoramic video frames.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 external estimator service error.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use panoforge::ingest::{compute_stats, read_catalog, IngestError};
use panoforge::loss::{run_checks, CheckOptions, LossError};
use panoforge::manifest::{read_manifest, validate_manifest, write_manifest, ManifestError, ManifestRecord};
use panoforge::pipeline::{
    manifest_records, run_calibrate, run_propagate, run_search, write_fixture, EstimatorSelection, FixtureSpec,
    PipelineConfig, PipelineError, StageOutput,
};
use panoforge::pose::{OracleConfig, RemoteConfig};
use panoforge::search::CorrespondenceRecord;
use panoforge::synth::{SceneSpec, TrajectoryKind};

#[derive(Debug, Parser)]
#[command(name = "pano-forge", version, about = "Mine multi-view correspondences from 360-degree video frames")]
struct Cli {
    /// JSON pipeline configuration. Flags override its values.
    #[arg(long, global = true, env = "PANO_FORGE_CONFIG")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Configuration overrides shared by every subcommand.
#[derive(Debug, Default, Args)]
struct Overrides {
    /// Worker threads (0 = one per CPU). Never changes outputs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Frames per second kept by temporal subsampling.
    #[arg(long, global = true)]
    fps: Option<f64>,
    /// Search window in subsampled frames.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Mean-confidence acceptance threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Minimum metric baseline in meters.
    #[arg(long, global = true)]
    min_translation: Option<f64>,
    #[arg(long, global = true)]
    refine_iters: Option<usize>,
    #[arg(long, global = true)]
    refine_step: Option<f64>,
    #[arg(long, global = true)]
    refine_lr: Option<f64>,
    /// Horizontal field of view of the perspective views, radians.
    #[arg(long, global = true)]
    fov: Option<f64>,
    #[arg(long, global = true)]
    view_height: Option<u32>,
    #[arg(long, global = true)]
    view_width: Option<u32>,
    /// Answer pose and depth queries from a fixture's groundtruth.json.
    #[arg(long, global = true, conflicts_with = "endpoint")]
    oracle: Option<PathBuf>,
    /// Base URL of a remote estimator service.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true, conflicts_with = "depth_endpoint")]
    depth_oracle: Option<PathBuf>,
    #[arg(long, global = true)]
    depth_endpoint: Option<String>,
    #[arg(long, global = true)]
    k_max: Option<usize>,
    #[arg(long, global = true)]
    hamming_max: Option<u32>,
    #[arg(long, global = true)]
    decoder_cmd: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic fixture: panoramas, depth and ground truth.
    Synth(SynthArgs),
    /// Windowed search over cardinal views; writes a raw-scale manifest.
    Search {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate unexplored frame pairs within connected components.
    Propagate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit metric scales and drop short baselines.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Catalog and manifest statistics as JSON on stdout.
    Stats {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the loss-kernel verification suite.
    Losscheck(LosscheckArgs),
    /// Check that every frame a manifest references exists and decodes.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        frames: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Line,
    Loop,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Scene description (JSON). Defaults to the built-in hall.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, short = 'n', default_value_t = 60)]
    frames: usize,
    #[arg(long, value_enum, default_value_t = Kind::Line)]
    kind: Kind,
    /// Meters per second; frames are one second apart.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Panorama width in pixels; height is half.
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 1)]
    supersample: u32,
    #[arg(long, default_value = "synth")]
    video_id: String,
    /// Metric length of one oracle unit.
    #[arg(long, default_value_t = 1.0)]
    planted_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    rot_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    trans_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    depth_sigma: f64,
}

#[derive(Debug, Args)]
struct LosscheckArgs {
    /// Instance shapes as HxWxC, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_size)]
    sizes: Vec<(usize, usize, usize)>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Flip the sign of the mask gradient to exercise the harness.
    #[arg(long, hide = true)]
    inject_sign_error: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("{s}: {e}"))?;
    match parts[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        _ => Err(format!("{s}: expected HxWxC with positive sizes")),
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }

    fn data(message: impl fmt::Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            _ if e.is_external() => 3,
            PipelineError::Config(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ManifestError> for Failure {
    fn from(e: ManifestError) -> Self {
        Self::data(e)
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        Self::data(e)
    }
}

impl From<LossError> for Failure {
    fn from(e: LossError) -> Self {
        Self::usage(e)
    }
}

fn load_config(path: Option<&Path>, o: &Overrides) -> Result<PipelineConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+;)*) => {
            $(if let Some(v) = &o.$flag {
                cfg.$($field).+ = v.clone();
            })*
        };
    }
    set! {
        workers => workers;
        seed => seed;
        fps => search.fps;
        window => search.window;
        tau => search.tau;
        min_translation => search.min_translation;
        refine_iters => search.refine_iters;
        refine_step => search.refine_step;
        refine_lr => search.refine_lr;
        fov => view.fov;
        view_height => view.height;
        view_width => view.width;
        k_max => k_max;
        hamming_max => hamming_max;
        decoder_cmd => decoder_cmd;
    }
    let remote = |endpoint: &String, current: &Option<EstimatorSelection>| {
        let base = match current {
            Some(EstimatorSelection::Remote { remote }) => remote.clone(),
            _ => RemoteConfig::default(),
        };
        EstimatorSelection::Remote {
            remote: RemoteConfig {
                endpoint: endpoint.clone(),
                ..base
            },
        }
    };
    if let Some(p) = &o.oracle {
        cfg.estimator = Some(EstimatorSelection::Oracle { groundtruth: p.clone() });
    }
    if let Some(e) = &o.endpoint {
        cfg.estimator = Some(remote(e, &cfg.estimator));
    }
    if let Some(p) = &o.depth_oracle {
        cfg.depth_estimator = Some(EstimatorSelection::Oracle { groundtruth: p.clone() });
    }
    if let Some(e) = &o.depth_endpoint {
        cfg.depth_estimator = Some(remote(e, &cfg.depth_estimator));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_records(records: &[CorrespondenceRecord], out: &Path) -> Result<(), Failure> {
    let m: Vec<ManifestRecord> = records.iter().map(ManifestRecord::from_record).collect();
    write_manifest(&m, out)?;
    info!("wrote {} records to {}", m.len(), out.display());
    Ok(())
}

/// `<out>.log.jsonl` next to the manifest.
fn log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log.jsonl");
    PathBuf::from(name)
}

fn write_log(stage: &StageOutput, out: &Path) -> Result<(), Failure> {
    let path = log_path(out);
    let mut text = String::new();
    for line in stage.log_lines() {
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn read_records(path: &Path) -> Result<Vec<CorrespondenceRecord>, Failure> {
    Ok(manifest_records(&read_manifest(path)?)?)
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<(), Failure> {
    let scene = match &args.scene {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SceneSpec>(&text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?
        }
        None => SceneSpec::hall(),
    };
    if args.width < 2 || args.width % 2 != 0 {
        return Err(Failure::usage("--width must be an even number of at least 2"));
    }
    let spec = FixtureSpec {
        scene,
        video_id: args.video_id.clone(),
        frames: args.frames,
        trajectory: match args.kind {
            Kind::Line => TrajectoryKind::Line,
            Kind::Loop => TrajectoryKind::Loop,
        },
        speed: args.speed,
        pano_width: args.width,
        supersample: args.supersample.max(1),
        oracle: OracleConfig {
            planted_scale: args.planted_scale,
            rot_sigma: args.rot_sigma,
            trans_sigma: args.trans_sigma,
            depth_sigma: args.depth_sigma,
            seed,
            ..OracleConfig::default()
        },
    };
    spec.oracle
        .validate()
        .map_err(|e| Failure::usage(format!("oracle settings: {e}")))?;
    let gt = write_fixture(&spec, &args.out)?;
    info!("rendered {} frames into {}", gt.frames.len(), args.out.display());
    Ok(())
}

fn finish_stage(stage: &StageOutput, records: &[CorrespondenceRecord], out: &Path) -> Result<(), Failure> {
    write_records(records, out)?;
    write_log(stage, out)?;
    info!(
        "{} evaluations, {} accepted, {} errors",
        stage.outcomes.len(),
        stage.records.len(),
        stage.errors()
    );
    Ok(stage.check_error_rate()?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = || load_config(cli.config.as_deref(), &cli.overrides);
    match &cli.command {
        Command::Synth(args) => cmd_synth(args, cfg()?.seed),
        Command::Search { frames, out } => {
            let cfg = cfg()?;
            let est = cfg.pose_estimator()?;
            let stage = run_search(frames, &cfg, est.as_ref())?;
            finish_stage(&stage, &stage.records, out)
        }
        Command::Propagate { manifest, frames, out } => {
            let cfg = cfg()?;
            let mut records = read_records(manifest)?;
            let est = cfg.pose_estimator()?;
            let stage = run_propagate(&records, frames, &cfg, est.as_ref())?;
            records.extend(stage.records.iter().cloned());
            finish_stage(&stage, &records, out)
        }
        Command::Calibrate { manifest, frames, out } => {
            let cfg = cfg()?;
            let records = read_records(manifest)?;
            let metric = if records.is_empty() {
                Vec::new()
            } else {
                let est = cfg.pose_estimator()?;
                let depth = cfg.depth_estimator()?;
                run_calibrate(&records, frames, &cfg, est.as_ref(), depth.as_ref())?
            };
            write_records(&metric, out)
        }
        Command::Stats { catalog, manifest } => {
            let stats = compute_stats(&read_catalog(catalog)?, &read_manifest(manifest)?)?;
            let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
            println!("{text}");
            Ok(())
        }
        Command::Losscheck(args) => {
            let seed = cfg()?.seed;
            let defaults = CheckOptions::default();
            let opts = CheckOptions {
                seed,
                sizes: if args.sizes.is_empty() {
                    defaults.sizes
                } else {
                    args.sizes.clone()
                },
                lambda: args.lambda,
                instances: args.instances,
                inject_sign_error: args.inject_sign_error,
            };
            let results = run_checks(&opts)?;
            let mut stdout = std::io::stdout().lock();
            for r in &results {
                let _ = writeln!(stdout, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Failure::data(format!("{failed} of {} checks failed", results.len())));
            }
            Ok(())
        }
        Command::Validate { manifest, frames } => {
            let report = validate_manifest(manifest, frames)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if report.is_clean() {
                Ok(())
            } else {
                Err(Failure::data(format!(
                    "{} missing and {} corrupt frames",
                    report.missing.len(),
                    report.corrupt.len()
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
