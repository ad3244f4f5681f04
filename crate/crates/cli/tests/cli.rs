use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pano-forge"));
    c.env_remove("PANO_FORGE_CONFIG").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(n: usize, extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let n = n.to_string();
        let mut args = vec!["synth", "--out", s(&root), "-n", &n, "--width", "128"];
        args.extend_from_slice(extra);
        let out = run(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Self { _dir: dir, root }
    }

    fn frames(&self) -> PathBuf {
        self.root.join("frames")
    }

    fn oracle(&self) -> PathBuf {
        self.root.join("groundtruth.json")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Runs a stage with the oracle and small views.
    fn stage(&self, args: &[&str]) -> Output {
        let oracle = self.oracle();
        let mut all = vec!["--oracle", s(&oracle), "--view-height", "16", "--view-width", "16"];
        all.extend_from_slice(args);
        run(&all)
    }

    fn search(&self, out: &Path, extra: &[&str]) -> Output {
        let frames = self.frames();
        let mut args = vec!["search", "--frames", s(&frames), "--out", s(out)];
        args.extend_from_slice(extra);
        self.stage(&args)
    }
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_writes_frames_and_is_reproducible() {
    let a = Fixture::new(8, &[]);
    let b = Fixture::new(8, &[]);
    let frames: Vec<_> = fs::read_dir(a.frames().join("synth")).unwrap().collect();
    assert_eq!(frames.len(), 8);
    assert!(a.path("depth/synth/7000.png").is_file());
    for name in ["groundtruth.json", "frames/synth/3000.png", "depth/synth/3000.png"] {
        assert_eq!(fs::read(a.path(name)).unwrap(), fs::read(b.path(name)).unwrap(), "{name}");
    }
}

#[test]
fn synth_reports_scene_parse_location() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    fs::write(&scene, "{\n  \"room\": [1, 2,\n").unwrap();
    let out = run(&["synth", "--out", s(&dir.path().join("o")), "--scene", s(&scene)]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line"), "{err}");
}

#[test]
fn search_writes_manifest_and_pair_log() {
    let fx = Fixture::new(8, &[]);
    let m1 = fx.path("m1.jsonl");
    let out = fx.search(&m1, &["--workers", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let records = lines(&m1);
    assert!(!records.is_empty());
    for r in &records {
        assert!(r["mean_conf"].as_f64().unwrap() >= 4.0);
        assert_eq!(r["scale_state"], "raw");
        assert_eq!(r["provenance"], "window");
    }
    // 8 frames inside one window: 28 frame pairs of 16 candidates
    let log = lines(&fx.path("m1.jsonl.log.jsonl"));
    assert_eq!(log.len(), 28 * 16);
    assert_eq!(
        log.iter().filter(|l| l["accepted"] == true).count(),
        records.len()
    );

    let m3 = fx.path("m3.jsonl");
    assert_eq!(code(&fx.search(&m3, &["--workers", "3"])), 0);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m3).unwrap());
    assert_eq!(
        fs::read(fx.path("m1.jsonl.log.jsonl")).unwrap(),
        fs::read(fx.path("m3.jsonl.log.jsonl")).unwrap()
    );
}

#[test]
fn infinite_threshold_gives_empty_manifest() {
    let fx = Fixture::new(3, &[]);
    let m = fx.path("m.jsonl");
    let out = fx.search(&m, &["--tau", "inf"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&m).unwrap(), b"");
}

#[test]
fn missing_frames_dir_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.json");
    let out = run(&[
        "search",
        "--oracle",
        s(&gt),
        "--frames",
        s(&dir.path().join("nope")),
        "--out",
        s(&dir.path().join("m.jsonl")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["search", "--frames", "x"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn config_file_and_env_fallback() {
    let fx = Fixture::new(3, &[]);
    let cfg = fx.path("cfg.json");
    fs::write(&cfg, r#"{"search": {"tau": 1e300}, "view": {"height": 16, "width": 16}}"#).unwrap();
    let m = fx.path("m.jsonl");
    let frames = fx.frames();
    let oracle = fx.oracle();
    let args = ["search", "--oracle", s(&oracle), "--frames", s(&frames), "--out", s(&m)];
    let out = bin().args(args).env("PANO_FORGE_CONFIG", &cfg).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&m).unwrap(), b"");
    // the flag beats the file
    let out = bin().args(args).args(["--tau", "4"]).env("PANO_FORGE_CONFIG", &cfg).output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(!lines(&m).is_empty());

    fs::write(&cfg, r#"{"search": {"tau": -1}}"#).unwrap();
    let out = bin().args(args).arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn propagate_within_window_adds_nothing_and_is_idempotent() {
    let fx = Fixture::new(8, &[]);
    let m = fx.path("m.jsonl");
    assert_eq!(code(&fx.search(&m, &[])), 0);
    let (frames, p1, p2) = (fx.frames(), fx.path("p1.jsonl"), fx.path("p2.jsonl"));
    let out = fx.stage(&["propagate", "--manifest", s(&m), "--frames", s(&frames), "--out", s(&p1)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&m).unwrap(), fs::read(&p1).unwrap());
    assert_eq!(fs::read(fx.path("p1.jsonl.log.jsonl")).unwrap(), b"");
    assert_eq!(
        code(&fx.stage(&["propagate", "--manifest", s(&p1), "--frames", s(&frames), "--out", s(&p2)])),
        0
    );
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
}

#[test]
fn calibrate_recovers_planted_scale() {
    let fx = Fixture::new(8, &["--planted-scale", "2"]);
    let (m, c, frames) = (fx.path("m.jsonl"), fx.path("c.jsonl"), fx.frames());
    assert_eq!(code(&fx.search(&m, &[])), 0);
    let out = fx.stage(&["calibrate", "--manifest", s(&m), "--frames", s(&frames), "--out", s(&c)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let records = lines(&c);
    assert!(!records.is_empty());
    for r in &records {
        assert!((r["sigma"].as_f64().unwrap() - 2.0).abs() < 1e-6);
        assert_eq!(r["scale_state"], "metric");
        let t: Vec<f64> = r["translation_m"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!(t.iter().map(|v| v * v).sum::<f64>().sqrt() >= 0.25);
    }

    // metric input is refused
    let again = fx.path("again.jsonl");
    let out = fx.stage(&["calibrate", "--manifest", s(&c), "--frames", s(&frames), "--out", s(&again)]);
    assert_eq!(code(&out), 2);

    let empty = fx.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = fx.stage(&["calibrate", "--manifest", s(&empty), "--frames", s(&frames), "--out", s(&again)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(&again).unwrap(), b"");
}

#[test]
fn validate_flags_missing_frames() {
    let fx = Fixture::new(4, &[]);
    let (m, frames) = (fx.path("m.jsonl"), fx.frames());
    assert_eq!(code(&fx.search(&m, &[])), 0);
    assert_eq!(code(&run(&["validate", "--manifest", s(&m), "--frames", s(&frames)])), 0);
    for ts in [0, 1000, 2000, 3000] {
        let _ = fs::remove_file(frames.join(format!("synth/{ts}.png")));
    }
    let out = run(&["validate", "--manifest", s(&m), "--frames", s(&frames)]);
    assert_eq!(code(&out), 2);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!report["missing"].as_array().unwrap().is_empty());
}

#[test]
fn stats_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = dir.path().join("catalog.jsonl");
    fs::write(
        &catalog,
        concat!(
            r#"{"video_id": "a", "duration_s": 120.0, "category": "travel", "projection_format": "equirectangular", "view_count": 5}"#,
            "\n",
            r#"{"video_id": "b", "duration_s": 900.0, "category": "sports", "projection_format": "equirectangular", "view_count": 1}"#,
            "\n"
        ),
    )
    .unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(&manifest, "").unwrap();
    let out = run(&["stats", "--catalog", s(&catalog), "--manifest", s(&manifest)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["video_count"], 2);
    assert_eq!(stats["correspondence_count"], 0);
}

#[test]
fn losscheck_passes_and_catches_injected_error() {
    let out = run(&["losscheck", "--instances", "20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert_ne!(code(&run(&["losscheck", "--instances", "20", "--inject-sign-error"])), 0);
    let out = run(&["losscheck", "--instances", "20", "--lambda", "0", "--sizes", "3x3x1,2x5x2"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("degenerate"));
}

#[test]
fn unreachable_service_is_external_error() {
    let fx = Fixture::new(2, &[]);
    let cfg = fx.path("cfg.json");
    fs::write(
        &cfg,
        r#"{"estimator": {"kind": "remote", "endpoint": "http://127.0.0.1:9", "retries": 0, "timeout_s": 2}, "view": {"height": 16, "width": 16}}"#,
    )
    .unwrap();
    let (m, frames) = (fx.path("m.jsonl"), fx.frames());
    let out = run(&["search", "--config", s(&cfg), "--frames", s(&frames), "--out", s(&m)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&fx.path("m.jsonl.log.jsonl")).len(), 16);
}
