use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tomoalign"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tomoalign")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct SmokeRun {
    dir: tempfile::TempDir,
    elapsed: Duration,
    status: Option<i32>,
}

fn smoke() -> &'static SmokeRun {
    static RUN: OnceLock<SmokeRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let out = run(&[
            "run",
            smoke_config().to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--deterministic",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        SmokeRun {
            elapsed: start.elapsed(),
            status: out.status.code(),
            dir,
        }
    })
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn report_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn smoke_config_runs_within_a_minute() {
    let s = smoke();
    assert_eq!(s.status, Some(0));
    assert!(s.elapsed < Duration::from_secs(60), "took {:?}", s.elapsed);
    for f in ["manifest.json", "report.json", "metrics.csv", "alignment.csv", "reconstruction.f64", "projections.json"] {
        assert!(s.dir.path().join(f).is_file(), "missing {f}");
    }
}

#[test]
fn manifest_records_seeds_threads_and_file_hashes() {
    let dir = smoke().dir.path();
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "run");
    assert_eq!(m["deterministic"], true);
    assert_eq!(m["threads"], 1);
    assert_eq!(m["seeds"]["phantom"], 7);
    assert_eq!(m["seeds"]["misalignment"], 8);
    assert_eq!(m["seeds"]["noise"], 9);
    assert_eq!(m["config"]["phantom"]["n"], 32);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    let files = m["files"].as_array().unwrap();
    assert!(files.len() >= 10);
    for f in files {
        let bytes = fs::read(dir.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
}

#[test]
fn rerun_reproduces_outputs_bit_identically() {
    let first = smoke().dir.path();
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run",
        "--config",
        smoke_config().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--deterministic",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["metrics.csv", "alignment.csv", "report.json", "reconstruction.f64", "projections.f64"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(dir.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn metric_table_has_one_row_per_iteration_at_full_precision() {
    let dir = smoke().dir.path();
    let report = report_json(dir);
    let records = report["records"].as_array().unwrap();
    let (header, rows) = read_csv(&dir.join("metrics.csv"));
    assert_eq!(header[0], "iteration");
    assert_eq!(rows.len(), records.len());
    for (row, rec) in rows.iter().zip(records) {
        for key in ["objective", "optimality", "max_increment", "alpha", "residual"] {
            let col = header.iter().position(|h| h == key).unwrap();
            let parsed: f64 = row[col].parse().unwrap();
            assert_eq!(parsed.to_bits(), rec[key].as_f64().unwrap().to_bits(), "{key}");
        }
        let col = header.iter().position(|h| h == "weighted_rms").unwrap();
        let parsed: f64 = row[col].parse().unwrap();
        assert_eq!(parsed.to_bits(), rec["align_error"]["weighted_rms"].as_f64().unwrap().to_bits());
    }
}

#[test]
fn alignment_table_has_six_parameters_per_projection() {
    let dir = smoke().dir.path();
    let (header, rows) = read_csv(&dir.join("alignment.csv"));
    assert_eq!(&header[2..], ["s_x", "s_y", "s_z", "theta_xy", "theta_yz", "theta_zx"]);
    assert_eq!(rows.len(), 24);
    let report = report_json(dir);
    let params = report["alignment"]["params"].as_array().unwrap();
    for (row, p) in rows.iter().zip(params) {
        assert_eq!(row.len(), 8);
        let v: f64 = row[2].parse().unwrap();
        assert_eq!(v.to_bits(), p["shift"][0].as_f64().unwrap().to_bits());
    }
}

#[test]
fn metrics_and_export_plots_read_a_report() {
    let dir = smoke().dir.path();
    let out = run(&["metrics", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), fs::read_to_string(dir.join("metrics.csv")).unwrap());

    let plots = tempfile::tempdir().unwrap();
    let out = run(&[
        "export-plots",
        dir.join("report.json").to_str().unwrap(),
        "--out",
        plots.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["metrics.csv", "alignment.csv", "alignment_true.csv"] {
        assert_eq!(fs::read_to_string(plots.path().join(f)).unwrap(), fs::read_to_string(dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_report_exits_with_io_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["export-plots", dir.path().join("nope.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("nope.json"));
    let out = run(&["metrics", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unknown_key_exits_with_schema_status_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"phantom": {"n": 16}, "driver": {"epsilon": {"kind": "fixed", "epsilon": 0.1, "ratio": 2}}}"#).unwrap();
    let out = run(&["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("driver.epsilon"), "{msg}");
    assert!(msg.contains("ratio"), "{msg}");
}

#[test]
fn missing_config_file_exits_with_io_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn phantom_and_simulate_write_sidecars_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(
        &cfg,
        r#"{"phantom": {"n": 12}, "acquisition": {"n_proj": 5, "roi": {"extent": [8, 6]}}, "simulation": {"noise_sigma": 0.01}}"#,
    )
    .unwrap();
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("projections.json")).unwrap()).unwrap();
    assert_eq!(side["extents"], serde_json::json!([8, 6, 5]));
    assert_eq!(side["roi"]["offset"], serde_json::json!([2, 3]));
    assert_eq!(side["nominal_angles_rad"].as_array().unwrap().len(), 5);
    assert_eq!(fs::metadata(dir.path().join("projections.f64")).unwrap().len(), 8 * 8 * 6 * 5);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["noise"], 5);
    let (_, rows) = read_csv(&dir.path().join("alignment_true.csv"));
    assert_eq!(rows.len(), 5);

    let pdir = dir.path().join("ph");
    let out = run(&["phantom", "--config", cfg.to_str().unwrap(), "--out", pdir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(pdir.join("phantom.f64")).unwrap().len(), 8 * 12 * 12 * 12);
}
