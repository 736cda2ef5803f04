use std::path::Path;
use std::process::{Command, Output};

use trq_cli::config::{DataSource, RunConfig};
use trq_cli::report::{BuildManifest, CalibrationSummary};
use trq_cli::run::{self, load_report};

fn trq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trq"))
        .args(["--preset", "smoke", "--out-dir"])
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> BuildManifest {
    serde_json::from_slice(&std::fs::read(dir.join(run::MANIFEST)).unwrap()).unwrap()
}

#[test]
fn missing_artifacts_name_the_stage_and_the_fix() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, needle) in [("bench", "bench: missing"), ("calibrate", "calibrate: missing")] {
        let out = trq(tmp.path(), &[cmd]);
        assert!(!out.status.success());
        let err = stderr(&out);
        assert!(err.contains(needle) && err.contains("run `trq build` first"), "{err}");
    }
}

#[test]
fn bad_config_is_rejected_before_work_starts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trq(tmp.path(), &["--set", "calibration.fraction=0", "calibrate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("calibration.fraction"), "{}", stderr(&out));
    let out = trq(tmp.path(), &["--set", "ivf.nprobe=0", "build"]);
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_trq"))
        .args(["--preset", "nope", "--out-dir"])
        .arg(tmp.path())
        .arg("build")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nope"), "{}", stderr(&out));
    assert!(!tmp.path().join(run::CODEBOOK).exists());
}

#[test]
fn gt_depth_beyond_base_fails_in_gt_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trq(tmp.path(), &["--set", "data.n=150", "--set", "data.clusters=10", "--set", "gt.k=200", "gt"]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("trq: gt:"), "{}", stderr(&out));
}

#[test]
fn rebuild_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(trq(&a, &["build"]).status.success());
    assert!(trq(&b, &["build"]).status.success());
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.trq.stride, 32usize.div_ceil(5) + 8);
    assert!(trq(&a, &["build"]).status.success());
    assert_eq!(manifest(&a).artifacts, ma.artifacts);
}

#[test]
fn full_run_report_is_self_describing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = trq(&dir, &["run"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("refinement sweep"));

    let report = load_report(&dir.join(run::REPORT)).unwrap();
    assert_eq!(report.schema_version, 1);
    assert_eq!(report.config_hash, report.config.hash());
    let sweep = &report.metrics.sweep;
    assert_eq!(sweep.len(), 4);
    assert_eq!(sweep.last().unwrap().recall, report.metrics.full_rerank_recall);
    let names: Vec<&str> = report.metrics.distortion.iter().map(|r| r.estimator.as_str()).collect();
    assert_eq!(names, run::ESTIMATORS);

    let csv = std::fs::read_to_string(dir.join(run::SWEEP_CSV)).unwrap();
    assert!(csv.starts_with("fraction,recall,mean_ssd_fetches,refinement_ratio,modeled_latency_us\n"));
    assert_eq!(csv.lines().count(), 5);

    let summary: CalibrationSummary =
        serde_json::from_slice(&std::fs::read(dir.join(run::CALIBRATION_JSON)).unwrap()).unwrap();
    assert!(summary.holdout_pairs > 0);
    assert!(summary.mse_calibrated <= summary.mse_raw);
    let text = std::fs::read_to_string(dir.join(run::CALIBRATION_TXT)).unwrap();
    assert!(text.contains("holdout mse calibrated"));

    // bench from the embedded config, in a fresh directory holding copies of the inputs
    let again = tmp.path().join("again");
    std::fs::create_dir_all(&again).unwrap();
    for f in [run::CODEBOOK, run::IVF, run::TRQ, run::GT_IDS, run::GT_DISTS, run::MODEL] {
        std::fs::copy(dir.join(f), again.join(f)).unwrap();
    }
    let cfg = RunConfig { out_dir: again.clone(), ..report.config.clone() };
    let rerun = run::cmd_bench(&cfg).unwrap();
    assert_eq!(rerun.metrics, report.metrics);

    let shown = trq(&dir, &["report"]);
    assert!(shown.status.success());
    assert!(String::from_utf8_lossy(&shown.stdout).contains("full-rerank recall"));
}

#[test]
fn exported_files_reproduce_the_synthetic_run() {
    let tmp = tempfile::tempdir().unwrap();
    let synth_dir = tmp.path().join("synth");
    assert!(trq(&synth_dir, &["synth"]).status.success());

    let mut cfg = RunConfig::smoke();
    cfg.out_dir = tmp.path().join("from_files");
    cfg.data = DataSource::Files {
        base: synth_dir.join("base.fvecs"),
        queries: synth_dir.join("queries.fvecs"),
    };
    let from_files = run::cmd_run(&cfg).unwrap();
    let mut cfg = RunConfig::smoke();
    cfg.out_dir = tmp.path().join("direct");
    let direct = run::cmd_run(&cfg).unwrap();
    assert_eq!(from_files.metrics, direct.metrics);
}

#[test]
fn config_subcommand_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trq(tmp.path(), &["--set", "refine.k=5", "config"]);
    assert!(out.status.success());
    let path = tmp.path().join("cfg.toml");
    std::fs::write(&path, &out.stdout).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.refine.k, 5);
    let shown = Command::new(env!("CARGO_BIN_EXE_trq"))
        .args(["--config"])
        .arg(&path)
        .arg("config")
        .output()
        .unwrap();
    assert_eq!(shown.stdout, out.stdout);
}
