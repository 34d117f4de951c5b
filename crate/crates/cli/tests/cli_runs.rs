//! End-to-end runs of the `lrf` binary on a briefly baked baseline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use lrf_cli::report::{CompareReport, RunReport, TargetHistogram};
use lrf_cli::Checkpoint;
use lrf_core::compression::{scheme_speedup, FlopsBreakdown};
use tempfile::TempDir;

fn lrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrf")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let text = r#"{
        "bake_epochs": 3,
        "budget": 6,
        "episodes": 6,
        "search_eval_samples": 256,
        "compare_seeds": [0],
        "histogram_samples": 7
    }"#;
    fs::write(&path, text).unwrap();
    path
}

struct Baked {
    dir: TempDir,
    config: PathBuf,
}

impl Baked {
    fn baseline(&self) -> String {
        self.dir.path().join("bake").join("baseline.lrfc").display().to_string()
    }

    fn config(&self) -> String {
        self.config.display().to_string()
    }
}

fn baked() -> &'static Baked {
    static BAKED: OnceLock<Baked> = OnceLock::new();
    BAKED.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let out = dir.path().join("bake");
        ok(&lrf(&["bake", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]));
        Baked { dir, config }
    })
}

#[test]
fn dense_report_is_all_full() {
    let b = baked();
    let text = ok(&lrf(&["report", "--checkpoint", &b.baseline()]));
    for name in ["W1", "W2", "W3", "W4"] {
        let line = text.lines().find(|l| l.contains(name)).unwrap();
        assert!(line.contains("Full") && line.trim_end().ends_with("1.0x"), "{line}");
    }
    let json = ok(&lrf(&["report", "--checkpoint", &b.baseline(), "--format", "structured"]));
    let parsed: FlopsBreakdown = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed.overall_speedup, 1.0);
    assert_eq!(parsed.orig_total, 32 * 256 + 2 * 256 * 256 + 256 * 10);
}

#[test]
fn trajectory_run_writes_consistent_outputs() {
    let b = baked();
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let stdout = ok(&lrf(&[
        "run-trajectory",
        "--config",
        &b.config(),
        "--checkpoint",
        &b.baseline(),
        "--trajectory",
        "1.5,2,3",
        "--out",
        o,
        "--format",
        "structured",
    ]));
    let report: RunReport = serde_json::from_str(&stdout).unwrap();
    let on_disk: RunReport =
        serde_json::from_str(&fs::read_to_string(out.path().join("trajectory_report.json")).unwrap()).unwrap();
    assert_eq!(report, on_disk);
    assert_eq!(report.config.trajectory, vec![1.5, 2.0, 3.0]);
    assert_eq!(report.total_epochs, 6);
    assert_eq!(report.steps.len(), 3);
    assert!(!out.path().join(".lock").exists());

    let ckpt = Checkpoint::load(&out.path().join("trajectory_final.lrfc")).unwrap();
    let fin = report.final_result.unwrap();
    assert_eq!(ckpt.model.current_scheme(), fin.scheme);
    let json = ok(&lrf(&[
        "report",
        "--checkpoint",
        out.path().join("trajectory_final.lrfc").to_str().unwrap(),
        "--format",
        "structured",
    ]));
    let parsed: FlopsBreakdown = serde_json::from_str(&json).unwrap();
    assert_eq!(
        parsed.overall_speedup,
        scheme_speedup(ckpt.model.layer_set(), &fin.scheme).unwrap()
    );
    assert!(parsed.overall_speedup >= 3.0);
}

#[test]
fn single_target_flag_parses_as_one_shot() {
    let b = baked();
    let out = tempfile::tempdir().unwrap();
    let stdout = ok(&lrf(&[
        "run-trajectory",
        "--config",
        &b.config(),
        "--checkpoint",
        &b.baseline(),
        "--trajectory",
        "3",
        "--budget",
        "2",
        "--out",
        out.path().to_str().unwrap(),
    ]));
    assert!(stdout.contains("phase epochs: [1, 1]"), "{stdout}");
}

#[test]
fn malformed_scheme_names_the_layer_and_exits_2() {
    let b = baked();
    let out = tempfile::tempdir().unwrap();
    let scheme = out.path().join("scheme.json");
    fs::write(&scheme, r#"[{"layer": "W1", "rank": 8}, {"layer": "W9", "rank": 4}]"#).unwrap();
    let res = lrf(&[
        "apply",
        "--config",
        &b.config(),
        "--checkpoint",
        &b.baseline(),
        "--scheme",
        scheme.to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("W9") && err.contains("missing layer W2"), "{err}");
}

#[test]
fn apply_accepts_entries_in_any_order() {
    let b = baked();
    let out = tempfile::tempdir().unwrap();
    let scheme = out.path().join("scheme.json");
    fs::write(
        &scheme,
        r#"[{"layer": "W4", "rank": "full"}, {"layer": "W2", "rank": 64},
            {"layer": "W1", "rank": 16}, {"layer": "W3", "rank": 64}]"#,
    )
    .unwrap();
    let stdout = ok(&lrf(&[
        "apply",
        "--config",
        &b.config(),
        "--checkpoint",
        &b.baseline(),
        "--scheme",
        scheme.to_str().unwrap(),
        "--mode",
        "compressed",
        "--out",
        out.path().to_str().unwrap(),
        "--format",
        "structured",
    ]));
    let report: RunReport = serde_json::from_str(&stdout).unwrap();
    let fin = report.final_result.unwrap();
    assert_eq!(fin.scheme.to_string(), "(16, 64, 64, Full)");
    assert_eq!(fin.epochs, 6);
}

#[test]
fn invalid_flags_exit_2() {
    let b = baked();
    let out = tempfile::tempdir().unwrap();
    for bad in [["--trajectory", "2,1.5"], ["--energy-range", "0.8,0.5"], ["--budget", "1"]] {
        let res = lrf(&[
            "run-trajectory",
            "--config",
            &b.config(),
            "--checkpoint",
            &b.baseline(),
            bad[0],
            bad[1],
            "--out",
            out.path().to_str().unwrap(),
        ]);
        assert_eq!(res.status.code(), Some(2), "{bad:?}: {}", String::from_utf8_lossy(&res.stderr));
    }
}

#[test]
fn locked_output_directory_is_refused() {
    let b = baked();
    let out = tempfile::tempdir().unwrap();
    fs::write(out.path().join(".lock"), "").unwrap();
    let res = lrf(&[
        "run-trajectory",
        "--config",
        &b.config(),
        "--checkpoint",
        &b.baseline(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("lock"));
    assert!(!out.path().join("trajectory_report.json").exists());
}

#[test]
fn compare_writes_table_and_histograms() {
    let b = baked();
    let out = tempfile::tempdir().unwrap();
    let stdout = ok(&lrf(&[
        "compare",
        "--config",
        &b.config(),
        "--checkpoint",
        &b.baseline(),
        "--out",
        out.path().to_str().unwrap(),
    ]));
    for label in [
        "Baseline",
        "Iterative Approach",
        "Base--Iterative Ranks (Compressed)",
        "Base--Iterative Ranks (Cyclic)",
        "Base--3x (Compressed)",
        "Base--3x (Cyclic)",
    ] {
        assert!(stdout.contains(label), "{label}\n{stdout}");
    }
    let report: CompareReport =
        serde_json::from_str(&fs::read_to_string(out.path().join("compare_report.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert_eq!(report.runs.len(), 1);
    let hist: Vec<TargetHistogram> =
        serde_json::from_str(&fs::read_to_string(out.path().join("histograms.json")).unwrap()).unwrap();
    assert_eq!(hist.len(), 2);
    assert!(hist.iter().all(|h| h.samples.len() == 7));
    for s in hist.iter().flat_map(|h| &h.samples) {
        assert!(s.reward.is_finite() && (0.0..=1.0).contains(&s.error));
    }
}

#[test]
fn bake_is_reproducible() {
    let b = baked();
    let out = tempfile::tempdir().unwrap();
    ok(&lrf(&["bake", "--config", &b.config(), "--out", out.path().to_str().unwrap()]));
    for name in ["baseline.lrfc", "baseline_metrics.json"] {
        assert_eq!(
            fs::read(out.path().join(name)).unwrap(),
            fs::read(b.dir.path().join("bake").join(name)).unwrap(),
            "{name}"
        );
    }
}
