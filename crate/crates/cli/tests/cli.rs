use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nfdistill_cli::config::RunConfig;
use nfdistill_cli::report::MetricReport;

const TINY: &str = include_str!("fixtures/tiny.json");

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, config).unwrap();
        Run { dir, config: path }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, args: &[&str]) -> Output {
        let mut c = Command::new(env!("CARGO_BIN_EXE_nfdistill"));
        c.args(args).arg("--config").arg(&self.config);
        c.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn err(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(path: &Path) -> MetricReport {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let r = Run::new(TINY);
    let (data, out) = (r.path("data"), r.path("out"));
    r.ok(&["gen-data", "--out", s(&data)]);
    for split in ["train.nfds", "validation.nfds", "held-out.nfds"] {
        assert!(data.join(split).is_file(), "{split} missing");
    }
    r.ok(&["train-teacher", "--data", s(&data), "--out", s(&out)]);
    let teacher = out.join("teacher.nfdl");
    let t = report(&out.join("teacher_report.json"));
    assert_eq!(t.command, "train-teacher");
    assert_eq!(t.metrics["params"], t.metrics["params_analytic"]);
    assert!(out.join("teacher_loss.csv").is_file());

    r.ok(&[
        "distill",
        "--data",
        s(&data),
        "--teacher",
        s(&teacher),
        "--out",
        s(&out),
    ]);
    let d = report(&out.join("distill_report.json"));
    assert!(d.metrics["final_validation_total"].is_finite());
    assert_eq!(d.inputs.len(), 3, "{:?}", d.inputs.keys());

    r.ok(&["fuse", "--checkpoint", s(&teacher), "--out", s(&out)]);
    let f = report(&out.join("fusion_report.json"));
    assert!(f.metrics["max_abs_deviation"] < 1e-4);
    assert!(f.timing.contains_key("speedup"));

    let student = out.join("student.nfdl");
    r.ok(&[
        "eval",
        "--data",
        s(&data),
        "--teacher",
        s(&teacher),
        "--student",
        s(&student),
        "--out",
        s(&out),
    ]);
    let e = report(&out.join("eval_report.json"));
    for m in [
        "l1_to_teacher",
        "stft_to_teacher",
        "teacher_diversity",
        "student_diversity",
        "diversity_ratio",
    ] {
        assert!(e.metrics[m].is_finite(), "{m}");
    }

    r.ok(&[
        "bench",
        "--teacher",
        s(&out.join("teacher_fused.nfdl")),
        "--student",
        s(&student),
        "--out",
        s(&out),
    ]);
    let b = report(&out.join("bench_report.json"));
    assert_eq!(b.config_hash, RunConfig::from_json(TINY).unwrap().hash());
}

#[test]
fn seed_override_changes_the_run() {
    let r = Run::new(TINY);
    r.ok(&["gen-data", "--out", s(&r.path("data"))]);
    let data = r.path("data");
    r.ok(&[
        "train-teacher",
        "--data",
        s(&data),
        "--out",
        s(&r.path("a")),
    ]);
    r.ok(&[
        "train-teacher",
        "--data",
        s(&data),
        "--out",
        s(&r.path("b")),
        "--seed",
        "9",
    ]);
    let a = report(&r.path("a/teacher_report.json"));
    let b = report(&r.path("b/teacher_report.json"));
    assert_ne!(a.config_hash, b.config_hash);
    assert_ne!(
        std::fs::read(r.path("a/teacher.nfdl")).unwrap(),
        std::fs::read(r.path("b/teacher.nfdl")).unwrap()
    );
}

#[test]
fn unknown_config_fields_are_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["teacher"]["hiden"] = 3.into();
    let r = Run::new(&v.to_string());
    let e = r.err(&["gen-data", "--out", s(&r.path("data"))]);
    assert!(e.contains("hiden"), "{e}");
}

#[test]
fn inconsistent_configs_are_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["teacher"]["cond_hop"] = 16.into();
    let r = Run::new(&v.to_string());
    let e = r.err(&["gen-data", "--out", s(&r.path("data"))]);
    assert!(e.contains("cond_hop"), "{e}");
}

#[test]
fn wrong_inputs_fail_cleanly() {
    let r = Run::new(TINY);
    let data = r.path("data");
    r.ok(&["gen-data", "--out", s(&data)]);
    let missing = r.err(&[
        "train-teacher",
        "--data",
        s(&r.path("nowhere")),
        "--out",
        s(&r.path("o")),
    ]);
    assert!(missing.starts_with("error:"), "{missing}");

    // Data generated under other synthesis parameters.
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["data"]["params"]["noise"] = 0.05.into();
    let other = Run::new(&v.to_string());
    let e = other.err(&[
        "train-teacher",
        "--data",
        s(&data),
        "--out",
        s(&r.path("o")),
    ]);
    assert!(e.contains("synthesis parameters"), "{e}");

    // A dataset is not a checkpoint, and a student cannot be fused.
    let e = r.err(&[
        "fuse",
        "--checkpoint",
        s(&data.join("train.nfds")),
        "--out",
        s(&r.path("o")),
    ]);
    assert!(e.starts_with("error:"), "{e}");
    let mut small: serde_json::Value = serde_json::from_str(TINY).unwrap();
    for ptr in ["/teacher_train", "/distill/optim"] {
        let o = small.pointer_mut(ptr).unwrap();
        o["steps"] = 0.into();
        o["warmup_steps"] = 0.into();
    }
    let q = Run::new(&small.to_string());
    q.ok(&[
        "train-teacher",
        "--data",
        s(&data),
        "--out",
        s(&q.path("o")),
    ]);
    q.ok(&[
        "distill",
        "--data",
        s(&data),
        "--teacher",
        s(&q.path("o/teacher.nfdl")),
        "--out",
        s(&q.path("o")),
    ]);
    let e = q.err(&[
        "fuse",
        "--checkpoint",
        s(&q.path("o/student.nfdl")),
        "--out",
        s(&q.path("f")),
    ]);
    assert!(e.contains("teacher"), "{e}");
}

#[test]
fn held_out_data_is_not_training_data() {
    let r = Run::new(TINY);
    let data = r.path("data");
    r.ok(&["gen-data", "--out", s(&data)]);
    std::fs::copy(data.join("held-out.nfds"), data.join("train.nfds")).unwrap();
    let e = r.err(&[
        "train-teacher",
        "--data",
        s(&data),
        "--out",
        s(&r.path("o")),
    ]);
    assert!(e.contains("split"), "{e}");
}

#[test]
fn desk_profile_file_matches_the_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::desk());
}
