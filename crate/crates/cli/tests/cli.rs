use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn advpatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advpatch")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy dataset and a briefly trained small model.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        fs::write(
            f.path("scenes.json"),
            r#"{"train": 6, "val": 3, "test": 6, "height": 32, "width": 64, "focal": 48}"#,
        )
        .unwrap();
        fs::write(
            f.path("train.json"),
            r#"{"epochs": 1, "lr": 0.01, "model": {"num_classes": 5, "widths": [4, 8], "seed": 7}}"#,
        )
        .unwrap();
        let o = advpatch(&["gen-data", "--config", s(&f.path("scenes.json")), "--seed", "3", "--out", s(&f.path("data"))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = advpatch(&[
            "train-model",
            "--config",
            s(&f.path("train.json")),
            "--data",
            s(&f.path("data")),
            "--out",
            s(&f.path("model")),
            "--quiet",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn craft(&self, out: &str, extra: &[&str]) -> Output {
        let (data, model, out) = (self.path("data"), self.path("model/model.bin"), self.path(out));
        let mut args = vec![
            "craft-patch",
            "--data",
            s(&data),
            "--model",
            s(&model),
            "--epochs",
            "1",
            "--limit",
            "2",
            "--out",
            s(&out),
            "--quiet",
        ];
        args.extend_from_slice(extra);
        advpatch(&args)
    }
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(code(&advpatch(&["--help"])), 0);
    assert_eq!(code(&advpatch(&["no-such-command"])), 2);
    assert_eq!(code(&advpatch(&["craft-patch", "--mode", "sideways", "--data", "x", "--model", "y"])), 2);
}

#[test]
fn gen_data_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": 2, "val": 1, "test": 1, "height": 16, "width": 32, "focal": 24}"#).unwrap();
    let out = dir.path().join("d");
    let run = || advpatch(&["gen-data", "--config", s(&cfg), "--seed", "9", "--out", s(&out)]);
    let o = run();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("manifest.jsonl"));
    assert!(stdout(&o).contains("samples: 4"));
    let first = fs::read(out.join("manifest.jsonl")).unwrap();
    let img = fs::read(out.join("images/train_0000.ppm")).unwrap();
    assert_eq!(code(&run()), 0);
    assert_eq!(fs::read(out.join("manifest.jsonl")).unwrap(), first);
    assert_eq!(fs::read(out.join("images/train_0000.ppm")).unwrap(), img);
    // no staging leftovers next to the output
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
}

#[test]
fn missing_or_invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = advpatch(&["gen-data", "--config", s(&missing), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
    assert!(!dir.path().join("d").exists());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"trian": 3}"#).unwrap();
    let o = advpatch(&["gen-data", "--config", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_rejects_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let o = advpatch(&["train-model", "--data", s(dir.path()), "--epochs", "0", "--out", s(&dir.path().join("m"))]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("m").exists());
}

#[test]
fn end_to_end() {
    let f = Fixture::new();
    assert!(f.path("model/model.bin").exists());
    let curve = fs::read_to_string(f.path("model/loss_curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,mean_ce\n"));

    let o = f.craft("eot", &["--mode", "eot"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = f.craft("noeot", &["--mode", "no-eot"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for scene in ["A", "B", "C"] {
        let o = f.craft(&format!("ss{scene}"), &["--mode", "scene-specific", "--scene", scene]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let trace = fs::read_to_string(f.path("eot/trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,miou,l_adv,upsilon_frac,gamma\n"));
    assert!(f.path("eot/patch.pft").exists() && f.path("eot/patch.ppm").exists());

    // a rerun reproduces the patch byte for byte
    let first = fs::read(f.path("eot/patch.pft")).unwrap();
    assert_eq!(code(&f.craft("eot", &["--mode", "eot"])), 0);
    assert_eq!(fs::read(f.path("eot/patch.pft")).unwrap(), first);

    let patch_args = [
        format!("no_eot={}", s(&f.path("noeot/patch.pft"))),
        format!("eot={}", s(&f.path("eot/patch.pft"))),
        format!("scene_specific:A={}", s(&f.path("ssA/patch.pft"))),
        format!("scene_specific:B={}", s(&f.path("ssB/patch.pft"))),
        format!("scene_specific:C={}", s(&f.path("ssC/patch.pft"))),
    ];
    for bake in ["scene", "digital"] {
        let out = f.path(&format!("eval_{bake}"));
        let mut args = vec![
            "evaluate".to_string(),
            "--data".into(),
            s(&f.path("data")).into(),
            "--model".into(),
            s(&f.path("model/model.bin")).into(),
            "--bake".into(),
            bake.into(),
            "--out".into(),
            s(&out).into(),
            "--quiet".into(),
        ];
        for p in &patch_args {
            args.push("--patch".into());
            args.push(p.clone());
        }
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = advpatch(&argv);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let report = fs::read_to_string(out.join("report.csv")).unwrap();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(
            lines[0],
            "mode,scene,miou,macc,iou_sky,iou_road,iou_building,iou_obstacle,iou_billboard"
        );
        assert_eq!(lines.len(), 13);
        assert!(lines[1].starts_with("random,A,"));
        assert!(lines[4].starts_with("scene_specific,A,"));
    }

    let o = advpatch(&[
        "evaluate",
        "--data",
        s(&f.path("data")),
        "--model",
        s(&f.path("model/model.bin")),
        "--patch",
        &format!("eot={}", s(&f.path("missing.pft"))),
        "--out",
        s(&f.path("eval_missing")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!f.path("eval_missing").exists());
}

#[test]
fn compare_losses_emits_aligned_traces() {
    let f = Fixture::new();
    let o = f.craft("cmp", &["--compare-losses"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(f.path("cmp/compare.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,gamma_0.5,gamma_0.6,gamma_0.7,gamma_0.8,gamma_0.95,gamma_1,gamma_adaptive,ce_full_n,ce_excluding_patch"
    );
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1].split(',').count(), 10);
    assert!(f.path("cmp/trace_gamma_adaptive.csv").exists());
}

#[test]
fn failed_run_leaves_no_output() {
    let f = Fixture::new();
    let cfg = f.path("huge.json");
    fs::write(&cfg, r#"{"patch_dims": [40, 80]}"#).unwrap();
    let o = f.craft("huge", &["--config", s(&cfg)]);
    assert_ne!(code(&o), 0);
    assert!(!f.path("huge").exists());
    let leftovers = fs::read_dir(f.dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(".advpatch"))
        .count();
    assert_eq!(leftovers, 0);
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let o = advpatch(&["gradcheck", "--quiet"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = advpatch(&["gradcheck", "--inject-fault", "conv-sign-flip", "--quiet"]);
    assert_eq!(code(&o), 1);
}
