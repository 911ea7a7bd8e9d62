use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adacode::checkpoint::load_checkpoint;
use adacode::config::{RunConfig, OUTPUT_ROOT_ENV};
use adacode::patch::{ImagePatch, Mask};
use adacode::training::init_stage1;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    /// A tiny run rooted in a fresh temp directory.
    fn new(edit: impl FnOnce(&mut RunConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let mut cfg = RunConfig::tiny();
        cfg.output_dir = root.clone();
        edit(&mut cfg);
        let config = dir.path().join("run.toml");
        fs::write(&config, cfg.to_toml().unwrap()).unwrap();
        Self { _dir: dir, root, config }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_adacode"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env_remove(OUTPUT_ROOT_ENV)
            .output()
            .unwrap()
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

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_data_is_deterministic_and_validated() {
    let run = Run::new(|_| {});
    let stdout = run.ok(&["synth-data", "--classes", "5", "--patches-per-class", "2"]);
    assert_eq!(stdout.lines().count(), 5);
    let data = run.path("data");
    let dirs = fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 5);
    let first = files_under(&data);
    run.ok(&["synth-data", "--classes", "5", "--patches-per-class", "2"]);
    assert_eq!(files_under(&data), first);

    assert_eq!(run.cmd(&["synth-data", "--classes", "0"]).status.code(), Some(1));
}

#[test]
fn config_and_usage_errors_exit_with_one() {
    let run = Run::new(|_| {});
    assert_eq!(run.cmd(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run.cmd(&["train", "--stage", "4"]).status.code(), Some(1));
    assert_eq!(run.cmd(&["train", "--stage", "1", "--task", "sr"]).status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_adacode"))
        .args(["--config", "/nonexistent/run.toml", "synth-data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage2_without_stage1_names_the_missing_checkpoints() {
    let run = Run::new(|_| {});
    run.ok(&["synth-data"]);
    let out = run.cmd(&["train", "--stage", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage1_checker.ckpt"), "{err}");
    assert!(!run.path("checkpoints/stage2.ckpt").exists());
}

#[test]
fn zero_iterations_write_the_initial_checkpoint() {
    let run = Run::new(|_| {});
    run.ok(&["synth-data"]);
    run.ok(&["train", "--stage", "1", "--iterations", "0"]);
    let cfg = RunConfig::load(&run.config).unwrap();
    let sc = cfg.stage_config(1).unwrap();
    let saved = load_checkpoint(run.path("checkpoints/stage1_stripes.ckpt")).unwrap();
    let init = init_stage1(
        &cfg.network,
        &adacode::training::StageConfig { seed: cfg.seed + 1, iterations: 0, ..sc.clone() },
        "stripes",
        sc.codebook_sizes[1],
    )
    .unwrap();
    assert_eq!(saved.iteration, 0);
    assert_eq!(saved.hashes(), init.hashes());
}

#[test]
fn output_root_precedence() {
    let run = Run::new(|_| {});
    let env_root = run._dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_adacode"))
        .arg("--config")
        .arg(&run.config)
        .arg("synth-data")
        .env(OUTPUT_ROOT_ENV, &env_root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env_root.join("data").is_dir());
    assert!(!run.root.exists());

    let flag_root = run._dir.path().join("from_flag");
    let out = Command::new(env!("CARGO_BIN_EXE_adacode"))
        .arg("--config")
        .arg(&run.config)
        .arg("--output")
        .arg(&flag_root)
        .arg("synth-data")
        .env(OUTPUT_ROOT_ENV, &env_root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(flag_root.join("data").is_dir());
}

#[test]
fn full_pipeline_through_the_cli() {
    let run = Run::new(|c| {
        c.degradation.scale = 4;
        c.data.toy.patches_per_class = 2;
    });
    run.ok(&["synth-data"]);
    run.ok(&["train", "--stage", "1"]);
    run.ok(&["train", "--stage", "2"]);
    assert!(run.path("logs/stage2.jsonl").is_file());
    assert!(run.path("checkpoints/stage2.config.toml").is_file());

    // Super-resolution: a 16x16 input comes back 64x64, identically twice.
    run.ok(&["train", "--stage", "3", "--task", "sr"]);
    let lr = run.path("lr.png");
    ImagePatch::from_fn(16, 16, |c, y, x| ((c + y * x) % 7) as f64 / 7.0).save_png(&lr).unwrap();
    let out_a = run.path("sr_a");
    let out_b = run.path("sr_b");
    for out in [&out_a, &out_b] {
        run.ok(&["restore", "--task", "sr", "--input", lr.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    let restored = ImagePatch::load_png(out_a.join("lr.png")).unwrap();
    assert_eq!(restored.dims(), (64, 64));
    assert_eq!(fs::read(out_a.join("lr.png")).unwrap(), fs::read(out_b.join("lr.png")).unwrap());

    // Inpainting with an empty mask keeps the size.
    run.ok(&["train", "--stage", "3", "--task", "inpaint"]);
    let img = run.path("img.png");
    ImagePatch::filled(16, 16, 0.4).save_png(&img).unwrap();
    let mask = run.path("mask.png");
    Mask::empty(16, 16).save_png(&mask).unwrap();
    let out = run.path("inpaint");
    run.ok(&[
        "restore",
        "--task",
        "inpaint",
        "--input",
        img.to_str().unwrap(),
        "--mask",
        mask.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--weights",
    ]);
    assert_eq!(ImagePatch::load_png(out.join("img.png")).unwrap().dims(), (16, 16));
    assert!(out.join("img_w_0.png").is_file());

    // Restoring with the wrong task's checkpoint is a runtime error.
    let wrong = run.cmd(&[
        "restore",
        "--task",
        "sr",
        "--checkpoint",
        run.path("checkpoints/stage3_inpaint.ckpt").to_str().unwrap(),
        "--input",
        lr.to_str().unwrap(),
    ]);
    assert_eq!(wrong.status.code(), Some(2));

    // Evaluation: one row per image, reruns are byte-identical.
    let eval_a = run.path("eval_a");
    let eval_b = run.path("eval_b");
    for out in [&eval_a, &eval_b] {
        run.ok(&["eval", "--task", "sr", "--out", out.to_str().unwrap(), "--grids"]);
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(eval_a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
    assert_eq!(report["summary"]["count"], 6);
    assert_eq!(fs::read(eval_a.join("report.json")).unwrap(), fs::read(eval_b.join("report.json")).unwrap());
    assert!(eval_a.join("grids").is_dir());
    let missing = run.cmd(&["eval", "--data", "/nonexistent/dir"]);
    assert_ne!(missing.status.code(), Some(0));

    // Code visualization.
    let ten = run.path("viz/ten.png");
    run.ok(&["viz-codes", "--label", "checker", "--out", ten.to_str().unwrap()]);
    assert_eq!(ImagePatch::load_png(&ten).unwrap().dims(), (16, 10 * 16 + 9 * 2));
    let one = run.path("viz/one.png");
    run.ok(&["viz-codes", "--label", "checker", "--indices", "3", "--out", one.to_str().unwrap()]);
    assert_eq!(ImagePatch::load_png(&one).unwrap().dims(), (16, 16));
    assert_eq!(run.cmd(&["viz-codes", "--label", "checker", "--indices", "999"]).status.code(), Some(2));
    let unknown = run.cmd(&["viz-codes", "--label", "nope"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("checker"));
}
