use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
image_size = 16

[paths]
manifest = "data/manifest.jsonl"

[codec]
downsample_factor = 4
latent_channels = 2
widths = [4, 4]

[codec_training]
steps = 20
batch_size = 4

[denoiser]
base_channels = 8
channel_multipliers = [1, 1]
attention_levels = [1]
in_channels = 4
out_channels = 2
embed_dim = 16
heads = 2
norm_groups = 4

[concept]
backbone_width = 8
patch_size = 8
heads = 2

[perceptual]
widths = [4, 8]

[training]
steps = 4
batch_size = 2
checkpoint_every = 2

[sampler]
steps = 4
kind = "strided"
"#;

fn egofront(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egofront"))
        .args(args)
        .env_remove("EGOFRONT_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Renders a toy capture and pairs it into `dir/data/manifest.jsonl`.
fn prepared(dir: &Path, subjects: usize, frames: usize, val_fraction: &str) -> PathBuf {
    let data = dir.join("data");
    let o = egofront(&[
        "toy", "--out", p(&data), "--subjects", &subjects.to_string(), "--frames", &frames.to_string(),
        "--resolution", "16", "--seed", "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = data.join("manifest.jsonl");
    let o = egofront(&[
        "prep", "--ego-dir", p(&data.join("ego")), "--frontal-dir", p(&data.join("frontal")), "--out",
        p(&manifest), "--val-fraction", val_fraction,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    manifest
}

fn manifest_entries(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn prep_pairs_a_toy_capture_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepared(dir.path(), 3, 10, "0.1");
    let entries = manifest_entries(&manifest);
    assert_eq!(entries.len(), 3);
    for e in &entries {
        let n = e["ego_paths"].as_array().unwrap().len();
        assert!((1..=10).contains(&n), "{n}");
    }
    let first = std::fs::read(&manifest).unwrap();
    let data = dir.path().join("data");
    let o = egofront(&[
        "prep", "--ego-dir", p(&data.join("ego")), "--frontal-dir", p(&data.join("frontal")), "--out",
        p(&manifest), "--val-fraction", "0.1",
    ]);
    assert!(o.status.success());
    assert_eq!(first, std::fs::read(&manifest).unwrap());
}

#[test]
fn prep_refuses_an_empty_frontal_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(egofront(&["toy", "--out", p(&data), "--subjects", "1", "--frames", "2", "--resolution", "16"])
        .status
        .success());
    std::fs::write(data.join("frontal/index.jsonl"), "").unwrap();
    let o = egofront(&[
        "prep", "--ego-dir", p(&data.join("ego")), "--frontal-dir", p(&data.join("frontal")), "--out",
        p(&data.join("m.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no frontal frames"), "{}", stderr(&o));
    assert!(!data.join("m.jsonl").exists());
}

#[test]
fn prep_reports_unpaired_frames_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(egofront(&["toy", "--out", p(&data), "--subjects", "2", "--frames", "3", "--resolution", "16"])
        .status
        .success());
    // A third frontal frame with no ego capture anywhere near it.
    let index = data.join("frontal/index.jsonl");
    let text = std::fs::read_to_string(&index).unwrap();
    let orphan = text.lines().next().unwrap().replace("toy0_0000\"", "orphan\"").replace("\"0.000\"", "\"500.000\"");
    std::fs::write(&index, format!("{text}{orphan}\n")).unwrap();
    let manifest = data.join("m.jsonl");
    let (ego, frontal) = (data.join("ego"), data.join("frontal"));
    let o = egofront(&["prep", "--ego-dir", p(&ego), "--frontal-dir", p(&frontal), "--out", p(&manifest)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("orphan"), "{}", stderr(&o));
    // The pairable frames are still written, with the drop report beside them.
    assert_eq!(manifest_entries(&manifest).len(), 2);
    assert!(std::fs::read_to_string(data.join("m.jsonl.drops.txt")).unwrap().contains("orphan"));

    let o = egofront(&[
        "prep", "--ego-dir", p(&ego), "--frontal-dir", p(&frontal), "--out", p(&manifest), "--window", "-1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn rank_reproduces_the_user_study_table() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/user_study_ballots.csv");
    let o = egofront(&["rank", p(&fixture), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let agg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rank.json")).unwrap()).unwrap();
    let scores: Vec<(String, u64, f64)> = agg["methods"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| (m["method"].as_str().unwrap().to_string(), m["borda_score"].as_u64().unwrap(), m["mean_rank"].as_f64().unwrap()))
        .collect();
    assert_eq!(scores.iter().map(|s| s.1).sum::<u64>(), 246);
    assert_eq!(scores[0].0, "UniAnimate");
    assert_eq!(scores.iter().map(|s| s.1).collect::<Vec<_>>(), vec![117, 86, 33, 10]);
    assert!((scores[0].2 - 1.15).abs() < 0.01);
    assert!(stdout(&o).contains("UniAnimate"));
}

#[test]
fn rank_rejects_a_tied_ballot() {
    let dir = tempfile::tempdir().unwrap();
    let ballots = dir.path().join("b.csv");
    std::fs::write(&ballots, "r1,A,B,C\nr2,A,A,C\n").unwrap();
    let o = egofront(&["rank", p(&ballots), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("r2"));
}

#[test]
fn oracle_eval_hits_the_caps() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepared(dir.path(), 3, 2, "0.0");
    let out = dir.path().join("report");
    let o = egofront(&["eval", "--oracle", "--manifest", p(&manifest), "--split", "train", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for region in ["full", "upper", "lower"] {
        let r = &report["regions"][region];
        assert_eq!(r["psnr"]["mean"].as_f64().unwrap(), 99.0, "{region}");
        assert_eq!(r["ssim"]["mean"].as_f64().unwrap(), 1.0, "{region}");
        assert_eq!(r["perceptual"]["mean"].as_f64().unwrap(), 0.0, "{region}");
    }
    let o = egofront(&["eval", "--oracle", "--manifest", p(&manifest), "--split", "val", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("{TINY_CONFIG}{extra}")).unwrap();
    path
}

fn run_dir_from(o: &Output) -> PathBuf {
    PathBuf::from(stdout(o).lines().last().expect("run directory printed").trim())
}

#[test]
fn train_resume_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = prepared(dir.path(), 4, 2, "0.0");
    let config = write_config(dir.path(), "");
    let root = dir.path().join("runs");

    let o = egofront(&["train", p(&config), "--output-root", p(&root), "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir_from(&o);
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("run-"));
    for f in ["config.toml", "metrics.jsonl", "summary.json", "codec.json", "checkpoints/latest.safetensors"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(run.join("checkpoints/step-000002.safetensors").is_file());
    assert!(!run.join(".lock").exists());
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // Same config again without --resume refuses to clobber the run.
    let o = egofront(&["train", p(&config), "--output-root", p(&root), "-q"]);
    assert_eq!(o.status.code(), Some(1));

    // A different config may not resume from this run's checkpoint.
    let o = egofront(&[
        "train", p(&config), "--output-root", p(&root), "-q", "--set", "training.learning_rate=0.01",
        "--resume-from", p(&run.join("checkpoints/latest.safetensors")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("configuration"), "{}", stderr(&o));

    // Infer: deterministic per seed, honours steps=1, keeps the resolution.
    let data = dir.path().join("data");
    let entry = &manifest_entries(&manifest)[0];
    let ego = data.join(entry["ego_paths"][0].as_str().unwrap());
    let mask = data.join(entry["pose_mask_path"].as_str().unwrap());
    let ckpt = run.join("checkpoints/latest.safetensors");
    let infer = |out: &Path, steps: &str| {
        egofront(&[
            "infer", "--checkpoint", p(&ckpt), "--ego", p(&ego), "--mask", p(&mask), "--out", p(out), "--seed", "3",
            "--steps", steps,
        ])
    };
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    assert!(infer(&a, "4").status.success());
    assert!(infer(&b, "4").status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a_grid.png").is_file());
    assert!(dir.path().join("a.json").is_file());
    let one = dir.path().join("one.png");
    let o = infer(&one, "1");
    assert!(o.status.success(), "{}", stderr(&o));
    let img = egofront::ImageTensor::load(&one).unwrap();
    assert_eq!(img.resolution(), (16, 16));

    let big = egofront::ImageTensor::filled(3, 32, 32, 0.0).unwrap();
    let big_path = dir.path().join("big.png");
    big.save(&big_path).unwrap();
    let o = egofront(&[
        "infer", "--checkpoint", p(&ckpt), "--ego", p(&big_path), "--mask", p(&mask), "--out",
        p(&dir.path().join("x.png")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("32x32"), "{}", stderr(&o));

    // Eval writes both report forms and tags them with the config digest.
    let out = dir.path().join("eval");
    let o = egofront(&[
        "eval", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--split", "train", "--out", p(&out),
        "--toy-classifier",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.json")).unwrap();
    let summary = std::fs::read_to_string(run.join("summary.json")).unwrap();
    let hash = serde_json::from_str::<serde_json::Value>(&summary).unwrap()["config_hash"].as_str().unwrap().to_string();
    assert!(report.contains(&hash));
    assert!(report.contains("clothing"));
}

#[test]
fn resuming_a_finished_run_adds_no_steps() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), 3, 2, "0.0");
    let config = write_config(dir.path(), "");
    let root = dir.path().join("runs");
    let o = egofront(&["train", p(&config), "--output-root", p(&root), "-q", "--set", "training.steps=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = egofront(&["train", p(&config), "--output-root", p(&root), "-q", "--set", "training.steps=2", "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir_from(&o);
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn unknown_config_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "\n[extra]\nfoo = 1\n");
    std::fs::write(&config, std::fs::read_to_string(&config).unwrap().replace("[training]", "[training]\nstepz = 3"))
        .unwrap();
    let o = egofront(&["train", p(&config), "--output-root", p(&dir.path().join("runs"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("training.stepz") && err.contains("extra"), "{err}");
}

#[test]
fn a_locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), 3, 2, "0.0");
    let config = write_config(dir.path(), "");
    let root = dir.path().join("runs");
    let o = egofront(&["train", p(&config), "--output-root", p(&root), "-q", "--set", "training.steps=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir_from(&o);
    std::fs::write(run.join(".lock"), "12345\n").unwrap();
    let o = egofront(&["train", p(&config), "--output-root", p(&root), "-q", "--set", "training.steps=1", "--resume"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), 3, 2, "0.0");
    let config = write_config(dir.path(), "");
    let root = dir.path().join("env-runs");
    let o = Command::new(env!("CARGO_BIN_EXE_egofront"))
        .args(["train", p(&config), "-q", "--set", "training.steps=1"])
        .env("EGOFRONT_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run_dir_from(&o).starts_with(&root));
}

#[test]
fn ablate_runs_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), 3, 2, "0.0");
    write_config(dir.path(), "");
    let matrix = dir.path().join("matrix.toml");
    std::fs::write(
        &matrix,
        r#"
base = "tiny.toml"
set = ["training.steps=2"]
eval_split = "train"

[axes]
"control.enabled" = [true, false]
"loss.lambda_perc" = [0.2, 0.0]
"#,
    )
    .unwrap();
    let root = dir.path().join("runs");
    let o = egofront(&["ablate", p(&matrix), "--output-root", p(&root), "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = PathBuf::from(stderr(&o).lines().last().unwrap().trim_start_matches("wrote ").trim());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let mut digests: Vec<&str> = rows.iter().map(|r| r["config_hash"].as_str().unwrap()).collect();
    digests.sort();
    digests.dedup();
    assert_eq!(digests.len(), 4);
    for r in rows {
        assert!(r["report"]["config_hash"].as_str().unwrap() == r["config_hash"].as_str().unwrap());
    }
    let table = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("| ")).count(), 5);
}

#[test]
fn unavailable_variants_are_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), 3, 2, "0.0");
    write_config(dir.path(), "");
    let matrix = dir.path().join("matrix.toml");
    std::fs::write(
        &matrix,
        r#"
base = "tiny.toml"
set = ["training.steps=1"]
eval_split = "train"

[axes]
"codec.kind" = ["toy_autoencoder", "pretrained_vae_adapter"]
"#,
    )
    .unwrap();
    let o = egofront(&["ablate", p(&matrix), "--output-root", p(&dir.path().join("runs")), "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("unavailable"), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(egofront(&["train"]).status.code(), Some(1));
    assert_eq!(egofront(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(egofront(&["--help"]).status.code(), Some(0));
}
