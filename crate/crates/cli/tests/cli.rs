use std::path::Path;
use std::process::{Command, Output};

use mvp_core::model::{load_checkpoint, Variant};

fn mvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvp"))
        .args(args)
        .env_remove("MVP_SEED")
        .output()
        .expect("run mvp")
}

fn ok(args: &[&str]) -> String {
    let out = mvp(args);
    assert!(
        out.status.success(),
        "mvp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mvp(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_MODEL: [&str; 10] = [
    "--set",
    "latent_dim=16",
    "--set",
    "qk_dim=8",
    "--set",
    "feature_count=16",
    "--set",
    "ff_dim=16",
    "--set",
    "conv_channels=[4,8]",
];

fn tiny_data(dir: &Path, protocol: &str) {
    ok(&[
        "gen-data", "--protocol", protocol, "--objects", "3", "--res", "8", "--views", "4",
        "--sequences-per-object", "1", "--seed", "5", "--out", p(dir),
    ]);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "provenance.json" {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_splits_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |out: &Path| {
        vec![
            "gen-data".to_string(), "--protocol".into(), "camera_pan".into(), "--objects".into(), "10".into(),
            "--res".into(), "8".into(), "--views".into(), "3".into(), "--sequences-per-object".into(), "1".into(),
            "--seed".into(), "7".into(), "--out".into(), out.to_str().unwrap().into(),
        ]
    };
    let out = ok(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.contains("train 8, val 1, test 1"), "{out}");
    ok(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(tree(&a), tree(&b));

    let prov: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 7);
    assert_eq!(prov["command"], "gen-data");
    assert_eq!(prov["config_hash"].as_str().unwrap().len(), 64);

    assert_eq!(code(&args(&a).iter().map(String::as_str).collect::<Vec<_>>()), 2);
    let mut forced = args(&a);
    forced.push("--force".into());
    ok(&forced.iter().map(String::as_str).collect::<Vec<_>>());
}

#[test]
fn seed_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mvp"))
        .args(["gen-data", "--objects", "3", "--res", "8", "--views", "2", "--sequences-per-object", "1", "--out"])
        .arg(tmp.path())
        .env("MVP_SEED", "41")
        .output()
        .unwrap();
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 41);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&["gen-data", "--protocol", "slide_behind", "--objects", "1", "--out", p(&out)]), 2);
    assert!(!out.exists());
    assert_eq!(code(&["gen-data", "--protocol", "nope", "--out", p(&out)]), 2);
    assert_eq!(code(&["gen-data", "--set", "bogus=1", "--out", p(&out)]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
}

#[test]
fn train_echoes_flags_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data, "camera_pan");
    let run = |out: &Path| {
        let mut args = vec![
            "train", "--data", p(&data), "--out", p(out), "--variant", "mvt", "--train-views", "3", "--steps", "3",
            "--batch-size", "1", "--set", "eval_every=2", "--set", "log_every=1",
        ];
        args.extend(SMALL_MODEL);
        ok(&args)
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    let model = load_checkpoint(&a.join("model.mvpc"), None).unwrap();
    assert_eq!(model.config().variant, Variant::Mvt);
    assert_eq!(model.config().train_views, 3);
    assert_eq!(model.config().resolution, 8);
    let log = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(log.starts_with("step,split,loss,jaccard\n"));
    assert_eq!(log.lines().count(), 1 + 3 + 2);
    assert_eq!(log, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("model.mvpc")).unwrap(), std::fs::read(b.join("model.mvpc")).unwrap());
    assert!(a.join("provenance.json").exists());
}

#[test]
fn train_rejects_resolution_mismatch_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data, "camera_pan");
    let out = tmp.path().join("out");
    let out_s = p(&out).to_string();
    let r = mvp(&["train", "--data", p(&data), "--out", &out_s, "--set", "resolution=16"]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("resolution 16"));
    assert!(!out.exists());
}

#[test]
fn single_view_on_hiding_notes_unused_state() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data, "object_hiding");
    let out = tmp.path().join("out");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&out), "--variant", "single_view", "--steps", "1", "--train-views", "3"];
    args.extend(SMALL_MODEL);
    let stdout = ok(&args);
    assert!(stdout.contains("state is unused"), "{stdout}");

    let ev = tmp.path().join("eval");
    let stdout = ok(&["eval", "--data", p(&data), "--checkpoint", p(&out.join("model.mvpc")), "--out", p(&ev)]);
    assert!(stdout.contains("fully occluded frames"), "{stdout}");
    let csv = std::fs::read_to_string(ev.join("frames.csv")).unwrap();
    assert!(csv.starts_with("seq_id,frame,jaccard,precision,recall,fscore\n"));
}

#[test]
fn oracle_eval_scores_one_and_exports_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_data(&data, "camera_pan");
    let out = tmp.path().join("eval");
    ok(&["eval", "--data", p(&data), "--oracle", "--split", "test", "--export", "meshes,slices", "--export", "grids", "--out", p(&out)]);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["splits"]["test"]["jaccard"], 1.0);
    let frames = summary["splits"]["test"]["frames"].as_u64().unwrap() as usize;
    assert_eq!(frames, 4);
    let count = |d: &str| std::fs::read_dir(out.join(d)).unwrap().count();
    assert_eq!(count("meshes"), frames);
    assert_eq!(count("slices"), 2 * frames);
    assert_eq!(count("grids"), 2 * frames);
}

#[test]
fn eval_rejects_missing_split_and_bad_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "gen-data", "--objects", "2", "--res", "8", "--views", "2", "--sequences-per-object", "1", "--set",
        "split=[1.0,0.0,0.0]", "--out", p(&data),
    ]);
    let out = tmp.path().join("eval");
    assert_eq!(code(&["eval", "--data", p(&data), "--oracle", "--split", "val", "--out", p(&out)]), 2);
    let junk = tmp.path().join("junk.mvpc");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--data", p(&data), "--checkpoint", p(&junk), "--split", "train", "--out", p(&out)]), 3);
    assert_eq!(code(&["eval", "--data", p(&data), "--split", "train", "--out", p(&out)]), 2);
}

#[test]
fn bench_reports_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["bench", "--lengths", "4,16", "--steps", "10", "--trials", "3", "--out", p(tmp.path())]);
    assert!(stdout.contains("time(L=16) / time(L=4)"), "{stdout}");
    assert!(tmp.path().join("bench.csv").exists());
}
