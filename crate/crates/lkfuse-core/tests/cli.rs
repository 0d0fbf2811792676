//! End-to-end CLI checks through the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lkfuse")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn lkfuse")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "lkfuse {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        Workspace { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }
}

/// Train a tiny model once and reuse it across checks.
fn trained_workspace() -> Workspace {
    let ws = Workspace::new();
    run_ok(&[
        "train",
        "--synthetic",
        "3",
        "--synthetic-seed",
        "5",
        "--dump-pairs",
        &ws.s("pairs"),
        "--out-dir",
        &ws.s("run"),
        "--desk-scale",
        "--batch",
        "2",
        "--max-steps",
        "2",
        "--seed",
        "9",
    ]);
    ws
}

#[test]
fn train_fuse_eval_round_trip() {
    let ws = trained_workspace();
    assert!(ws.path("run/final.lkc").exists());
    assert!(ws.path("run/train_log.jsonl").exists());

    run_ok(&[
        "fuse",
        "--checkpoint",
        &ws.s("run/final.lkc"),
        "--src-a",
        &ws.s("pairs/a"),
        "--src-b",
        &ws.s("pairs/b"),
        "--out",
        &ws.s("fused"),
    ]);
    assert!(ws.path("fused/synth000.png").exists());

    run_ok(&[
        "eval",
        "--fused",
        &ws.s("fused"),
        "--src-a",
        &ws.s("pairs/a"),
        "--src-b",
        &ws.s("pairs/b"),
        "--out",
        &ws.s("report.csv"),
        "--json",
        &ws.s("report.json"),
    ]);
    let csv = std::fs::read_to_string(ws.path("report.csv")).unwrap();
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "id,SD,AG,SF,SCD,VIFF,SSIM", "fixed column order");
    assert!(csv.lines().any(|l| l.starts_with("mean,")));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn fuse_restores_non_divisible_dims() {
    let ws = trained_workspace();
    // build a 250x250 pair from PNGs
    let img = ndarray::Array2::from_shape_fn((250, 250), |(y, x)| {
        ((y as f64 / 250.0) * 0.5 + (x as f64 / 250.0) * 0.5).clamp(0.0, 1.0)
    });
    for side in ["odd/a", "odd/b"] {
        std::fs::create_dir_all(ws.path(side)).unwrap();
        lkfuse_core::data::save_gray_image(&ws.path(side).join("p.png"), &img).unwrap();
    }
    run_ok(&[
        "fuse",
        "--checkpoint",
        &ws.s("run/final.lkc"),
        "--src-a",
        &ws.s("odd/a"),
        "--src-b",
        &ws.s("odd/b"),
        "--out",
        &ws.s("odd/fused"),
    ]);
    let fused = lkfuse_core::data::load_gray_image(&ws.path("odd/fused/p.png")).unwrap();
    assert_eq!(fused.dim(), (250, 250), "crop-back must restore input dims");
}

#[test]
fn ablate_two_rows_report() {
    let ws = Workspace::new();
    run_ok(&[
        "ablate",
        "--rows",
        "I,Ours",
        "--synthetic",
        "2",
        "--desk-scale",
        "--batch",
        "2",
        "--max-steps",
        "1",
        "--out-dir",
        &ws.s("ablation"),
    ]);
    let table = std::fs::read_to_string(ws.path("ablation/ablation_report.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "row,SD,AG,SF,SCD,VIFF,SSIM");
    assert_eq!(lines.len(), 3, "two data rows:\n{table}");
    assert!(lines[1].starts_with("I,"));
    assert!(lines[2].starts_with("Ours,"));
    assert!(ws.path("ablation/ablation_report.json").exists());
}

#[test]
fn analyze_outputs_are_reproducible_with_no_meta() {
    let ws = trained_workspace();
    let hist_args = |out: &str| {
        vec![
            "analyze-hist".to_string(),
            "--input".into(),
            ws.s("pairs/a/synth000.png"),
            "--bins".into(),
            "32".into(),
            "--out".into(),
            ws.s(out),
            "--no-meta".into(),
        ]
    };
    for out in ["h1.csv", "h2.csv"] {
        let args: Vec<String> = hist_args(out);
        let argrefs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        run_ok(&argrefs);
    }
    assert_eq!(
        std::fs::read(ws.path("h1.csv")).unwrap(),
        std::fs::read(ws.path("h2.csv")).unwrap(),
        "emitted files must be byte-for-byte reproducible"
    );

    for out in ["c1.txt", "c2.txt"] {
        run_ok(&[
            "analyze-consistency",
            "--checkpoint",
            &ws.s("run/final.lkc"),
            "--src-a",
            &ws.s("pairs/a/synth000.png"),
            "--src-b",
            &ws.s("pairs/b/synth000.png"),
            "--patch",
            "16",
            "--out",
            &ws.s(out),
        ]);
    }
    let c1 = std::fs::read_to_string(ws.path("c1.txt")).unwrap();
    assert_eq!(c1, std::fs::read_to_string(ws.path("c2.txt")).unwrap());
    assert!(c1.starts_with("consistency-map v1\n"));
}

#[test]
fn bench_counts_samples() {
    let ws = Workspace::new();
    run_ok(&[
        "bench",
        "--desk-scale",
        "--resolutions",
        "64x64",
        "--warmup",
        "1",
        "--reps",
        "3",
        "--out",
        &ws.s("bench.csv"),
        "--json",
        &ws.s("bench.json"),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("bench.json")).unwrap()).unwrap();
    assert_eq!(json[0]["samples_ms"].as_array().unwrap().len(), 3);
    assert_eq!(json[0]["warmup"], 1);
}

#[test]
fn error_paths_use_distinct_exit_codes() {
    let ws = Workspace::new();

    // missing directory -> io (3)
    let out = run(&[
        "eval",
        "--fused",
        &ws.s("nope"),
        "--src-a",
        &ws.s("nope"),
        "--src-b",
        &ws.s("nope"),
        "--out",
        &ws.s("r.csv"),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error code=3 kind="), "{stderr}");

    // unknown ablation row -> contract (4)
    let out = run(&[
        "ablate",
        "--rows",
        "VIII",
        "--synthetic",
        "1",
        "--out-dir",
        &ws.s("x"),
    ]);
    assert_eq!(out.status.code(), Some(4));

    // bad checkpoint -> format/io (3)
    std::fs::create_dir_all(ws.path("d")).unwrap();
    std::fs::write(ws.path("d/bad.lkc"), b"nope").unwrap();
    let out = run(&[
        "fuse",
        "--checkpoint",
        &ws.s("d/bad.lkc"),
        "--synthetic",
        "1",
        "--out",
        &ws.s("d/out"),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // unknown flag -> usage (2, from the arg parser)
    let out = run(&["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));

    // unsupported device -> contract (4)
    let out = Command::new(bin())
        .env("LKFUSE_DEVICE", "cuda")
        .args(["analyze-hist", "--input", "x.png", "--out", "y.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn checkpoint_dump_locations_exist() {
    let ws = trained_workspace();
    // pairs dumped for downstream fuse/eval demos
    assert!(ws.path("pairs/a/synth000.png").exists());
    assert!(ws.path("pairs/b/synth002.png").exists());
    assert!(Path::new(&ws.s("run/train_log.jsonl")).exists());
}
