//! Acceptance gate for the pipeline-level criteria: determinism of the full
//! artifact chain (9) and end-to-end CLI integration with throughput
//! measurement (10). Each test prints one `ACCEPTANCE <nn> <slug>:
//! PASS|FAIL` line; criteria 1-8 live in the core crate's suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

// Raw stdout write so the line survives libtest's capture in a plain
// `cargo test` run.
fn verdict(number: u32, slug: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!(
        "ACCEPTANCE {number:02} {slug}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    std::io::stdout().write_all(line.as_bytes()).ok();
    assert!(pass, "{}", line.trim_end());
}

fn tvpr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvpr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) {
    let out = tvpr(dir, args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = r#"{
    "image_size": 32, "patch_size": 16, "embed_dim": 16, "n_heads": 2,
    "n_encoder_layers": 1, "n_decoder_layers": 1, "n_queries": 4,
    "max_word_len": 8, "n_polygon_points": 4, "n_sample_points": 2
}"#;

/// The full chain with identical relative paths, so artifacts from two runs
/// in different roots are comparable byte for byte.
fn run_pipeline(root: &Path) {
    std::fs::write(root.join("tiny.json"), TINY_CONFIG).unwrap();
    run_ok(root, &["synth", "--places", "4", "--words-per-place", "1", "--canvas", "32", "--seed", "9", "--out", "data"]);
    run_ok(root, &["pretrain", "--frames", "data/map/frames", "--steps", "30", "--batch-size", "2", "--seed", "4", "--config", "tiny.json", "--out", "mae.ckpt"]);
    run_ok(root, &["train", "--annotations", "data/map/annotations.jsonl", "--steps", "30", "--batch-size", "2", "--seed", "4", "--init", "mae.ckpt", "--out", "model.ckpt"]);
    run_ok(root, &["spot", "--model", "model.ckpt", "--frames", "data/query/frames", "--threshold", "0.3", "--out", "pred.jsonl"]);
    run_ok(root, &["map", "--annotations", "data/map/annotations.jsonl", "--min-confidence", "0.5", "--min-length", "1", "--out", "place-map.json"]);
    run_ok(root, &["query", "--map", "place-map.json", "--annotations", "data/query/annotations.jsonl", "--out", "results.jsonl"]);
    run_ok(root, &["eval", "vpr", "--pred", "results.jsonl", "--truth", "data/truth.json", "--tolerance", "0", "--out-csv", "curve.csv", "--out-json", "vpr.json", "--out-svg", "curve.svg"]);
    run_ok(root, &["eval", "detection", "--pred", "pred.jsonl", "--truth", "data/query/annotations.jsonl", "--out", "det.json"]);
    run_ok(root, &["eval", "e2e", "--pred", "pred.jsonl", "--truth", "data/query/annotations.jsonl", "--out", "e2e.json"]);
}

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn c09_pipeline_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for root in [&a, &b] {
        std::fs::create_dir_all(root).unwrap();
        run_pipeline(root);
    }
    let (fa, fb) = (collect_files(&a), collect_files(&b));
    let same_names = fa.keys().eq(fb.keys());
    let mut differing = Vec::new();
    for (path, bytes) in &fa {
        if fb.get(path) != Some(bytes) {
            differing.push(path.display().to_string());
        }
    }
    for path in &differing {
        eprintln!("artifact differs between runs: {path}");
    }
    verdict(
        9,
        "pipeline-determinism",
        same_names && differing.is_empty(),
        &format!("{} artifacts compared, {} differ", fa.len(), differing.len()),
    );
}

#[test]
fn c10_cli_pipeline_completes_and_fps_responds_to_sleep() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    run_pipeline(root);

    // The sweep report: five interpolated precision readouts plus the raw
    // curve points.
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("vpr.json")).unwrap()).unwrap();
    let readouts = summary["precision_at_recall"].as_array().unwrap();
    let recalls: Vec<f64> = readouts.iter().map(|p| p["recall"].as_f64().unwrap()).collect();
    let report_ok = recalls == [0.2, 0.4, 0.6, 0.8, 0.9]
        && std::fs::read_to_string(root.join("curve.csv"))
            .unwrap()
            .starts_with("threshold,precision,recall\n");

    let bench_fps = |sleep_ms: &str, out: &str| -> f64 {
        run_ok(
            root,
            &[
                "bench", "--model", "model.ckpt", "--frames", "data/query/frames", "--warmup",
                "1", "--trials", "2", "--sleep-ms", sleep_ms, "--out", out,
            ],
        );
        let report: Value =
            serde_json::from_str(&std::fs::read_to_string(root.join(out)).unwrap()).unwrap();
        report["fps"].as_f64().unwrap()
    };
    let fps_plain = bench_fps("0", "bench.json");
    let fps_slowed = bench_fps("50", "bench-slowed.json");

    verdict(
        10,
        "cli-pipeline-and-fps",
        report_ok && fps_plain > 0.0 && fps_slowed > 0.0 && fps_slowed < fps_plain,
        &format!("PR report ok: {report_ok}, fps {fps_plain:.0} -> {fps_slowed:.1} with 50ms sleep"),
    );
}
