use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use erase_core::ImageBuffer;
use serde_json::Value;
use tempfile::TempDir;

fn erase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erase"))
        .args(args)
        .env_remove("ERASE_LOG")
        .output()
        .expect("spawn erase")
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn ok(o: &Output) {
    assert_eq!(
        o.status.code(),
        Some(0),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        stderr(o)
    );
}

#[test]
fn analyze_constant_image_has_zero_global_entropy() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("flat.png");
    ImageBuffer::filled(112, 84, 130).unwrap().save(&img).unwrap();
    let o = erase(&["analyze", "--image", s(&img)]);
    ok(&o);
    assert!(stdout(&o).contains("global_entropy: 0.000000"), "{}", stdout(&o));
}

#[test]
fn analyze_fixture_matches_golden_entropy() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("a");
    let o = erase(&["analyze", "--image", &fixture("fixture.png"), "--out", s(&out)]);
    ok(&o);
    let golden = read_json(&fixtures().join("golden.json"));
    let map = read_json(&out.join("entropy_map.json"));
    let (got, want) = (floats(&map["values"]), floats(&golden["entropy"]));
    assert_eq!(got.len(), want.len());
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for f in ["heatmap.png", "mask_high.png", "mask_low.png"] {
        let img = ImageBuffer::open(out.join(f)).unwrap();
        assert_eq!((img.width(), img.height()), (6, 4), "{f}");
    }
}

#[test]
fn two_bins_on_binary_image() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("bin.png");
    // left half constant, right half alternating 0/255
    ImageBuffer::from_fn(112, 56, |x, y| {
        if x < 56 {
            0
        } else if (x + y) % 2 == 0 {
            255
        } else {
            0
        }
    })
    .unwrap()
    .save(&img)
    .unwrap();
    let out = dir.path().join("a");
    ok(&erase(&[
        "analyze",
        "--image",
        s(&img),
        "--bins",
        "2",
        "--out",
        s(&out),
    ]));
    let values = floats(&read_json(&out.join("entropy_map.json"))["values"]);
    assert!(
        values.iter().all(|v| *v == 0.0 || (v - 2f64.ln()).abs() < 1e-12),
        "{values:?}"
    );
    assert!(values.contains(&0.0) && values.iter().any(|v| *v > 0.0));
}

#[test]
fn pipeline_on_dump_matches_golden() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r");
    let dump = format!("dump:{}", fixture("dump"));
    let o = erase(&[
        "pipeline",
        "--image",
        &fixture("fixture.png"),
        "--attn",
        &dump,
        "--out",
        s(&out),
    ]);
    ok(&o);
    let golden = read_json(&fixtures().join("golden.json"));
    let r = read_json(&out.join("result.json"));
    assert_eq!(r["stage1_indices"], golden["stage1_indices"]);
    assert_eq!(r["kept_indices"], golden["kept_indices"]);
    assert_eq!(r["bypassed"], Value::Bool(false));
    let (got, want) = (floats(&r["stage2_scores"]["values"]), floats(&golden["stage2_scores"]));
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-5);
    }
    assert_eq!(r["cost"]["final_tokens"], 6);
    for f in ["cost.json", "mask_stage1.png", "mask_stage2.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("r{run}"));
        ok(&erase(&[
            "pipeline",
            "--image",
            &fixture("fixture.png"),
            "--attn",
            "synthetic:7",
            "--out",
            s(&out),
        ]));
        outputs.push(std::fs::read(out.join("result.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn large_budget_bypasses_stage_two() {
    let o = erase(&[
        "pipeline",
        "--image",
        &fixture("fixture.png"),
        "--attn",
        "synthetic:1",
        "--k-final",
        "1000",
    ]);
    ok(&o);
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["bypassed"], Value::Bool(true));
    assert_eq!(r["stage2_scores"], Value::Null);
    assert_eq!(r["kept_indices"], r["stage1_indices"]);
    assert_eq!(r["evicted_count"], 0);
}

#[test]
fn builtin_policy_prints_provenance() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r");
    let o = erase(&[
        "pipeline",
        "--image",
        &fixture("fixture.png"),
        "--attn",
        "synthetic",
        "--out",
        s(&out),
    ]);
    ok(&o);
    assert!(
        stdout(&o).contains("provenance: built-in (published optimized thresholds for qwen2.5-vl-7b)"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn dump_without_the_selected_layer_is_a_data_error() {
    // the 3B model selects layer 22, which the fixture dump does not carry
    let dump = format!("dump:{}", fixture("dump"));
    let o = erase(&[
        "pipeline",
        "--image",
        &fixture("fixture.png"),
        "--policy",
        "qwen2.5-vl-3b",
        "--attn",
        &dump,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no layer 22"), "{}", stderr(&o));
}

#[test]
fn missing_image_is_a_data_error_naming_the_path() {
    let o = erase(&["analyze", "--image", "/nonexistent/x.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/x.png"));
}

#[test]
fn usage_errors_exit_one() {
    let o = erase(&["optimize", "--iterations", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("--iterations must be at least 10"),
        "{}",
        stderr(&o)
    );

    for args in [
        &["frobnicate"][..],
        &["analyze"],
        &["pipeline", "--image", "x.png", "--attn", "magic"],
        &[
            "pipeline",
            "--image",
            "x.png",
            "--attn",
            "synthetic",
            "--k-final",
            "1.5",
        ],
        &["analyze", "--image", "x.png", "--patch-size", "28y"],
        &["optimize", "--alpha", "2"],
    ] {
        assert_eq!(erase(args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(erase(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_model_is_a_data_error() {
    let o = erase(&["prune", "--image", &fixture("fixture.png"), "--policy", "llava-9000"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("llava-9000"));
}

#[test]
fn prune_writes_stage_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("p");
    ok(&erase(&["prune", "--image", &fixture("fixture.png"), "--out", s(&out)]));
    let r = read_json(&out.join("stage1.json"));
    assert_eq!(
        r["kept_indices"],
        read_json(&fixtures().join("golden.json"))["stage1_indices"]
    );
}

#[test]
fn optimize_trace_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let mut traces = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("o{run}"));
        ok(&erase(&["optimize", "--seed", "7", "--out", s(&out)]));
        traces.push(std::fs::read_to_string(out.join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    assert_eq!(traces[0].lines().count(), 101);
    assert!(traces[0].starts_with("iteration,phase,t1,t2,t3,p1,p2,p3,p4,c1,c2,c3,c4,accuracy"));
}

fn trace_column(path: &Path, name: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let col = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn alpha_zero_maximizes_efficiency() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    ok(&erase(&["optimize", "--alpha", "0", "--seed", "3", "--out", s(&out)]));
    let search = read_json(&out.join("search.json"));
    let best = search["best_by_objective"]["efficiency_term"].as_f64().unwrap();
    let max = trace_column(&out.join("trace.csv"), "efficiency_term")
        .into_iter()
        .fold(f64::MIN, f64::max);
    assert_eq!(best, max);
    let policy = read_json(&out.join("best_by_objective.json"));
    assert_eq!(policy["model_id"], "qwen2.5-vl-7b");
}

#[test]
fn report_scaling_and_statistics() {
    let dir = TempDir::new().unwrap();
    // simple images only: every run picks the early layer
    let mut results = Vec::new();
    for (i, v) in [10u8, 120, 250].iter().enumerate() {
        let img = dir.path().join(format!("flat{i}.png"));
        ImageBuffer::filled(168, 112, *v).unwrap().save(&img).unwrap();
        let out = dir.path().join(format!("r{i}"));
        ok(&erase(&[
            "pipeline",
            "--image",
            s(&img),
            "--attn",
            "synthetic:1",
            "--out",
            s(&out),
        ]));
        results.push(out.join("result.json").display().to_string());
    }
    let rep = dir.path().join("rep");
    let mut args = vec!["report", "--out", s(&rep), "--results"];
    args.extend(results.iter().map(String::as_str));
    ok(&erase(&args));
    let summary = read_json(&rep.join("summary.json"));
    assert_eq!(summary["mean_stage2_layer"].as_f64().unwrap(), 2.0);

    // mixed corpus: mean ratio stays inside the policy's ratio range
    let out = dir.path().join("textured");
    ok(&erase(&[
        "pipeline",
        "--image",
        &fixture("fixture.png"),
        "--attn",
        "synthetic:1",
        "--out",
        s(&out),
    ]));
    results.push(out.join("result.json").display().to_string());
    let mut args = vec!["report", "--out", s(&rep), "--results"];
    args.extend(results.iter().map(String::as_str));
    ok(&erase(&args));
    let ratio = read_json(&rep.join("summary.json"))["mean_stage1_prune_ratio"]
        .as_f64()
        .unwrap();
    assert!((0.1732..=0.5966).contains(&ratio), "{ratio}");
    assert!(rep.join("costs.csv").exists());

    let tokens = trace_column(&rep.join("scaling.csv"), "tokens");
    let sides: Vec<f64> = trace_column(&rep.join("scaling.csv"), "width")
        .iter()
        .map(|w| w / 28.0)
        .collect();
    for (t, n) in tokens.iter().zip(&sides) {
        assert_eq!(*t, n * n);
    }
    assert!(tokens.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn bench_directory_feeds_optimize() {
    let dir = TempDir::new().unwrap();
    let bench = dir.path().join("bench");
    ok(&erase(&["bench", "--out", s(&bench), "--count", "12", "--seed", "4"]));
    assert!(bench.join("masks.json").exists());
    let o = erase(&["optimize", "--bench", s(&bench), "--iterations", "12"]);
    ok(&o);
    assert!(stdout(&o).contains("selected (highest accuracy)"));
}

#[test]
fn log_level_from_environment() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("a");
    let o = Command::new(env!("CARGO_BIN_EXE_erase"))
        .args(["analyze", "--image", &fixture("fixture.png"), "--out", s(&out)])
        .env("ERASE_LOG", "info")
        .output()
        .unwrap();
    ok(&o);
    assert!(stderr(&o).contains("wrote analysis"), "{}", stderr(&o));
}
