use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sattn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sattn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path, extra: &[&str]) -> String {
    let model = dir.join("model.json");
    let mut args = vec!["make-toy", "--out", s(&model)];
    args.extend_from_slice(extra);
    ok(&args);
    model.to_string_lossy().into_owned()
}

fn write_ids(path: &Path, ids: &[u32]) {
    let text: String = ids.iter().map(|i| format!("{i}\n")).collect();
    std::fs::write(path, text).unwrap();
}

#[test]
fn make_toy_defaults_and_blob_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    toy(a.path(), &[]);
    toy(b.path(), &[]);
    let blob_a = std::fs::read(a.path().join("model.bin")).unwrap();
    assert_eq!(blob_a, std::fs::read(b.path().join("model.bin")).unwrap());
    let manifest = read_json(&a.path().join("model.json"));
    let c = &manifest["config"];
    assert_eq!(
        (c["n_layers"].as_u64(), c["n_heads"].as_u64(), c["d_model"].as_u64(), c["d_head"].as_u64()),
        (Some(8), Some(4), Some(64), Some(16))
    );
    assert_eq!(manifest["version"], 1);
}

#[test]
fn sharing_plan_roundtrips_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), &["--n-layers", "32", "--span", "23:30"]);
    let manifest = read_json(&dir.path().join("model.json"));
    assert_eq!(manifest["config"]["sharing_plan"], serde_json::json!([[23, 30]]));
}

#[test]
fn parity_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy(dir.path(), &[]);
    let report = dir.path().join("parity.json");
    let stdout = ok(&["parity", "--model", &model, "--span", "5:6", "--out", s(&report)]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4);
    let r = read_json(&report);
    assert_eq!(r["data"]["passed"], true);
    assert_eq!(r["meta"]["command"], "parity");
    assert_eq!(r["meta"]["extra"]["plan"], "5:6");
}

#[test]
fn parity_failure_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy(dir.path(), &[]);
    let out = sattn(&["parity", "--model", &model, "--tolerance=-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "validation");
}

#[test]
fn similarity_shows_the_shared_block() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy(dir.path(), &[]);
    let ids = dir.path().join("ids.txt");
    write_ids(&ids, &(0..24).map(|i| (i * 37 + 5) % 256).collect::<Vec<_>>());
    let prefix = dir.path().join("sim");
    ok(&["sim", "--model", &model, "--ids", s(&ids), "--span", "2:6", "--out", s(&prefix)]);
    let csv = std::fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    assert!(csv.starts_with("# meta: "));
    let mut seen = 0;
    for line in csv.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        let (i, j): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        if (2..=6).contains(&i) && (2..=6).contains(&j) {
            assert!((f[2].parse::<f64>().unwrap() - 1.0).abs() <= 1e-6, "{line}");
            seen += 1;
        }
    }
    assert_eq!(seen, 25);
    let json = read_json(&dir.path().join("sim.json"));
    assert!(json["data"]["groups"].is_array());
}

#[test]
fn budget_reports_exact_key_byte_savings() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy(dir.path(), &["--n-layers", "32"]);
    let prefix = dir.path().join("budget");
    ok(&["budget", "--model", &model, "--span", "23:30", "--out", s(&prefix)]);
    let json = read_json(&dir.path().join("budget.json"));
    let rows = json["data"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["plan"], "23:30");
    assert_eq!(rows[1]["key_bytes_delta_pct"].as_f64(), Some(-21.875));

    ok(&["budget", "--preset", "llama2-7b", "--plan", "23:26,27:30", "--seq-len", "128", "--out", s(&prefix)]);
    let csv = std::fs::read_to_string(dir.path().join("budget.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn run_and_ppl_produce_results() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy(dir.path(), &[]);
    let ids = dir.path().join("ids.txt");
    write_ids(&ids, &[1, 2, 3, 4, 5]);
    let stdout = ok(&["run", "--model", &model, "--ids", s(&ids), "--n-steps", "6"]);
    assert_eq!(stdout.split_whitespace().count(), 6);
    let out = dir.path().join("ppl.json");
    ok(&["ppl", "--model", &model, "--ids", s(&ids), "--out", s(&out)]);
    let p = read_json(&out)["data"]["mean_perplexity"].as_f64().unwrap();
    assert!(p.is_finite() && p > 1.0);
}

#[test]
fn errors_are_structured_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = sattn(&["ppl", "--model", s(&missing), "--ids", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"]["kind"], "io");

    let out = sattn(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");

    let model = toy(dir.path(), &[]);
    let out = sattn(&["parity", "--model", &model, "--span", "1:2", "--cla-pairs"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["error"]["message"].is_string());

    let out = sattn(&["sim", "--model", &model, "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}
