use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn glab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glab")).args(args).current_dir(cwd).output().expect("spawn glab")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is a JSON error summary")
}

#[test]
fn gen_writes_image_and_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(&glab(&["gen", "--variant", "symbols+lines", "--seeds", "0..3", "--objects", "6", "--out", "scenes"], dir.path()));
    assert_eq!(v["scenes"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("scenes/symbols+lines_2.png").is_file());
    assert!(dir.path().join("scenes/symbols+lines_2.json").is_file());
}

#[test]
fn scaffold_writes_image_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    ok_json(&glab(&["gen", "--variant", "baseline", "--seeds", "1", "--out", "s"], dir.path()));
    let v = ok_json(&glab(
        &["scaffold", "--in", "s/baseline_1.png", "--kind", "grid", "--rows", "4", "--cols", "4", "--margin", "2", "--out", "g.png", "--meta", "g.meta.json"],
        dir.path(),
    ));
    assert_eq!(v["meta"], "g.meta.json");
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("g.meta.json")).unwrap()).unwrap();
    assert!(meta.is_object());
    assert!(dir.path().join("g.png").is_file());
}

#[test]
fn run_with_config_and_overrides_then_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("icg.toml"), "kind = \"icg\"\n[dataset]\nn_samples = 2\n").unwrap();
    let v = ok_json(&glab(&["run", "--config", "icg.toml", "--set", "probe.layers=[0, 7]", "--output-dir", "out"], dir.path()));
    let run_dir = dir.path().join(v["run_dir"].as_str().unwrap());
    assert!(run_dir.join("manifest.json").is_file());
    assert!(run_dir.join("reports/icg.png").is_file());
    let r = ok_json(&glab(&["report", "--run", run_dir.to_str().unwrap()], dir.path()));
    assert_eq!(r["kind"], "icg");
}

#[test]
fn swap_on_the_mock_reports_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(&glab(&["swap", "--variant", "causal_rows4", "--pairs", "5", "--pad", "1", "--backend", "mock", "--output-dir", "out"], dir.path()));
    assert_eq!(v["transferred_label_accuracy"], 1.0);
    assert_eq!(v["host_label_accuracy"], 0.0);
}

#[test]
fn eval_subcommands_score_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("ann.json"),
        r#"{"images":[{"id":1}],"categories":[{"id":1,"name":"dog"},{"id":2,"name":"cat"}],"annotations":[{"image_id":1,"category_id":1}]}"#,
    )
    .unwrap();
    std::fs::write(p.join("caps.csv"), "image_id,caption\n1,A dog sits next to a cat.\n").unwrap();
    let v = ok_json(&glab(&["eval", "chair", "--captions", "caps.csv", "--ann", "ann.json"], p));
    assert_eq!(v["chair_i"], 0.5);

    std::fs::write(p.join("qa.csv"), "image_id,object,subset,label,answer\n1,dog,random,yes,Yes.\n1,cat,random,no,No\n").unwrap();
    let v = ok_json(&glab(&["eval", "pope", "--qa", "qa.csv"], p));
    assert_eq!(v["results"][0]["accuracy"], 1.0);

    ok_json(&glab(&["gen", "--variant", "symbols+lines", "--seeds", "4", "--objects", "4", "--out", "gt"], p));
    let gt = glab_core::GroundTruth::from_json(&std::fs::read_to_string(p.join("gt/symbols+lines_4.json")).unwrap()).unwrap();
    let rows = gt.labels_by_partition();
    let text: String = rows.iter().map(|(s, objs)| format!("Row {s}: {}\n", objs.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(", "))).collect();
    std::fs::create_dir_all(p.join("pred")).unwrap();
    std::fs::write(p.join("pred/symbols+lines_4.txt"), text).unwrap();
    let v = ok_json(&glab(&["eval", "describe", "--pred", "pred", "--gt", "gt"], p));
    assert_eq!(v["pooled"]["f1"], 1.0, "{v}");
}

#[test]
fn failures_exit_nonzero_with_json_summary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "kind = \"icg\"\n[dataset]\nn_sample = 2\n").unwrap();
    let out = glab(&["run", "--config", "bad.toml"], dir.path());
    let e = err_json(&out);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("n_sample"));
    assert!(!dir.path().join("runs").exists());

    let e = err_json(&glab(&["report", "--run", "missing"], dir.path()));
    assert_eq!(e["error"]["kind"], "missing_artifact");
}

#[test]
fn external_backend_matches_in_process_mock() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let exe = env!("CARGO_BIN_EXE_glab");
    let config = format!(
        "kind = \"swap\"\n[swap]\npairs = 3\n[backend]\nkind = \"external\"\nprogram = {exe:?}\nargs = [\"mock-backend\"]\n"
    );
    std::fs::write(p.join("ext.toml"), config).unwrap();
    let cmd = |args: &[&str]| {
        Command::new(exe).args(args).current_dir(p).env("GLAB_CACHE_DIR", p.join("cache")).output().unwrap()
    };
    let ext = ok_json(&cmd(&["run", "--config", "ext.toml", "--output-dir", "ext"]));
    let local = ok_json(&cmd(&["swap", "--pairs", "3", "--backend", "mock", "--output-dir", "local"]));
    let read = |v: &Value| std::fs::read(p.join(v["run_dir"].as_str().unwrap()).join("probes/swap_summary.json")).unwrap();
    assert_eq!(read(&ext), read(&local));
}
