use std::path::Path;
use std::process::{Command, Output};

use bevkit_core::head::{read_detections_jsonl, Detection, HeadWeights};
use bevkit_core::lift_splat::LookupTable;
use bevkit_core::pipeline::PipelineConfig;
use bevkit_core::reparam::GraphDesc;
use serde_json::Value;

fn bevkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevkit")).args(args).output().unwrap()
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_graph(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("trunk.json");
    HeadWeights::random(6, 2, 3, 4).unwrap().trunk.save(&path).unwrap();
    path
}

#[test]
fn lut_build_then_info() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let rig = dir.path().join("rig.json");
    cfg.load_rig(Path::new(".")).unwrap().save(&rig).unwrap();
    let out = dir.path().join("rig.lut");
    let built = json_of(&bevkit(&["lut", "build", "--rig", s(&rig), "--out", s(&out)]));
    let info = json_of(&bevkit(&["lut", "info", s(&out)]));
    assert_eq!(built, info);
    let lut = LookupTable::load(&out).unwrap();
    assert_eq!(info["valid_cells"], lut.valid_count());
    assert_eq!(info["fingerprint"], format!("{:016x}", lut.fingerprint()));
}

#[test]
fn reparam_run_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let graph = write_graph(dir.path());
    let fused = dir.path().join("fused.json");
    let summary = json_of(&bevkit(&["reparam", "run", "--graph", s(&graph), "--out", s(&fused)]));
    assert_eq!(summary["parallel_branches"][1], 0);
    assert!(GraphDesc::load(&fused).unwrap().is_plain());
    let report = json_of(&bevkit(&[
        "reparam", "verify", "--original", s(&graph), "--fused", s(&fused), "--trials", "5", "--seed", "3", "--tol", "1e-4",
    ]));
    assert_eq!(report["pass"], true);

    // a different graph fails verification
    let other = dir.path().join("other.json");
    HeadWeights::random(6, 2, 3, 5).unwrap().trunk.save(&other).unwrap();
    let failed = bevkit(&["reparam", "verify", "--original", s(&graph), "--fused", s(&other), "--trials", "2"]);
    assert_eq!(failed.status.code(), Some(3));
}

#[test]
fn reparam_budget_too_small_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let graph = write_graph(dir.path());
    let out = dir.path().join("fused.json");
    let res = bevkit(&[
        "reparam", "run", "--graph", s(&graph), "--budget-E", "0.01", "--budget-e", "0.01", "--budget-cap", "1", "--out", s(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn nms_filters_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let det = |x: f64, score: f64, class_id: usize| Detection {
        x,
        y: 0.0,
        z: 0.0,
        w: 1.0,
        l: 1.0,
        h: 1.0,
        yaw: 0.0,
        vx: 0.0,
        vy: 0.0,
        score,
        class_id,
    };
    let dets = [det(0.0, 0.9, 0), det(0.5, 0.8, 0), det(0.5, 0.7, 1), det(3.0, 0.6, 0)];
    let text: String = dets.iter().map(|d| serde_json::to_string(d).unwrap() + "\n").collect();
    let input = dir.path().join("dets.jsonl");
    std::fs::write(&input, text).unwrap();
    let radii = dir.path().join("radii.json");
    std::fs::write(&radii, r#"{"0": 1.0, "1": 1.0}"#).unwrap();
    let out = dir.path().join("kept.jsonl");
    assert!(bevkit(&["nms", "--dets", s(&input), "--radii", s(&radii), "--out", s(&out)]).status.success());
    let kept = read_detections_jsonl(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(kept, vec![dets[0], dets[2], dets[3]]);

    std::fs::write(&radii, r#"{"0": 1.0}"#).unwrap();
    assert_eq!(bevkit(&["nms", "--dets", s(&input), "--radii", s(&radii), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn flops_reports_graph_and_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let graph = write_graph(dir.path());
    let report = json_of(&bevkit(&["flops", "--graph", s(&graph), "--input-shape", "6x8x8"]));
    let modules = report["modules"].as_array().unwrap();
    assert_eq!(modules.len(), 3);
    let sum: u64 = modules.iter().map(|m| m["flops"].as_u64().unwrap()).sum();
    assert_eq!(sum, report["total"].as_u64().unwrap());

    let csv = bevkit(&["flops", "--graph", s(&graph), "--input-shape", "6x8x8", "--format", "csv"]);
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("module,flops,percent\n"));
    assert_eq!(text.lines().count(), 5);

    let pipeline = json_of(&bevkit(&["flops", "--config", s(&write_config(dir.path(), ""))]));
    let names: Vec<&str> = pipeline["modules"].as_array().unwrap().iter().map(|m| m["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["backbone", "depth", "projection", "temporal", "encoder", "head"]);

    let bad = bevkit(&["flops", "--graph", s(&graph), "--input-shape", "6x8"]);
    assert_eq!(bad.status.code(), Some(2));
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let mut cfg: Value = serde_json::from_str(&PipelineConfig::default().to_json().unwrap()).unwrap();
    if !extra.is_empty() {
        let patch: Value = serde_json::from_str(extra).unwrap();
        for (k, v) in patch.as_object().unwrap() {
            cfg[k] = v.clone();
        }
    }
    let path = dir.join("pipeline.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn demo_localizes_objects() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = json_of(&bevkit(&["demo", "e2e", "--config", s(&cfg), "--seed", "7", "--objects", "3"]));
    assert_eq!(out["objects"].as_array().unwrap().len(), 3);
    assert_eq!(out["within_one_cell"], 3);
    assert!(!out["detections"].as_array().unwrap().is_empty());
    // same seed, same bytes
    let again = bevkit(&["demo", "e2e", "--config", s(&cfg), "--seed", "7", "--objects", "3"]);
    assert_eq!(serde_json::from_slice::<Value>(&again.stdout).unwrap(), out);
}

#[test]
fn mask_views_zeroes_the_masked_sector() {
    let out = json_of(&bevkit(&["mask-views", "--mask", "front,back", "--seed", "2"]));
    for cam in out["cameras"].as_array().unwrap() {
        if cam["masked"] == true {
            assert!(cam["exclusive_voxels"].as_u64().unwrap() > 0);
            assert_eq!(cam["exclusive_mass_masked"], 0.0);
        }
    }
    let bad = bevkit(&["mask-views", "--mask", "roof"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("roof"));
}

#[test]
fn bench_reports_lookup_speedup() {
    let out = json_of(&bevkit(&["bench", "--frames", "5", "--warmup", "1"]));
    assert_eq!(out["pipeline"]["frames"], 5);
    assert!(out["projection"]["speedup"].as_f64().unwrap() > 1.0);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"mystery": 1}"#);
    assert_eq!(bevkit(&["demo", "e2e", "--config", s(&cfg)]).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    assert_eq!(bevkit(&["demo", "e2e", "--config", s(&missing)]).status.code(), Some(2));

    let threads = Command::new(env!("CARGO_BIN_EXE_bevkit"))
        .args(["lut", "info", s(&missing)])
        .env("BEVKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&threads.stderr).contains("BEVKIT_THREADS"));
}

#[test]
fn thread_count_does_not_change_output() {
    let run = |n: &str| {
        Command::new(env!("CARGO_BIN_EXE_bevkit"))
            .args(["demo", "e2e", "--seed", "11", "--objects", "5"])
            .env("BEVKIT_THREADS", n)
            .output()
            .unwrap()
    };
    let one = run("1");
    assert!(one.status.success());
    assert_eq!(one.stdout, run("3").stdout);
}
