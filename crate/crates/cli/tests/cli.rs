use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_radixflow"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("radixflow-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn simulate_writes_metrics_and_steps() {
    let out = scratch("sim");
    let run = |dir: &Path| {
        let st = bin()
            .args(["simulate", "--workload"])
            .arg(configs().join("few_shot.json"))
            .arg("--config")
            .arg(configs().join("engine.json"))
            .arg("--out")
            .arg(dir)
            .status()
            .unwrap();
        assert!(st.success());
        std::fs::read_to_string(dir.join("metrics.json")).unwrap()
    };
    let a = run(&out.join("a"));
    let b = run(&out.join("b"));
    assert_eq!(a, b, "metrics are not deterministic");
    let m: serde_json::Value = serde_json::from_str(&a).unwrap();
    for key in ["hit_rate", "optimal_hit_rate", "prefill_compute", "decode_steps", "throughput_programs_per_kilostep", "p95_latency_steps"]
    {
        assert!(m.get(key).is_some(), "missing {key}");
    }
    let csv = std::fs::read_to_string(out.join("a/steps.csv")).unwrap();
    assert!(csv.starts_with("step,time,batch_size"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn json_workload_reports_preprocessing() {
    let out = scratch("json");
    let st = bin().args(["simulate", "--workload"]).arg(configs().join("json_decode.json")).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    assert!(out.join("preprocessing.json").exists());
}

#[test]
fn fsm_compile_dumps_dot_and_json() {
    let out = scratch("fsm");
    let st = bin()
        .args(["fsm", "compile", "--regex", r#"\{"grade": "[ABCD]"\}"#, "--dot"])
        .arg(out.join("g.dot"))
        .arg("--json")
        .arg(out.join("g.json"))
        .status()
        .unwrap();
    assert!(st.success());
    let dot = std::fs::read_to_string(out.join("g.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
    let _: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("g.json")).unwrap()).unwrap();
    let bad = bin().args(["fsm", "compile", "--regex", "(a"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn verify_theorem_over_a_seed_range() {
    let out = bin().args(["verify", "theorem1", "--seeds", "0..19"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("20 of 20 seeds agree"));
}

#[test]
fn replay_passes_and_detects_tampering() {
    let golden = configs().join("walkthrough.json");
    let ok = bin().arg("replay").arg("--golden").arg(&golden).output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("structural diff empty"));

    let dir = scratch("replay");
    let text = std::fs::read_to_string(&golden).unwrap().replacen("\"U2+R2\"", "\"V2+W2\"", 1);
    std::fs::write(dir.join("bad.json"), text).unwrap();
    let bad = bin().arg("replay").arg("--golden").arg(dir.join("bad.json")).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
