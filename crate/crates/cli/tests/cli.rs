use std::path::Path;
use std::process::Command;

const TREE: &str = r#"
experiment = "validate"
master_seed = 11
[group]
factors = [{ preset = "cyclic:2" }, { preset = "cyclic:2" }, { preset = "cyclic:2" }]
[offspring]
pmf = [0.0, 0.8, 0.2]
"#;

fn freebrw() -> Command {
    Command::new(env!("CARGO_BIN_EXE_freebrw"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let good = write(d.path(), "good.toml", TREE);
    let st = freebrw().args(["validate", "--config"]).arg(&good).status().unwrap();
    assert_eq!(st.code(), Some(0));

    let bad = write(d.path(), "bad.toml", &TREE.replace("[0.0, 0.8, 0.2]", "[0.2, 0.6, 0.2]"));
    let out = freebrw().args(["validate", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[A2]"));

    let st = freebrw().args(["validate", "--config"]).arg(d.path().join("missing.toml")).status().unwrap();
    assert_eq!(st.code(), Some(3));
}

#[test]
fn run_then_report() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.toml", TREE);
    let out = d.path().join("out");
    let st = freebrw()
        .args(["run", "--seed", "5", "--threads", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 5);
    assert_eq!(manifest["schema"], "run-manifest");

    let a = freebrw().arg("report").arg(&out).output().unwrap();
    let b = freebrw().arg("report").arg(&out).output().unwrap();
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("# Run report: validate"));
}

#[test]
fn report_on_empty_dir_fails() {
    let d = tempfile::tempdir().unwrap();
    let out = freebrw().arg("report").arg(d.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
}

#[test]
fn cap_override_is_recorded() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.toml", &(TREE.replace("\"validate\"", "\"speed-experiment\"")
        + "[ldp]\nmc_replicas = 2000\ndrift_replicas = 200\ndrift_n = 200\n[speed]\nn = 30\nreplicas = 4\ncheckpoints = [10, 30]\n[speed.many_to_one]\nenabled = false\n"));
    let out = d.path().join("out");
    let st = freebrw()
        .args(["run", "--cap-override", "pop_cap=20", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["effective_config"]["caps"]["pop_cap"], 20);
    assert!(!m["caps_hit"].as_array().unwrap().is_empty());
}
