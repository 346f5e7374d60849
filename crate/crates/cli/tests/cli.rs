use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bnconvex"))
}

fn write_data(path: &Path, n: usize, d: usize) {
    let mut text = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    text.push_str(",y\n");
    for i in 0..n {
        let row: Vec<String> = (0..d).map(|j| format!("{}", ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0)).collect();
        text.push_str(&format!("{},{}\n", row.join(","), ((i * 5) % 7) as f64 / 3.0 - 1.0));
    }
    fs::write(path, text).unwrap();
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out-dir").arg(out).output().unwrap()
}

#[test]
fn repeated_runs_write_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    write_data(&data, 16, 3);
    let data = data.to_str().unwrap();
    let args = ["fit-gd", "--data", data, "--label", "y", "--epochs", "30", "--restarts", "2", "--test-fraction", "0.25", "--seed", "11"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&args, &a).status.success());
    assert!(run(&args, &b).status.success());
    for f in ["curves.csv", "model.json", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    // The manifests differ only in the output directory they record.
    let manifest = |dir: &Path| {
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        m["config"]["output_dir"] = serde_json::Value::Null;
        m
    };
    assert_eq!(manifest(&a), manifest(&b));
}

#[test]
fn closed_form_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    write_data(&data, 4, 6);
    let out = dir.path().join("out");
    let res = run(&["closed-form", "--data", data.to_str().unwrap(), "--label", "y", "--beta", "0.2"], &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["duality_gap"].as_f64().unwrap() <= 1e-9);
    let printed: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(printed["summary"], summary);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    write_data(&data, 8, 3);
    let data = data.to_str().unwrap();
    let out = dir.path().join("out");
    let missing = run(&["fit-gd", "--label", "y"], &out);
    assert_eq!(missing.status.code(), Some(2));
    let stderr: serde_json::Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(stderr["error"], "config");
    let unknown = run(&["fit-gd", "--data", data, "--label", "nope"], &out);
    assert_eq!(unknown.status.code(), Some(2));
    // 8 rows in 3 dimensions are not full row rank.
    let rank = run(&["closed-form", "--data", data, "--label", "y", "--beta", "0.1"], &out);
    assert_eq!(rank.status.code(), Some(2));
    let diverge = run(&["fit-gd", "--data", data, "--label", "y", "--lr", "1e300", "--epochs", "5", "--beta", "0"], &out);
    assert_eq!(diverge.status.code(), Some(3), "{}", String::from_utf8_lossy(&diverge.stderr));
    assert_eq!(bin().arg("bogus").output().unwrap().status.code(), Some(2));
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    write_data(&data, 6, 2);
    let out = dir.path().join("env-out");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"mode": "fit-convex", "beta": 0.1}"#).unwrap();
    let status = bin()
        .args(["fit-convex", "--data", data.to_str().unwrap(), "--label", "y", "--config", cfg.to_str().unwrap()])
        .env("BNCONVEX_OUT_DIR", &out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("curves.csv").exists() && out.join("timing.json").exists());
}
