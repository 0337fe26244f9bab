use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn capmfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capmfg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name)
}

/// A quick variant of a preset: small batch, few iterations.
fn quick(dir: &Path, name: &str, edit: impl Fn(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(preset(name)).unwrap()).unwrap();
    v["training"] = serde_json::json!({ "batch": 16, "iterations": 20, "eval_batch": 32 });
    v["grid"]["N"] = serde_json::json!(10);
    edit(&mut v);
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn every_preset_parses() {
    let mut count = 0;
    for entry in std::fs::read_dir(preset("")).unwrap() {
        let path = entry.unwrap().path();
        let file = capmfg_core::ScenarioFile::load(&path).unwrap();
        if file.planner.is_some() {
            file.stackelberg().unwrap();
        } else {
            file.mfg().unwrap();
        }
        count += 1;
    }
    assert_eq!(count, 20);
}

#[test]
fn capped_costate_oracle() {
    let o = capmfg(&["oracle", "capped-y", "--t", "0", "--T", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "293.6153");
}

#[test]
fn crossing_oracle() {
    let o = capmfg(&["oracle", "crossing", "--T", "2"]);
    assert_eq!(stdout(&o).trim(), "1.8731");
    let o = capmfg(&["oracle", "crossing", "--T", "1", "--c-i", "1000"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shooting_needs_deterministic_scenario() {
    let o = capmfg(&["oracle", "shoot", preset("exam02.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sigma0 = 0"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), "exam02.json", |v| v["market"]["sigma0"] = 0.into());
    let o = capmfg(&["oracle", "shoot", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("y0 = 293."), "{}", stdout(&o));
    assert!(dir.path().join("shoot.csv").exists());
}

#[test]
fn phi_fd_writes_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), "exam01.json", |_| {});
    let mesh = dir.path().join("phi.csv");
    let o = capmfg(&["oracle", "phi-fd", cfg.to_str().unwrap(), "--cells", "100", "--out", mesh.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(mesh).unwrap();
    assert!(text.starts_with("t,x,phi\n"));
    assert_eq!(text.lines().count(), 1 + 11 * 101);
}

#[test]
fn malformed_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ \"market\": ").unwrap();
    let o = capmfg(&["solve-mfg", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), "exam02.json", |v| v["market"]["gamma"] = 1.into());
    let o = capmfg(&["solve-mfg", cfg.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn missing_planner_section_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), "exam02.json", |_| {});
    let o = capmfg(&["solve-stackelberg", cfg.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("planner"), "{}", stderr(&o));
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), "exam01.json", |v| {
        v["training"]["iterations"] = 120.into();
        v["training"]["optimizer"] = "plain".into();
    });
    let out = dir.path().join("run");
    let o = capmfg(&["solve-mfg", cfg.to_str().unwrap(), "--lr", "1e6", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}{}", stdout(&o), stderr(&o));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn solve_mfg_run_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), "exam02.json", |_| {});
    let out = dir.path().join("run");
    let o = capmfg(&["solve-mfg", cfg.to_str().unwrap(), "--seed", "11", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("final loss y:") && text.contains("y0 = "), "{text}");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["seeds"]["train"], 11);
    let names: Vec<_> = manifest["files"].as_array().unwrap().iter().map(|f| f["name"].clone()).collect();
    assert!(names.contains(&"trajectories.csv".into()));

    // rerunning from the echoed config reproduces the CSVs byte for byte
    let again = dir.path().join("again");
    let o = capmfg(&["solve-mfg", out.join("config.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trajectories.csv", "samples.csv", "checkpoint.txt"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    // evaluating the stored checkpoint reproduces the evaluation CSVs
    let reload = dir.path().join("reload");
    let ck = out.join("checkpoint.txt");
    let o = capmfg(&[
        "solve-mfg",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        reload.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("trajectories.csv")).unwrap(),
        std::fs::read(reload.join("trajectories.csv")).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), "exam01.json", |v| v["training"]["batch"] = 100.into());
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_capmfg"))
            .args(["solve-mfg", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("MFG_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(std::fs::read(out.join("samples.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

fn rewrite_cell(path: &Path, column: &str, row: usize, value: &str) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let c = lines[0].split(',').position(|h| h == column).unwrap();
    let mut cells: Vec<String> = lines[row + 1].split(',').map(str::to_string).collect();
    cells[c] = value.to_string();
    lines[row + 1] = cells.join(",");
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn verify_flags_tampered_costate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), "exam02.json", |v| {
        v["training"] = serde_json::json!({ "batch": 32, "iterations": 1000, "eval_batch": 64 });
    });
    let out = dir.path().join("run");
    let o = capmfg(&["solve-mfg", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = capmfg(&["verify", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));

    rewrite_cell(&out.join("samples.csv"), "muY", 5, "-5000");
    let o = capmfg(&["verify", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL  costate_bounds"), "{}", stdout(&o));
}

#[test]
fn planner_run_verifies_and_flags_clamp_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(dir.path(), "es01.json", |_| {});
    let out = dir.path().join("run");
    let o = capmfg(&["solve-stackelberg", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("V0 = ") && stdout(&o).contains("phi0 = "), "{}", stdout(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["loss_traces"]["V"].as_array().unwrap().len(), 20);
    assert_eq!(report["loss_traces"]["phi"].as_array().unwrap().len(), 20);

    let o = capmfg(&["verify", out.to_str().unwrap()]);
    let table = stdout(&o);
    for name in ["clamp", "subsidy_rule", "foc_residual"] {
        assert!(table.contains(&format!("PASS  {name}")), "{table}");
    }

    rewrite_cell(&out.join("samples.csv"), "v_hat", 2, "600");
    let o = capmfg(&["verify", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL  clamp"), "{}", stdout(&o));
}
