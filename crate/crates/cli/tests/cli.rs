use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn plumeinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plumeinv"))
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

fn small_fwi(dir: &Path) -> String {
    let cfg = json!({
        "scenario": "fwi",
        "seed": 3,
        "grid": {"nx": 24, "nz": 24},
        "acquisition": {"n_sources": 2, "n_receivers": 8, "record_length": 0.3},
        "optimizer": {"maxiter": 4},
    });
    let p = dir.join("small.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.to_string_lossy().into_owned(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_config_exits_1_naming_the_path() {
    let o = plumeinv(&["fwi", "--config", "/nonexistent/case.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/case.json"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_exits_1_with_usage() {
    let o = plumeinv(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn unknown_config_key_and_bad_override_are_rejected() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_fwi(t.path());
    let out = t.path().join("o");
    let o = plumeinv(&["fwi", "--config", &cfg, "--set", "optimizer.nonsense=1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("optimizer.nonsense"));
    let o = plumeinv(&["fwi", "--config", &cfg, "--set", "optimizer.maxiter=two", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn fwi_override_is_recorded_and_result_line_printed() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_fwi(t.path());
    let out = t.path().join("run");
    let o = plumeinv(&["fwi", "--config", &cfg, "--set", "optimizer.maxiter=2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("RESULT scenario=fwi loss_final="), "{line}");
    assert!(line.contains(" iters=2 seed=3"), "{line}");
    let resolved = read_json(&out.join("resolved_config.json"));
    assert_eq!(resolved["optimizer"]["maxiter"], 2);
    for f in ["trajectory.csv", "metrics.csv", "model.sgrd", "model.pgm", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn seed_determines_the_run() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_fwi(t.path());
    let run = |name: &str, seed: &str| {
        let out = t.path().join(name);
        let o = plumeinv(&["fwi", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (fs::read(out.join("trajectory.csv")).unwrap(), fs::read(out.join("model.sgrd")).unwrap())
    };
    let a = run("a", "11");
    assert_eq!(a, run("b", "11"));
    assert_ne!(a, run("c", "12"));
}

#[test]
fn runs_from_a_bundle_leave_it_untouched() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_fwi(t.path());
    let case = t.path().join("case");
    let o = plumeinv(&["make-case", "--config", &cfg, "--out", case.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("CASE scenario=fwi kind=velocity"));
    let before = snapshot(&case);
    let set_case = format!("paths.case={}", case.display());
    let out = t.path().join("inv");
    let o = plumeinv(&["fwi", "--config", &cfg, "--set", &set_case, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(before, snapshot(&case));

    let inside = case.join("results");
    let o = plumeinv(&["fwi", "--config", &cfg, "--set", &set_case, "--out", inside.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!inside.exists());
    assert_eq!(before, snapshot(&case));
}

#[test]
fn scenario_must_match_the_command() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_fwi(t.path());
    let o = plumeinv(&["flow-invert", "--config", &cfg, "--out", t.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn surrogate_scenario_without_weights_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("e2e.json");
    fs::write(&p, json!({"scenario": "e2e_surrogate", "lambda": 0.1}).to_string()).unwrap();
    let o = plumeinv(&["e2e", "--config", p.to_str().unwrap(), "--out", t.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fno_weights"), "{}", stderr(&o));
}

#[test]
fn missing_lambda_is_a_validation_error() {
    let t = tempfile::tempdir().unwrap();
    let o = plumeinv(&["fwi-prior", "--out", t.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lambda"));
}

#[test]
fn dot_test_prints_each_operator_and_passes() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("smoke.json");
    fs::write(&p, json!({"grid": {"nx": 20, "nz": 20}}).to_string()).unwrap();
    let out = t.path().join("dt");
    let o = plumeinv(&["dot-test", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().count() >= 12, "{text}");
    assert!(text.lines().all(|l| l.contains("rel_err=") && l.ends_with("PASS")), "{text}");
    assert!(out.join("resolved_config.json").exists());
    assert!(out.join("dot_test.csv").exists());
}

#[test]
fn flow_sim_writes_the_series() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("fs");
    let o = plumeinv(&["flow-sim", "--set", "grid.nx=8", "--set", "grid.nz=8", "--set", "flow.injection_cell=[4,6]", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("RESULT scenario=flow_sim"));
    assert!(out.join("series").is_dir());
    assert!(out.join("permeability.pgm").exists());
}

#[test]
fn grad_test_prints_a_pass_table() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("gt");
    let o = plumeinv(&["grad-test", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for name in ["wave", "flow", "rock", "priorflow", "surrogate"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("PASS")), "{text}");
    }
    assert!(out.join("grad_test.csv").exists());
}
