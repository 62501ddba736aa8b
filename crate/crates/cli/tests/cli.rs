use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

const FORMULA: &str = "~ factor(t) + int - 1 + (1|gr(cl))";

fn glmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glmm")).args(args).output().unwrap()
}

fn model_args<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec![
        cmd, "--nelder", "~(cl(6)*t(3))>i(5)", "--formula", FORMULA, "--derive", "int=t>cl", "--family", "binomial",
        "--theta", "0.5", "--beta", "0,0,0,0.5", "--seed", "3",
    ];
    a.extend_from_slice(extra);
    a
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("glmm-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn gen_writes_one_csv_line_per_row() {
    let out = glmm(&["gen", "--nelder", "~(j(4)*t(5))>i(5)"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 101);
    assert_eq!(lines[0], "j,t,i");
    assert_eq!(lines[6], "1,2,6");
}

#[test]
fn power_reports_every_fixed_effect() {
    let out = glmm(&model_args("power", &[]));
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["command"], "power");
    let rows = v["result"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let last = &rows[3];
    assert_eq!(last["value"].as_f64(), Some(0.5));
    let p = last["power"].as_f64().unwrap();
    assert!(p > 0.025 && p < 1.0);
    assert!(last["se"].as_f64().unwrap() > 0.0);
}

#[test]
fn fit_reads_simulated_csv() {
    let dir = scratch("fit");
    let csv = dir.join("sim.csv");
    let csv = csv.to_str().unwrap();
    assert!(glmm(&model_args("simulate", &["--csv", csv])).status.success());
    let header = std::fs::read_to_string(csv).unwrap();
    assert!(header.starts_with("cl,t,i,int,y"));
    let out = glmm(&["fit", "--data", csv, "--formula", FORMULA, "--family", "binomial", "--method", "la"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["result"]["beta"].as_array().unwrap().len(), 4);
    assert_eq!(v["result"]["theta"].as_array().unwrap().len(), 1);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn reruns_are_byte_identical() {
    for cmd in [
        model_args("simulate", &[]),
        model_args("power", &[]),
        model_args("design", &["--m", "20", "--c-vector", "0,0,0,1"]),
    ] {
        let (a, b) = (glmm(&cmd), glmm(&cmd));
        assert!(a.status.success());
        assert_eq!(a.stdout, b.stdout, "{}", cmd[0]);
    }
    let seeded = |s: &str| {
        let mut a = model_args("simulate", &[]);
        *a.last_mut().unwrap() = s;
        glmm(&a).stdout
    };
    let (one, two) = (seeded("1"), seeded("2"));
    assert!(!one.is_empty());
    assert_ne!(one, two);
}

#[test]
fn configuration_errors_exit_with_one() {
    let bad_function = glmm(&["power", "--nelder", "~cl(3)>i(2)", "--formula", "~ 1 + (1|nope(cl))"]);
    assert_eq!(bad_function.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_function.stderr).contains("configuration"));
    assert_eq!(glmm(&["power", "--data", "/nonexistent/data.csv", "--formula", "~ 1"]).status.code(), Some(1));
    assert_eq!(glmm(&["apportion", "--weights", "0.7,0.7", "--m", "3"]).status.code(), Some(1));
}

#[test]
fn numerical_failures_exit_with_two() {
    // One condition cannot support four fixed effects.
    let out = glmm(&model_args("design", &["--m", "1", "--c-vector", "0,0,0,1", "--restarts", "1"]));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn non_convergence_exits_with_three_after_writing_output() {
    let dir = scratch("nonconv");
    let csv = dir.join("sim.csv");
    let csv = csv.to_str().unwrap();
    assert!(glmm(&model_args("simulate", &["--csv", csv])).status.success());
    let out = glmm(&[
        "fit", "--data", csv, "--formula", FORMULA, "--family", "binomial", "--method", "mcnr", "--samples", "20",
        "--warmup", "60", "--max-iter", "1", "--tol", "1e-9",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let v = json(&out);
    assert_eq!(v["result"]["converged"], false);
    std::fs::remove_dir_all(dir).ok();
}
