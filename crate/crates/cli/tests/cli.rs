use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn roughman(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roughman")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn circle_csv(n: usize, r: f64) -> String {
    let mut s = String::from("t,x1,x2\n");
    for k in 0..=n {
        let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        s.push_str(&format!("{},{},{}\n", k as f64 / n as f64, r * t.cos(), r * t.sin()));
    }
    s
}

#[test]
fn sig_of_l_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "l.csv", "t,x1,x2\n0,0,0\n0.5,1,0\n1,1,1\n");
    let out = roughman(&["sig", &path]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let level2 = &v["signature"]["level2"];
    let want = [[0.5, 1.0], [0.0, 0.5]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((level2[i][j].as_f64().unwrap() - want[i][j]).abs() < 1e-12);
        }
    }
    assert_eq!(v["signature"]["level1"], serde_json::json!([1.0, 1.0]));
}

#[test]
fn malformed_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [("empty.csv", ""), ("bad.csv", "t,x1\n0,1\n1,zz\n"), ("back.csv", "t,x1\n0,1\n0,2\n")] {
        let out = roughman(&["sig", &write(dir.path(), name, text)]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        let err: Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(err["exit_code"], 2);
        assert_eq!(err["error"], "parse");
    }
    assert_eq!(roughman(&["sig", "/nonexistent/path.csv"]).status.code(), Some(2));
    assert_eq!(roughman(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn invalid_parameters_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.csv", &circle_csv(20, 1.0));
    assert_eq!(roughman(&["sig", &path, "--p", "0.5"]).status.code(), Some(3));
    assert_eq!(roughman(&["sig", &path, "--p", "2.5", "--level", "1"]).status.code(), Some(3));
    let field = write(dir.path(), "f.json", r#"{"vars": ["y"], "exprs": ["y"]}"#);
    assert_eq!(roughman(&["rde", &path, "--field", &field, "--y0", "1"]).status.code(), Some(3));
}

#[test]
fn zero_field_keeps_initial_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.csv", &circle_csv(50, 1.0));
    let field = write(dir.path(), "f.json", r#"{"vars": ["y"], "exprs": ["0", "0"]}"#);
    let out = roughman(&["rde", &path, "--field", &field, "--y0", "0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,y1"));
    let rows: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 51);
    assert!(rows.iter().all(|v| *v == 0.5));
}

#[test]
fn integrate_area_form_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.csv", &circle_csv(2000, 1.0));
    let form = write(dir.path(), "a.json", r#"{"vars": ["x", "y"], "exprs": ["-y/2", "x/2"], "dim_out": 1}"#);
    let out_dir = dir.path().join("out");
    let out = roughman(&["integrate", &path, "--form", &form, "--out", out_dir.to_str().unwrap(), "--emit-gnuplot"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&fs::read(out_dir.join("integral.json")).unwrap()).unwrap();
    assert!((v["total"]["level1"][0].as_f64().unwrap() - std::f64::consts::PI).abs() < 1e-5);
    assert!(out_dir.join("integral.csv").exists() && out_dir.join("integral.gp").exists());
}

#[test]
fn output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.csv", &circle_csv(200, 0.7));
    let field = write(dir.path(), "f.json", r#"{"vars": ["u", "v"], "exprs": ["-v", "0", "u", "0"]}"#);
    let run = || roughman(&["rde", &path, "--field", &field, "--y0", "1,0", "--seed", "7"]).stdout;
    let first = run();
    assert!(!first.is_empty());
    assert_eq!(first, run());
}

#[test]
fn manifold_rde_on_the_circle() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.csv", &circle_csv(200, 1.0));
    let conn = write(
        dir.path(),
        "conn.json",
        r#"{"N": {"kind": "circle"}, "M": {"kind": "circle"}, "gamma": 2.0, "ambient": {"vars": ["x1", "x2", "y1", "y2"], "exprs": ["0", "0", "0", "0"]}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = roughman(&["manifold-rde", &path, "--connection", &conn, "--y0", "0,1", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["verify"]["passed"], true);
    let end: Vec<f64> = v["end"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((end[0]).abs() < 1e-12 && (end[1] - 1.0).abs() < 1e-12);
    for f in ["solution.json", "support.csv", "verify.json", "manifold_rde.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let off = roughman(&["manifold-rde", &path, "--connection", &conn, "--y0", "0,2"]);
    assert_eq!(off.status.code(), Some(3));
}

#[test]
fn check_passes() {
    let out = roughman(&["check"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["suites"].as_array().unwrap().len(), 8);
}
