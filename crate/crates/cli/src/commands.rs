use std::path::Path;
use std::sync::Arc;

use roughman::calculus::{auto, MapForm, OneForm};
use roughman::expr::{ExprMap, ExprSpec};
use roughman::integral::rough_integrate;
use roughman::lift::{p_variation, signature, ClassicalRoughPath};
use roughman::mpath::{localise, LocaliseReport};
use roughman::mrde::{solve_manifold_rde_with, verify_solution, Connection, ConnectionSpec, MrdeConfig};
use roughman::rde::{response, solve_rde_with, RdeConfig, RdeProblem};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::io::{gnuplot_script, load_path_csv, read_json, to_json, trace_csv, write_file, x_names};
use crate::{Cli, CliError, Command, Common};

#[derive(Debug, Deserialize)]
struct FormSpec {
    vars: Vec<String>,
    exprs: Vec<String>,
    dim_out: usize,
}

pub fn run(cli: &Cli) -> Result<u8, CliError> {
    let c = &cli.common;
    if !(c.p >= 1.0) || !c.p.is_finite() {
        return Err(CliError::Validation(format!("--p must be ≥ 1, got {}", c.p)));
    }
    if c.level < c.p.floor() as usize || c.level == 0 {
        return Err(CliError::Validation(format!("--level {} is below ⌊p⌋ = {}", c.level, c.p.floor())));
    }
    match &cli.command {
        Command::Sig { path } => sig(c, path),
        Command::Integrate { path, form } => integrate(c, path, form),
        Command::Rde { path, field, y0 } => rde(c, path, field, y0),
        Command::ManifoldRde { path, connection, y0 } => manifold_rde(c, path, connection, y0),
        Command::Check => {
            let report = crate::suite::run(c.seed)?;
            let text = to_json(&report)?;
            if let Some(dir) = &c.out {
                write_file(dir, "check.json", &text)?;
            }
            print!("{text}");
            Ok(if report.passed { 0 } else { 3 })
        }
    }
}

fn gamma_of(c: &Common) -> Result<f64, CliError> {
    let g = c.gamma.unwrap_or(c.p + 1.0);
    if !(g > c.p) {
        return Err(CliError::Validation(format!("--gamma {g} must exceed p = {}", c.p)));
    }
    Ok(g)
}

fn lift(c: &Common, path: &Path) -> Result<ClassicalRoughPath, CliError> {
    let sampled = load_path_csv(path)?;
    Ok(signature(&sampled, c.level)?.with_p(c.p)?)
}

/// Grades of a tensor as JSON: vectors, matrices for grade 2, flat arrays above.
fn tensor_json(t: &roughman::tensor::TruncatedTensor) -> Value {
    let d = t.dim();
    let mut m = serde_json::Map::new();
    for g in 1..=t.level() {
        let v = if g == 2 {
            json!((0..d).map(|i| (0..d).map(|j| t.get(&[i, j])).collect::<Vec<f64>>()).collect::<Vec<_>>())
        } else {
            json!(t.grade(g))
        };
        m.insert(format!("level{g}"), v);
    }
    Value::Object(m)
}

fn emit_trace(c: &Common, name: &str, names: &[String], x: &ClassicalRoughPath) -> Result<Option<String>, CliError> {
    let csv = trace_csv(names, x.grid(), &x.trace());
    match &c.out {
        Some(dir) => {
            let file = format!("{name}.csv");
            write_file(dir, &file, &csv)?;
            if c.emit_gnuplot {
                write_file(dir, &format!("{name}.gp"), &gnuplot_script(&file, names.len()))?;
            }
            Ok(None)
        }
        None => Ok(Some(csv)),
    }
}

fn finish(c: &Common, name: &str, summary: &Value, csv: Option<String>) -> Result<u8, CliError> {
    let text = to_json(summary)?;
    if let Some(dir) = &c.out {
        write_file(dir, &format!("{name}.json"), &text)?;
    }
    match csv {
        Some(csv) => print!("{csv}"),
        None => print!("{text}"),
    }
    Ok(0)
}

fn sig(c: &Common, path: &Path) -> Result<u8, CliError> {
    let x = lift(c, path)?;
    let summary = json!({
        "command": "sig",
        "dim": x.dim(),
        "level": x.level(),
        "p": c.p,
        "segments": x.segments(),
        "signature": tensor_json(&x.total()),
        "p_variation": p_variation(&x, c.p)?,
    });
    let text = to_json(&summary)?;
    if let Some(dir) = &c.out {
        write_file(dir, "sig.json", &text)?;
    }
    print!("{text}");
    Ok(0)
}

fn integrate(c: &Common, path: &Path, form: &Path) -> Result<u8, CliError> {
    let x = lift(c, path)?;
    let spec: FormSpec = read_json(form)?;
    let d = x.dim();
    if spec.vars.len() != d || spec.exprs.len() != spec.dim_out * d {
        return Err(CliError::Validation(format!(
            "form needs {d} variables and {}×{d} expressions, got {} and {}",
            spec.dim_out,
            spec.vars.len(),
            spec.exprs.len()
        )));
    }
    let map = ExprMap::new(ExprSpec { vars: spec.vars, exprs: spec.exprs })?;
    let alpha = MapForm::new(auto(map), spec.dim_out, d);
    let y = rough_integrate(&alpha, &x)?;
    let csv = emit_trace(c, "integral", &x_names(spec.dim_out, "y"), &y)?;
    let summary = json!({
        "command": "integrate",
        "dim_out": spec.dim_out,
        "segments": y.segments(),
        "total": tensor_json(&y.total()),
    });
    finish(c, "integral", &summary, csv)
}

fn rde(c: &Common, path: &Path, field: &Path, y0: &[f64]) -> Result<u8, CliError> {
    let x = lift(c, path)?;
    let spec: ExprSpec = read_json(field)?;
    let (d1, d2) = (x.dim(), y0.len());
    if spec.vars.len() != d2 || spec.exprs.len() != d1 * d2 {
        return Err(CliError::Validation(format!(
            "field needs {d2} variables and {d2}×{d1} expressions, got {} and {}",
            spec.vars.len(),
            spec.exprs.len()
        )));
    }
    let g: Arc<dyn OneForm> = Arc::new(MapForm::new(auto(ExprMap::new(spec)?), d2, d1));
    let gamma = gamma_of(c)?;
    let mut cfg = RdeConfig::default();
    if let Some(t) = c.tol {
        cfg.tol = t;
    }
    let prob = RdeProblem::new(x.clone(), g, y0.to_vec(), gamma);
    let (z, report) = solve_rde_with(&prob, &cfg)?;
    let y = response(&z, d1)?;
    let csv = emit_trace(c, "rde", &x_names(d2, "y"), &y)?;
    let summary = json!({
        "command": "rde",
        "gamma": gamma,
        "end": y.trace().last().cloned().unwrap_or_default(),
        "report": report,
    });
    finish(c, "rde", &summary, csv)
}

#[derive(Serialize)]
struct ManifoldSummary {
    command: &'static str,
    gamma: f64,
    connection: roughman::mrde::ConnectionReport,
    localise: LocaliseReport,
    solve: roughman::mrde::SolveReport,
    verify: roughman::mrde::VerifyReport,
    end: Vec<f64>,
}

fn manifold_rde(c: &Common, path: &Path, connection: &Path, y0: &[f64]) -> Result<u8, CliError> {
    let spec: ConnectionSpec = read_json(connection)?;
    let conn = Connection::from_spec(&spec)?;
    let creport = conn.validate()?;
    let x = lift(c, path)?;
    let gamma = c.gamma.unwrap_or(spec.gamma);
    let (xm, lrep) = localise(&x, conn.n.clone(), gamma)?;
    let mut cfg = MrdeConfig::default();
    cfg.rde.tol = c.tol.map_or(cfg.rde.tol, |t| t.min(cfg.rde.tol));
    let sol = solve_manifold_rde_with(&conn, &xm, y0, &cfg)?;
    let verify = verify_solution(&sol, &conn, &xm, c.tol.unwrap_or(1e-6))?;
    let passed = verify.passed;
    let trace = sol.response_trace();
    let summary = ManifoldSummary {
        command: "manifold-rde",
        gamma,
        connection: creport,
        localise: lrep,
        solve: sol.report.clone(),
        end: trace.last().map(|p| p.1.clone()).unwrap_or_default(),
        verify,
    };
    let text = to_json(&summary)?;
    if let Some(dir) = &c.out {
        write_file(dir, "solution.json", &to_json(&sol)?)?;
        let z = &sol.path;
        let (mut times, mut pts) = (Vec::new(), Vec::new());
        for (n, s) in z.segments.iter().enumerate() {
            let chart = &z.atlas.charts[s.chart];
            for (t, u) in s.roughpath.grid().iter().zip(s.roughpath.trace()).skip(usize::from(n > 0)) {
                times.push(*t);
                pts.push(chart.inverse(&u));
            }
        }
        let mut names = x_names(conn.n.ambient_dim(), "x");
        names.extend(x_names(conn.m.ambient_dim(), "y"));
        write_file(dir, "support.csv", &trace_csv(&names, &times, &pts))?;
        if c.emit_gnuplot {
            write_file(dir, "support.gp", &gnuplot_script("support.csv", names.len()))?;
        }
        write_file(dir, "verify.json", &to_json(&summary.verify)?)?;
        write_file(dir, "manifold_rde.json", &text)?;
    }
    print!("{text}");
    if !passed {
        return Err(CliError::Validation(format!(
            "solution check failed: signal residual {:.3e}, fixed-point residual {:.3e}",
            summary.verify.signal_residual, summary.verify.fixed_point_residual
        )));
    }
    Ok(0)
}
