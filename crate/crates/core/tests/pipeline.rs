use std::f64::consts::PI;
use std::sync::Arc;

use roughman::atlas::{circle, sphere, AmbientForm};
use roughman::calculus::{auto, MapForm, OneForm};
use roughman::expr::ExprMap;
use roughman::integral::rough_integrate;
use roughman::lift::{d_p, signature, ClassicalRoughPath, SampledPath};
use roughman::mpath::{evaluate, localise, ManifoldRoughPath};
use roughman::mrde::{solve_manifold_rde, verify_solution, Connection};
use roughman::rde::{response, solve_rde, RdeProblem};
use roughman::Error;

fn form(vars: &[&str], exprs: &[&str], e: usize, d: usize) -> Arc<dyn OneForm> {
    Arc::new(MapForm::new(auto(ExprMap::from_strs(vars, exprs).unwrap()), e, d))
}

fn loop_lift(n: usize, turns: f64) -> ClassicalRoughPath {
    let pts = (0..=n)
        .map(|k| {
            let t = 2.0 * PI * turns * k as f64 / n as f64;
            vec![t.cos(), t.sin()]
        })
        .collect();
    signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap()
}

#[test]
fn integral_drives_an_rde() {
    // y' = y·(x dy − y dx) along the unit circle: log y grows by the swept angle.
    let x = loop_lift(400, 1.0);
    let area = rough_integrate(form(&["x", "y"], &["-y", "x"], 1, 2).as_ref(), &x).unwrap();
    assert!((area.total().grade(1)[0] - 2.0 * PI).abs() < 1e-3);
    let z = solve_rde(&RdeProblem::new(area.with_p(1.0).unwrap(), form(&["u"], &["0.1*u"], 1, 1), vec![1.0], 2.0)).unwrap();
    let end = response(&z, 1).unwrap().trace().last().unwrap()[0];
    assert!((end.ln() - 0.2 * PI).abs() < 1e-3, "{end}");
}

#[test]
fn circle_winding_through_localisation() {
    let c = Arc::new(circle().unwrap());
    let (z, rep) = localise(&loop_lift(3000, 2.0), c, 2.0).unwrap();
    assert!(rep.consistency.unwrap() < 1e-8);
    let dtheta = AmbientForm(form(&["x", "y"], &["-y/(x^2+y^2)", "x/(x^2+y^2)"], 1, 2));
    let winding = evaluate(&z, &dtheta).unwrap().total().grade(1)[0] / (2.0 * PI);
    assert!((winding - 2.0).abs() < 1e-5, "{winding}");
}

#[test]
fn manifold_solution_survives_json() {
    let s = Arc::new(sphere().unwrap());
    let conn = Connection::zero(s.clone(), s.clone(), 2.0).unwrap();
    let pts = (0..=120)
        .map(|k| {
            let t = k as f64 / 120.0;
            vec![t.cos() * 0.6, t.sin() * 0.6, 0.8]
        })
        .collect();
    let x = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap();
    let (xm, _) = localise(&x, s, 2.0).unwrap();
    let sol = solve_manifold_rde(&conn, &xm, &[0.0, 0.0, 1.0]).unwrap();
    let text = serde_json::to_string(&sol.path).unwrap();
    let back: ManifoldRoughPath = serde_json::from_str(&text).unwrap();
    assert_eq!(back.segments.len(), sol.path.segments.len());
    for (a, b) in back.segments.iter().zip(&sol.path.segments) {
        assert!(d_p(&a.roughpath, &b.roughpath).unwrap() < 1e-15);
    }
    assert!(verify_solution(&sol, &conn, &xm, 1e-9).unwrap().passed);
}

#[test]
fn off_manifold_start_is_rejected() {
    let s = Arc::new(sphere().unwrap());
    let conn = Connection::zero(s.clone(), s.clone(), 2.0).unwrap();
    let (xm, _) = localise(&signature(&SampledPath::from_points(vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.1f64.sin(), 0.1f64.cos()]]).unwrap(), 2).unwrap().with_p(1.0).unwrap(), s, 2.0).unwrap();
    let err = solve_manifold_rde(&conn, &xm, &[0.0, 0.0, 2.0]).unwrap_err();
    assert!(matches!(err, Error::Domain(_) | Error::Invalid(_) | Error::Validation(_)), "{err}");
}

#[test]
fn off_manifold_signal_is_rejected() {
    let s = Arc::new(sphere().unwrap());
    let x = signature(&SampledPath::from_points(vec![vec![0.0, 0.0, 1.5], vec![0.0, 0.1, 1.5]]).unwrap(), 2).unwrap().with_p(1.0).unwrap();
    assert!(matches!(localise(&x, s, 2.0), Err(Error::Domain(_))));
}
