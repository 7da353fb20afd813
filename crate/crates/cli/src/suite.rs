use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roughman::atlas::{circle, partition_of_unity, sphere, vector_space, verify_partition};
use roughman::lift::{d_p, signature, ClassicalRoughPath, SampledPath};
use roughman::lip::Region;
use roughman::mpath::{from_classical, localise, to_classical, CONSISTENCY_TOL};
use roughman::mrde::{solve_manifold_rde, verify_solution, Connection};
use roughman::rde::{response, solve_rde_with, LinearField, RdeConfig, RdeProblem};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tol: f64,
}

#[derive(Debug, Serialize)]
pub struct SuiteReport {
    pub passed: bool,
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
}

fn result(name: &'static str, measured: f64, tol: f64) -> SuiteResult {
    SuiteResult { name, passed: measured <= tol, measured, tol }
}

fn polyline(rng: &mut ChaCha8Rng, d: usize, n: usize, level: usize) -> roughman::Result<ClassicalRoughPath> {
    let mut p = vec![0.0; d];
    let mut pts = vec![p.clone()];
    for _ in 0..n {
        p.iter_mut().for_each(|v| *v += rng.gen_range(-1.0..1.0));
        pts.push(p.clone());
    }
    signature(&SampledPath::from_points(pts)?, level)
}

fn chen(rng: &mut ChaCha8Rng) -> roughman::Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let d = rng.gen_range(1..=3);
        let x = polyline(rng, d, 12, 3)?;
        let scale = 1.0 + x.total().max_norm();
        for i in 0..x.segments() {
            for j in i + 1..x.segments() {
                for k in j + 1..=x.segments() {
                    let lhs = x.increment(i, j).product(&x.increment(j, k));
                    worst = worst.max(lhs.sub(&x.increment(i, k)).max_norm() / scale);
                }
            }
        }
    }
    Ok(worst)
}

fn l_path() -> roughman::Result<f64> {
    let x = signature(&SampledPath::from_points(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]])?, 2)?;
    let t = x.total();
    let want = [[0.5, 1.0], [0.0, 0.5]];
    Ok((0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| (t.get(&[i, j]) - want[i][j]).abs()).fold(0.0, f64::max))
}

fn circle_area() -> roughman::Result<f64> {
    let n = 10_000;
    let pts = (0..=n).map(|k| {
        let t = 2.0 * PI * k as f64 / n as f64;
        vec![t.cos(), t.sin()]
    });
    let t = signature(&SampledPath::from_points(pts.collect())?, 2)?.total();
    Ok((0.5 * (t.get(&[0, 1]) - t.get(&[1, 0])) - PI).abs())
}

fn exp_rde() -> roughman::Result<f64> {
    let x = signature(&SampledPath::new((0..=200).map(|k| k as f64 / 200.0).collect(), (0..=200).map(|k| vec![k as f64 / 200.0]).collect())?, 2)?
        .with_p(1.0)?;
    let field = Arc::new(LinearField { mats: vec![vec![1.0]], d2: 1 });
    let (z, _) = solve_rde_with(&RdeProblem::new(x, field, vec![1.0], 2.0), &RdeConfig::default())?;
    let y = response(&z, 1)?;
    Ok((y.trace().last().unwrap()[0] - std::f64::consts::E).abs())
}

fn pou() -> roughman::Result<f64> {
    let c = circle()?;
    Ok(verify_partition(&c, &partition_of_unity(&c)?, 1000)?.max_sum_error)
}

fn bijection(rng: &mut ChaCha8Rng) -> roughman::Result<f64> {
    let atlas = Arc::new(vector_space(Region::cube(2, 2.0), 0.5, 0.25)?);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let mut p = [0.0f64; 2];
        let mut pts = vec![p.to_vec()];
        for _ in 0..20 {
            p.iter_mut().for_each(|v| *v = (*v + rng.gen_range(-0.3..0.3)).clamp(-1.9, 1.9));
            pts.push(p.to_vec());
        }
        let x = signature(&SampledPath::from_points(pts)?, 2)?.with_p(1.0)?;
        let back = to_classical(&from_classical(&x, None, atlas.clone())?)?;
        worst = worst.max(d_p(&x, &back)?);
    }
    Ok(worst)
}

fn localisation() -> roughman::Result<f64> {
    let s = Arc::new(sphere()?);
    let pts = (0..=300).map(|k| {
        let t = 1.2 * k as f64 / 300.0;
        vec![t.cos(), 0.8 * t.sin(), 0.6 * t.sin()]
    });
    let x = signature(&SampledPath::from_points(pts.collect())?, 2)?.with_p(1.0)?;
    let (z, rep) = localise(&x, s, 2.0)?;
    z.check_supports()?;
    Ok(rep.consistency.unwrap_or(f64::INFINITY))
}

fn zero_connection() -> roughman::Result<f64> {
    let c = Arc::new(circle()?);
    let conn = Connection::zero(c.clone(), c.clone(), 2.0)?;
    let pts = (0..=200).map(|k| {
        let t = 2.0 * k as f64 / 200.0;
        vec![t.cos(), t.sin()]
    });
    let x = signature(&SampledPath::from_points(pts.collect())?, 2)?.with_p(1.0)?;
    let (xm, _) = localise(&x, c, 2.0)?;
    let sol = solve_manifold_rde(&conn, &xm, &[0.0, 1.0])?;
    let rep = verify_solution(&sol, &conn, &xm, 1e-9)?;
    Ok(rep.signal_residual.max(rep.fixed_point_residual).max(rep.start_error))
}

/// The invariant suite behind `check`.
pub fn run(seed: u64) -> Result<SuiteReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suites = vec![
        result("chen", chen(&mut rng)?, 1e-12),
        result("l_path_signature", l_path()?, 1e-12),
        result("circle_levy_area", circle_area()?, 1e-5),
        result("linear_rde_exponential", exp_rde()?, 1e-6),
        result("partition_of_unity", pou()?, 1e-10),
        result("bijection_round_trip", bijection(&mut rng)?, 1e-10),
        result("sphere_localisation", localisation()?, CONSISTENCY_TOL),
        result("zero_connection", zero_connection()?, 1e-9),
    ];
    Ok(SuiteReport { passed: suites.iter().all(|s| s.passed), seed, suites })
}
