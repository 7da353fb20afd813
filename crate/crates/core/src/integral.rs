//! The β constant, almost rough paths, sewing, and rough integration of
//! one-forms against level-1 and level-2 rough paths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::OneForm;
use crate::error::{Error, Result};
use crate::lift::ClassicalRoughPath;
use crate::tensor::{TruncatedTensor, MAX_DIM};

pub use crate::lip::OneFormJet;

/// Riemann zeta for `s > 1` by Euler–Maclaurin summation.
pub fn zeta(s: f64) -> f64 {
    const N: usize = 20;
    const B: [f64; 6] = [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0, -691.0 / 2730.0];
    let n = N as f64;
    let mut sum: f64 = (1..N).map(|k| (k as f64).powf(-s)).sum();
    sum += n.powf(1.0 - s) / (s - 1.0) + 0.5 * n.powf(-s);
    // B_{2k}/(2k)! · s(s+1)…(s+2k-2) · N^{-s-2k+1}
    let mut rising = s;
    let mut fact = 2.0;
    for (k, b) in B.iter().enumerate() {
        let m = 2 * (k + 1);
        sum += b / fact * rising * n.powf(-s - m as f64 + 1.0);
        rising *= (s + m as f64 - 1.0) * (s + m as f64);
        fact *= ((m + 1) * (m + 2)) as f64;
    }
    sum
}

/// `β(p) = p(1 + Σ_{r≥3} (2/(r-2))^{(⌊p⌋+1)/p}) = p(1 + 2^a ζ(a))`, `a = (⌊p⌋+1)/p`.
pub fn beta_const(p: f64) -> f64 {
    let a = (p.floor() + 1.0) / p;
    p * (1.0 + 2f64.powf(a) * zeta(a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SewConfig {
    pub tol: f64,
    pub max_refine: usize,
}

impl Default for SewConfig {
    fn default() -> Self {
        SewConfig { tol: 1e-10, max_refine: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SewReport {
    pub segments: usize,
    /// Deepest dyadic level needed on any segment.
    pub max_level: usize,
    /// Largest accepted difference between successive extrapolated refinements, relative to `1 + ‖Y‖`.
    pub worst_residual: f64,
}

type SegmentFn<'a> = Box<dyn Fn(usize, f64, f64) -> TruncatedTensor + Send + Sync + 'a>;
type PairFn<'a> = Box<dyn Fn(usize, usize) -> TruncatedTensor + Send + Sync + 'a>;

/// An increment family `Q_{s,t}` on a grid, queried inside segments and between grid points.
pub struct AlmostRoughPath<'a> {
    pub dim: usize,
    pub level: usize,
    pub grid: Vec<f64>,
    pub p: f64,
    pub theta: f64,
    segment: SegmentFn<'a>,
    pair: PairFn<'a>,
}

impl<'a> AlmostRoughPath<'a> {
    /// `segment(k, λ0, λ1)` evaluates `Q` on the part `[λ0, λ1]` of segment `k`;
    /// `pair(i, j)` evaluates `Q_{t_i, t_j}`.
    pub fn new(
        dim: usize,
        level: usize,
        grid: Vec<f64>,
        p: f64,
        theta: f64,
        segment: impl Fn(usize, f64, f64) -> TruncatedTensor + Send + Sync + 'a,
        pair: impl Fn(usize, usize) -> TruncatedTensor + Send + Sync + 'a,
    ) -> Self {
        AlmostRoughPath { dim, level, grid, p, theta, segment: Box::new(segment), pair: Box::new(pair) }
    }

    pub fn segment(&self, k: usize, lam0: f64, lam1: f64) -> TruncatedTensor {
        (self.segment)(k, lam0, lam1)
    }

    pub fn pair(&self, i: usize, j: usize) -> TruncatedTensor {
        (self.pair)(i, j)
    }

    /// Largest `‖(Q_{ij}⊗Q_{jk} - Q_{ik})^g‖ / ω(t_i,t_k)^θ` over grid triples with `ω > 0`.
    pub fn almost_multiplicativity(&self, omega: &(dyn Fn(usize, usize) -> f64 + Sync)) -> f64 {
        let m = self.grid.len();
        (0..m)
            .into_par_iter()
            .map(|i| {
                let mut worst: f64 = 0.0;
                for k in i + 2..m {
                    let w = omega(i, k);
                    if w <= 0.0 {
                        continue;
                    }
                    let q = self.pair(i, k);
                    for j in i + 1..k {
                        let d = self.pair(i, j).product(&self.pair(j, k)).sub(&q).max_norm();
                        worst = worst.max(d / w.powf(self.theta));
                    }
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
    }
}

fn apply_q(alpha: &dyn OneForm, x: &[f64], inc: &TruncatedTensor, e: usize) -> TruncatedTensor {
    let d = inc.dim();
    let n = x.len();
    let m = inc.level();
    let x1 = inc.grade(1);
    let mut grades = vec![vec![1.0]];
    if m == 1 {
        let a = alpha.value(x);
        grades.push((0..e).map(|r| (0..d).map(|j| a[r * d + j] * x1[j]).sum()).collect());
        return TruncatedTensor::from_grades(e, grades).expect("output dimension checked");
    }
    let jet = alpha.jet(x);
    let (a, da) = (&jet.value, &jet.deriv);
    let x2 = inc.grade(2);
    let mut q1 = vec![0.0; e];
    for r in 0..e {
        let mut acc = 0.0;
        for j in 0..d {
            acc += a[r * d + j] * x1[j];
        }
        for i in 0..n {
            for j in 0..d {
                acc += da[(r * n + i) * d + j] * x2[i * d + j];
            }
        }
        q1[r] = acc;
    }
    // (α⊗α) X²: first contract with the second factor, then with the first.
    let mut tmp = vec![0.0; d * e];
    for i in 0..d {
        for b in 0..e {
            tmp[i * e + b] = (0..d).map(|j| a[b * d + j] * x2[i * d + j]).sum();
        }
    }
    let mut q2 = vec![0.0; e * e];
    for ra in 0..e {
        for b in 0..e {
            q2[ra * e + b] = (0..d).map(|i| a[ra * d + i] * tmp[i * e + b]).sum();
        }
    }
    grades.push(q1);
    grades.push(q2);
    TruncatedTensor::from_grades(e, grades).expect("output dimension checked")
}

fn check_form(alpha: &dyn OneForm, x: &ClassicalRoughPath) -> Result<usize> {
    if x.p().floor() > 2.0 {
        return Err(Error::Unsupported(format!("integration needs ⌊p⌋ ≤ 2, got p = {}", x.p())));
    }
    if alpha.point_dim() != x.dim() || alpha.input_dim() != x.dim() {
        return Err(Error::Shape(format!(
            "one-form on R^{} acting on R^{} cannot integrate a path in R^{}",
            alpha.point_dim(),
            alpha.input_dim(),
            x.dim()
        )));
    }
    if alpha.output_dim() == 0 || alpha.output_dim() > MAX_DIM {
        return Err(Error::Capacity(format!("output dimension {} outside 1..={MAX_DIM}", alpha.output_dim())));
    }
    Ok(x.level().min(2))
}

/// `Q_{s,t}`: grade 1 `α(x_s)X¹ + Dα(x_s)·X²`, grade 2 `(α⊗α)(x_s)X²` (grade 1 only when `X` has level 1).
pub fn almost_increment(alpha: &dyn OneForm, x: &ClassicalRoughPath, s: f64, t: f64) -> Result<TruncatedTensor> {
    let m = check_form(alpha, x)?;
    let xs = x.trace_at(s)?;
    let inc = x.increment_between(s, t)?.with_level(m)?;
    Ok(apply_q(alpha, &xs, &inc, alpha.output_dim()))
}

/// The almost rough path `Q` of `α` against `X` on the grid of `X`.
pub fn almost_path<'a>(alpha: &'a dyn OneForm, x: &'a ClassicalRoughPath) -> Result<AlmostRoughPath<'a>> {
    let m = check_form(alpha, x)?;
    let e = alpha.output_dim();
    let trace = x.trace();
    let logs: Vec<TruncatedTensor> =
        x.increments().iter().map(|inc| inc.with_level(m).map(|t| t.log_unchecked())).collect::<Result<_>>()?;
    let segment = {
        let trace = trace.clone();
        move |k: usize, lam0: f64, lam1: f64| {
            let l = &logs[k];
            let base: Vec<f64> = trace[k].iter().zip(l.grade(1)).map(|(a, b)| a + lam0 * b).collect();
            let inc = l.scale(lam1 - lam0).exp_unchecked();
            apply_q(alpha, &base, &inc, e)
        }
    };
    let pair = move |i: usize, j: usize| {
        let inc = x.increment(i, j).with_level(m).expect("level within capacity");
        apply_q(alpha, &trace[i], &inc, e)
    };
    let theta = (m as f64 + 1.0) / x.p();
    Ok(AlmostRoughPath::new(e, m, x.grid().to_vec(), x.p(), theta, segment, pair))
}

fn sew_segment(q: &AlmostRoughPath, k: usize, cfg: &SewConfig) -> Result<(TruncatedTensor, usize, f64)> {
    const COLUMNS: usize = 4;
    let first = q.segment(k, 0.0, 1.0);
    let mut prev_raw = first.clone();
    let mut table: Vec<TruncatedTensor> = vec![first.log_unchecked()];
    let mut diffs = Vec::new();
    for r in 1..=cfg.max_refine {
        let pieces = 1usize << r;
        let mut acc = q.segment(k, 0.0, 1.0 / pieces as f64);
        for m in 1..pieces {
            acc = acc.product(&q.segment(k, m as f64 / pieces as f64, (m + 1) as f64 / pieces as f64));
        }
        diffs.push(acc.sub(&prev_raw).max_norm());
        // Romberg table in log coordinates: errors expand in powers of 2^-r.
        let mut row = vec![acc.log_unchecked()];
        for c in 1..=r.min(COLUMNS) {
            let f = 1.0 / ((1u64 << c) as f64 - 1.0);
            let next = row[c - 1].add(&row[c - 1].sub(&table[c - 1]).scale(f));
            row.push(next);
        }
        let best = row.last().unwrap();
        let diff = best.sub(&table[table.len() - 1]).max_norm();
        let size = 1.0 + acc.max_norm();
        if !diff.is_finite() {
            break;
        }
        if diff <= cfg.tol * size {
            return Ok((best.exp_unchecked(), r, diff / size));
        }
        table = row;
        prev_raw = acc;
    }
    let n = diffs.len();
    let theta = if n >= 2 && diffs[n - 2] > 0.0 { 1.0 - (diffs[n - 1] / diffs[n - 2]).log2() } else { f64::NAN };
    Err(Error::Numeric(format!(
        "sewing did not contract on segment {k} after {n} dyadic levels (last difference {:.3e}, measured θ = {theta:.3})",
        diffs.last().copied().unwrap_or(f64::NAN)
    )))
}

/// Associate the multiplicative functional by dyadic refinement inside every grid segment.
pub fn sew(q: &AlmostRoughPath) -> Result<ClassicalRoughPath> {
    sew_with(q, &SewConfig::default()).map(|r| r.0)
}

pub fn sew_with(q: &AlmostRoughPath, cfg: &SewConfig) -> Result<(ClassicalRoughPath, SewReport)> {
    let segs = q.grid.len() - 1;
    let parts = (0..segs).into_par_iter().map(|k| sew_segment(q, k, cfg)).collect::<Result<Vec<_>>>()?;
    let mut report = SewReport { segments: segs, ..Default::default() };
    let increments = parts
        .into_iter()
        .map(|(t, r, rel)| {
            report.max_level = report.max_level.max(r);
            report.worst_residual = report.worst_residual.max(rel);
            t
        })
        .collect();
    let path = ClassicalRoughPath::from_increments(q.grid.clone(), increments, vec![0.0; q.dim], q.p)?;
    Ok((path, report))
}

/// `∫ α(X) dX`, started at the origin.
pub fn rough_integrate(alpha: &dyn OneForm, x: &ClassicalRoughPath) -> Result<ClassicalRoughPath> {
    rough_integrate_with(alpha, x, &SewConfig::default()).map(|r| r.0)
}

pub fn rough_integrate_with(
    alpha: &dyn OneForm,
    x: &ClassicalRoughPath,
    cfg: &SewConfig,
) -> Result<(ClassicalRoughPath, SewReport)> {
    let q = almost_path(alpha, x)?;
    let (y, report) = sew_with(&q, cfg)?;
    Ok((y.with_control_scale(x.control().scale), report))
}

/// Empirical `C` with `ω_Y ≤ C·ω_X` over all grid pairs (both controls computed exactly).
pub fn control_ratio(y: &ClassicalRoughPath, x: &ClassicalRoughPath) -> Result<f64> {
    if y.grid().len() != x.grid().len() {
        return Err(Error::Interval("paths must share a grid".into()));
    }
    let (ty, tx) = (y.control().table(), x.control().table());
    let mut c: f64 = 0.0;
    for (ry, rx) in ty.iter().zip(&tx) {
        for (a, b) in ry.iter().zip(rx).skip(1) {
            if *b > 0.0 {
                c = c.max(a / b);
            } else if *a > 1e-14 {
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SewingBand {
    /// Least-squares slope of `log ‖sewn - Q‖` against `log ω`.
    pub theta: f64,
    /// Smallest `K` with `‖sewn - Q‖ ≤ K·ω^θ` on every pair, for the measured `θ`.
    pub k: f64,
    /// Same bound for the nominal exponent `θ₀`.
    pub theta_nominal: f64,
    pub k_nominal: f64,
    pub pairs: usize,
    /// Pairs whose difference sits at round-off level and were left out of the fit.
    pub floor_pairs: usize,
}

/// Measure how far the sewn path sits from `Q` over all grid pairs.
pub fn sewing_band(q: &AlmostRoughPath, sewn: &ClassicalRoughPath, omega: &[Vec<f64>], theta_nominal: f64) -> Result<SewingBand> {
    let m = q.grid.len();
    if sewn.grid().len() != m || omega.len() != m {
        return Err(Error::Interval("sewn path, almost path and control must share a grid".into()));
    }
    let mut pts = Vec::new();
    let mut floor_pairs = 0;
    for i in 0..m {
        for j in i + 1..m {
            let s = sewn.increment(i, j);
            let d = s.sub(&q.pair(i, j)).max_norm();
            let w = omega[i][j - i];
            if w <= 0.0 {
                continue;
            }
            if d <= 1e-13 * (1.0 + s.max_norm()) {
                floor_pairs += 1;
                continue;
            }
            pts.push((w.ln(), d.ln()));
        }
    }
    if pts.len() < 2 {
        return Err(Error::Numeric("too few pairs above round-off to fit the sewing band".into()));
    }
    let nf = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / nf, a.1 + p.1 / nf));
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + (p.0 - mx) * (p.1 - my), a.1 + (p.0 - mx).powi(2)));
    let theta = sxy / sxx;
    let k = pts.iter().map(|(lw, ld)| (ld - theta * lw).exp()).fold(0.0, f64::max);
    let k_nominal = pts.iter().map(|(lw, ld)| (ld - theta_nominal * lw).exp()).fold(0.0, f64::max);
    Ok(SewingBand { theta, k, theta_nominal, k_nominal, pairs: pts.len(), floor_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{auto, ConstantForm, IdentityForm, MapForm, Pullback};
    use crate::expr::ExprMap;
    use crate::lift::{signature, SampledPath};
    use std::sync::Arc;

    fn lift_of_t(n: usize, level: usize) -> ClassicalRoughPath {
        let pts = (0..=n).map(|k| vec![k as f64 / n as f64]).collect();
        signature(&SampledPath::from_points(pts).unwrap(), level).unwrap()
    }

    fn form(vars: &[&str], exprs: &[&str], e: usize, d: usize) -> MapForm {
        MapForm::new(auto(ExprMap::from_strs(vars, exprs).unwrap()), e, d)
    }

    #[test]
    fn zeta_matches_known_values() {
        assert!((zeta(2.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-14);
        assert!((zeta(4.0) - std::f64::consts::PI.powi(4) / 90.0).abs() < 1e-14);
        assert!((zeta(1.5) - 2.612_375_348_685_488).abs() < 1e-13);
    }

    #[test]
    fn zeta_against_bracketed_direct_sum() {
        // Σ_{n<N} n^-s + ∫_N^∞ ≤ ζ(s) ≤ Σ_{n≤N} n^-s + ∫_N^∞
        for s in [1.2, 1.5, 2.5, 3.0] {
            let n = 200_000usize;
            let head: f64 = (1..n).map(|k| (k as f64).powf(-s)).sum();
            let tail = (n as f64).powf(1.0 - s) / (s - 1.0);
            let z = zeta(s);
            assert!(z >= head + tail - 1e-10 && z <= head + tail + (n as f64).powf(-s) + 1e-10, "s = {s}");
        }
    }

    #[test]
    fn beta_examples() {
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((beta_const(1.0) - (1.0 + 2.0 * pi2 / 3.0)).abs() < 1e-12);
        assert!((beta_const(1.0) - 7.57974).abs() < 1e-5);
        assert!((beta_const(2.0) - 16.776).abs() < 5e-3);
        let b = beta_const(2.5);
        assert!(b > 0.0 && b.is_finite());
    }

    #[test]
    fn identity_form_increment_is_exact() {
        let x = lift_of_t(8, 2);
        let q = almost_increment(&IdentityForm(1), &x, 0.1, 0.7).unwrap();
        let want = x.increment_between(0.1, 0.7).unwrap();
        assert!(q.sub(&want).max_norm() < 1e-15);
    }

    #[test]
    fn constant_form_increment() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![3.0, -1.0]];
        let x = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap();
        let a = ConstantForm { n: 2, e: 1, d: 2, a: vec![2.0, -1.0] };
        let q = almost_increment(&a, &x, 0.0, 1.0).unwrap();
        assert!((q.grade(1)[0] - (2.0 * 3.0 + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn linear_form_increment() {
        let x = lift_of_t(4, 2);
        let alpha = form(&["x"], &["x"], 1, 1);
        for (s, t) in [(0.0, 1.0), (0.25, 0.5), (0.3, 0.9)] {
            let q = almost_increment(&alpha, &x, s, t).unwrap();
            let want = s * (t - s) + (t - s).powi(2) / 2.0;
            assert!((q.grade(1)[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn sew_identity_and_multiplicative_input() {
        let pts = (0..=20).map(|k| vec![(k as f64 * 0.3).sin(), (k as f64 * 0.2).cos()]).collect();
        let x = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap();
        let y = rough_integrate(&IdentityForm(2), &x).unwrap();
        for (a, b) in y.increments().iter().zip(x.increments()) {
            assert!(a.sub(b).max_norm() < 1e-10);
        }
        let q = almost_path(&IdentityForm(2), &x).unwrap();
        let (_, rep) = sew_with(&q, &SewConfig::default()).unwrap();
        assert_eq!(rep.max_level, 1);
    }

    #[test]
    fn integral_of_x_dx() {
        let x = lift_of_t(1, 2);
        let y = rough_integrate(&form(&["x"], &["x"], 1, 1), &x).unwrap();
        assert!((y.total().grade(1)[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn circle_area_form() {
        let n = (2.0 * std::f64::consts::PI / 1e-4).ceil() as usize;
        let pts = (0..=n)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let x = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap();
        let y = rough_integrate(&form(&["x", "y"], &["-y", "x"], 1, 2), &x).unwrap();
        assert!((y.total().grade(1)[0] - 2.0 * std::f64::consts::PI).abs() < 1e-5);
    }

    #[test]
    fn chain_rule_instance() {
        let x = lift_of_t(64, 2);
        let psi = auto(ExprMap::from_strs(&["x"], &["x^2"]).unwrap());
        let alpha: Arc<dyn OneForm> = Arc::new(form(&["y"], &["y"], 1, 1));
        let lhs = rough_integrate(&Pullback { form: alpha.clone(), map: psi.clone() }, &x).unwrap();
        let z = rough_integrate(&crate::calculus::ExactForm(psi), &x).unwrap();
        let rhs = rough_integrate(alpha.as_ref(), &z).unwrap();
        assert!((lhs.total().grade(1)[0] - 0.5).abs() < 1e-6);
        assert!((rhs.total().grade(1)[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn level_three_is_unsupported() {
        let x = lift_of_t(4, 3).with_p(3.5).unwrap();
        assert!(matches!(rough_integrate(&IdentityForm(1), &x), Err(Error::Unsupported(_))));
    }

    #[test]
    fn non_contracting_family_is_reported() {
        let q = AlmostRoughPath::new(
            1,
            1,
            vec![0.0, 1.0],
            1.0,
            0.5,
            |_, a: f64, b: f64| TruncatedTensor::from_grades(1, vec![vec![1.0], vec![(b - a).sqrt()]]).unwrap(),
            |_, _| TruncatedTensor::one(1, 1).unwrap(),
        );
        let err = sew_with(&q, &SewConfig { tol: 1e-10, max_refine: 8 }).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("θ = 0.5")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sewing_band_exponent_exceeds_one() {
        let pts = (0..=24).map(|k| vec![(k as f64 * 0.25).sin(), k as f64 * 0.1]).collect();
        let x = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap();
        let alpha = form(&["x", "y"], &["sin(x*y)", "x^2"], 1, 2);
        let q = almost_path(&alpha, &x).unwrap();
        let sewn = sew(&q).unwrap();
        let band = sewing_band(&q, &sewn, &x.control().table(), q.theta).unwrap();
        assert!(band.theta > 1.0, "{band:?}");
        let k_mult = q.almost_multiplicativity(&|i, j| x.control().omega(i, j));
        assert!(k_mult.is_finite());
    }

    #[test]
    fn output_control_is_dominated() {
        let pts = (0..=16).map(|k| vec![(k as f64 * 0.4).cos(), (k as f64 * 0.3).sin()]).collect();
        let x = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap();
        let y = rough_integrate(&form(&["x", "y"], &["y", "1"], 1, 2), &x).unwrap();
        let c = control_ratio(&y, &x).unwrap();
        assert!(c.is_finite() && c > 0.0);
    }
}
