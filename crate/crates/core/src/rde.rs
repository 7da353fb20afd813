//! Rough differential equations `dY = g(Y) dX` on vector spaces, solved as the
//! fixed point `Z = ∫ h(Z) dZ` with `h(x, y)(v, w) = (v, g(y) v)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calculus::{FormJet, OneForm};
use crate::error::{Error, Result};
use crate::integral::{rough_integrate_with, SewConfig};
use crate::lift::{concat_classical, d_p, ClassicalRoughPath};
use crate::lip::{grid_points, lip_norm_estimate, lip_validate, LipJet};
use crate::tensor::{TruncatedTensor, MAX_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdeConfig {
    pub tol: f64,
    pub max_sweeps: usize,
    pub max_depth: usize,
    /// Segment count up to which the fixed-point residual is the exact `d_p`.
    pub exact_residual_limit: usize,
    /// Accept fields with `γ > p - 1` (no uniqueness claim).
    pub existence_only: bool,
    pub validate: bool,
    pub sew: SewConfig,
}

impl Default for RdeConfig {
    fn default() -> Self {
        RdeConfig {
            tol: 1e-9,
            max_sweeps: 50,
            max_depth: 8,
            exact_residual_limit: 4096,
            existence_only: false,
            validate: true,
            sew: SewConfig::default(),
        }
    }
}

/// `dY = g(Y) dX`, `Y_0 = y0`, with `g(y) ∈ L(R^{d1}, R^{d2})`.
#[derive(Clone)]
pub struct RdeProblem {
    pub driver: ClassicalRoughPath,
    pub field: Arc<dyn OneForm>,
    pub y0: Vec<f64>,
    pub gamma: f64,
    pub declared_norm: Option<f64>,
}

impl RdeProblem {
    pub fn new(driver: ClassicalRoughPath, field: Arc<dyn OneForm>, y0: Vec<f64>, gamma: f64) -> Self {
        RdeProblem { driver, field, y0, gamma, declared_norm: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RdeReport {
    pub sweeps: usize,
    pub splits: usize,
    pub pieces: usize,
    /// Largest fixed-point residual over the accepted pieces, relative to `1 + sup|Z|`.
    pub residual: f64,
    /// Whether every residual is the exact `d_p` (otherwise the summed increment difference).
    pub residual_exact: bool,
    pub field_norm: Option<f64>,
    /// Exponent the field was validated at (lower than requested when derivatives are missing).
    pub validated_gamma: Option<f64>,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    /// `C` with `ω_Z ≤ C·ω_X` when the grid is small enough to tabulate.
    pub control_constant: Option<f64>,
}

/// The one-form `h(x, y)(v, w) = (v, g(y) v)` on `R^{d1} ⊕ R^{d2}`.
pub struct RdeForm {
    pub field: Arc<dyn OneForm>,
    pub d1: usize,
    pub d2: usize,
}

impl OneForm for RdeForm {
    fn point_dim(&self) -> usize {
        self.d1 + self.d2
    }
    fn input_dim(&self) -> usize {
        self.d1 + self.d2
    }
    fn output_dim(&self) -> usize {
        self.d1 + self.d2
    }
    fn jet(&self, z: &[f64]) -> FormJet {
        let (d1, d2) = (self.d1, self.d2);
        let n = d1 + d2;
        let g = self.field.jet(&z[d1..]);
        let mut value = vec![0.0; n * n];
        let mut deriv = vec![0.0; n * n * n];
        for a in 0..d1 {
            value[a * n + a] = 1.0;
        }
        for a in 0..d2 {
            for j in 0..d1 {
                value[(d1 + a) * n + j] = g.value[a * d1 + j];
                for i in 0..d2 {
                    deriv[((d1 + a) * n + d1 + i) * n + j] = g.deriv[(a * d2 + i) * d1 + j];
                }
            }
        }
        FormJet { value, deriv }
    }
}

/// `f̂(v, w)(x) = (x, f(v, w) x)`: the driver-augmented field of a signal-dependent equation.
pub struct SignalField {
    pub f: Arc<dyn OneForm>,
    pub d1: usize,
    pub d2: usize,
}

impl OneForm for SignalField {
    fn point_dim(&self) -> usize {
        self.d1 + self.d2
    }
    fn input_dim(&self) -> usize {
        self.d1
    }
    fn output_dim(&self) -> usize {
        self.d1 + self.d2
    }
    fn jet(&self, z: &[f64]) -> FormJet {
        let (d1, d2) = (self.d1, self.d2);
        let n = d1 + d2;
        let f = self.f.jet(z);
        let mut value = vec![0.0; n * d1];
        let mut deriv = vec![0.0; n * n * d1];
        for a in 0..d1 {
            value[a * d1 + a] = 1.0;
        }
        value[d1 * d1..].copy_from_slice(&f.value);
        deriv[d1 * n * d1..].copy_from_slice(&f.deriv);
        FormJet { value, deriv }
    }
    fn second_deriv(&self, z: &[f64]) -> Option<Vec<f64>> {
        let (d1, n) = (self.d1, self.d1 + self.d2);
        let f2 = self.f.second_deriv(z)?;
        let mut out = vec![0.0; n * n * n * d1];
        out[d1 * n * n * d1..].copy_from_slice(&f2);
        Some(out)
    }
}

fn check_field(field: &dyn OneForm, d1: usize, y0: &[f64]) -> Result<usize> {
    let d2 = y0.len();
    if field.point_dim() != d2 || field.output_dim() != d2 || field.input_dim() != d1 {
        return Err(Error::Shape(format!(
            "field maps R^{} to L(R^{}, R^{}); expected L(R^{d1}, R^{d2}) over R^{d2}",
            field.point_dim(),
            field.input_dim(),
            field.output_dim()
        )));
    }
    if d1 + d2 > MAX_DIM {
        return Err(Error::Capacity(format!("joint dimension {} exceeds {MAX_DIM}", d1 + d2)));
    }
    Ok(d2)
}

/// Coarse second-order Euler run giving the bounding box of the visited states.
fn euler_box(field: &dyn OneForm, x: &ClassicalRoughPath, y0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d1, d2) = (x.dim(), y0.len());
    let mut y = y0.to_vec();
    let (mut lo, mut hi) = (y.clone(), y.clone());
    for inc in x.increments() {
        let jet = field.jet(&y);
        let x1 = inc.grade(1);
        let mut dy = vec![0.0; d2];
        for a in 0..d2 {
            let mut acc: f64 = (0..d1).map(|j| jet.value[a * d1 + j] * x1[j]).sum();
            if inc.level() >= 2 {
                let x2 = inc.grade(2);
                for i in 0..d1 {
                    for j in 0..d1 {
                        let c: f64 = (0..d2).map(|b| jet.deriv[(a * d2 + b) * d1 + j] * jet.value[b * d1 + i]).sum();
                        acc += c * x2[i * d1 + j];
                    }
                }
            }
            dy[a] = acc;
        }
        y.iter_mut().zip(&dy).for_each(|(v, d)| *v += d);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("Euler pre-pass diverged; the reachable set is unbounded at this mesh".into()));
        }
        for a in 0..d2 {
            lo[a] = lo[a].min(y[a]);
            hi[a] = hi[a].max(y[a]);
        }
    }
    for a in 0..d2 {
        let half = (0.5 * (hi[a] - lo[a])).max(0.05 * (1.0 + lo[a].abs().max(hi[a].abs())));
        let c = 0.5 * (hi[a] + lo[a]);
        lo[a] = c - 1.5 * half;
        hi[a] = c + 1.5 * half;
    }
    Ok((lo, hi))
}

fn validate_field(
    field: &dyn OneForm,
    gamma: f64,
    declared: Option<f64>,
    lo: &[f64],
    hi: &[f64],
) -> Result<(f64, f64)> {
    let d2 = lo.len();
    let per_axis = (250f64.powf(1.0 / d2 as f64).floor() as usize).clamp(3, 64);
    let pitch = lo.iter().zip(hi).map(|(a, b)| (b - a) / (per_axis - 1) as f64).fold(0.0, f64::max);
    let pts = grid_points(lo, hi, pitch);
    let kmax = if field.second_deriv(&pts[0]).is_some() { 2 } else { 1 };
    let g = gamma.min(kmax as f64 + 1.0);
    let mut jet = LipJet::from_form(field, &pts, g)?;
    if let Some(l) = declared {
        jet = jet.with_declared(l);
        let rep = lip_validate(&jet)?;
        if !rep.ok {
            return Err(Error::Validation(format!(
                "field exceeds its declared Lip-{g} norm {l} on the reachable box (ratio {:.3})",
                rep.worst_ratio
            )));
        }
        return Ok((rep.norm_estimate, g));
    }
    Ok((lip_norm_estimate(&jet)?, g))
}

struct Picard<'a> {
    form: RdeForm,
    x: &'a ClassicalRoughPath,
    cfg: &'a RdeConfig,
}

impl Picard<'_> {
    fn step(&self, z: &ClassicalRoughPath) -> Result<ClassicalRoughPath> {
        let (next, _) = rough_integrate_with(&self.form, z, &self.cfg.sew)?;
        let mut next = next.with_start(z.start().to_vec())?;
        copy_driver_block(&mut next, self.x);
        Ok(next)
    }

    /// Converged path, sweep count, residual and whether it is exact; `None` when not contracting.
    fn run(&self, x: &ClassicalRoughPath, y0: &[f64]) -> Result<Option<(ClassicalRoughPath, usize, f64, bool)>> {
        let (d1, d2) = (x.dim(), y0.len());
        let n = d1 + d2;
        let mut fill = x.start().to_vec();
        fill.extend_from_slice(y0);
        let mut z = x.embed(n, &(0..d1).collect::<Vec<_>>(), &fill)?;
        let exact = x.segments() <= self.cfg.exact_residual_limit;
        let mut prev = f64::INFINITY;
        let mut stalls = 0;
        let mut next = match self.step(&z) {
            Ok(v) => v,
            Err(Error::Numeric(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        for sweep in 1..=self.cfg.max_sweeps {
            // Grade g is compared at scale^g so that the test is invariant under dilation.
            let scale = 1.0 + next.trace().iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            let delta: f64 = z
                .increments()
                .iter()
                .zip(next.increments())
                .map(|(a, b)| {
                    let d = a.sub(b);
                    (1..=d.level()).map(|g| d.grade(g).iter().map(|c| c.abs()).sum::<f64>() / scale.powi(g as i32)).fold(0.0, f64::max)
                })
                .sum();
            if !delta.is_finite() {
                return Ok(None);
            }
            if delta <= self.cfg.tol {
                let residual = if exact { d_p(&dilate(&z, 1.0 / scale), &dilate(&next, 1.0 / scale))? } else { delta };
                if residual <= self.cfg.tol {
                    return Ok(Some((z, sweep, residual, exact)));
                }
            }
            if delta > 0.95 * prev && sweep > 8 {
                stalls += 1;
                if stalls >= 3 {
                    return Ok(None);
                }
            } else {
                stalls = 0;
            }
            prev = delta;
            z = next;
            next = match self.step(&z) {
                Ok(v) => v,
                Err(Error::Numeric(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
        }
        Ok(None)
    }
}

/// `δ_λ`: grade `g` multiplied by `λ^g`.
fn dilate(z: &ClassicalRoughPath, lambda: f64) -> ClassicalRoughPath {
    let mut out = z.clone();
    for inc in out.increments_mut() {
        for g in 1..=inc.level() {
            let f = lambda.powi(g as i32);
            inc.grade_mut(g).iter_mut().for_each(|c| *c *= f);
        }
    }
    out
}

fn copy_driver_block(z: &mut ClassicalRoughPath, x: &ClassicalRoughPath) {
    let d1 = x.dim();
    let n = z.dim();
    let level = z.level();
    for (zi, xi) in z.increments_mut().iter_mut().zip(x.increments()) {
        zi.grade_mut(1)[..d1].copy_from_slice(&xi.grade(1)[..d1]);
        if level >= 2 {
            let x2 = xi.grade(2).to_vec();
            let g2 = zi.grade_mut(2);
            for a in 0..d1 {
                g2[a * n..a * n + d1].copy_from_slice(&x2[a * d1..(a + 1) * d1]);
            }
        }
    }
}

fn truncate(x: &ClassicalRoughPath, level: usize) -> Result<ClassicalRoughPath> {
    if x.level() <= level {
        return Ok(x.clone());
    }
    let incs = x.increments().iter().map(|t| t.with_level(level)).collect::<Result<Vec<_>>>()?;
    Ok(ClassicalRoughPath::from_increments(x.grid().to_vec(), incs, x.start().to_vec(), x.p())?
        .with_control_scale(x.control().scale))
}

fn solve_piece(
    field: &Arc<dyn OneForm>,
    x: &ClassicalRoughPath,
    y0: &[f64],
    cfg: &RdeConfig,
    depth: usize,
    report: &mut RdeReport,
) -> Result<ClassicalRoughPath> {
    let picard = Picard { form: RdeForm { field: field.clone(), d1: x.dim(), d2: y0.len() }, x, cfg };
    if let Some((z, sweeps, residual, exact)) = picard.run(x, y0)? {
        report.sweeps += sweeps;
        report.pieces += 1;
        report.residual = report.residual.max(residual);
        report.residual_exact &= exact;
        return Ok(z);
    }
    if depth >= cfg.max_depth {
        return Err(Error::Numeric(format!(
            "Picard iteration did not contract on [{}, {}] after {} interval halvings",
            x.t0(),
            x.t1(),
            depth
        )));
    }
    report.splits += 1;
    let x = if x.segments() == 1 { x.insert_time(0.5 * (x.t0() + x.t1()))? } else { x.clone() };
    let mid = x.segments() / 2;
    let left = solve_piece(field, &x.slice(0, mid)?, y0, cfg, depth + 1, report)?;
    let d1 = x.dim();
    let y_mid = left.trace().last().unwrap()[d1..].to_vec();
    let right = solve_piece(field, &x.slice(mid, x.segments())?, &y_mid, cfg, depth + 1, report)?;
    concat_classical(&left, &right)
}

pub fn solve_rde(prob: &RdeProblem) -> Result<ClassicalRoughPath> {
    solve_rde_with(prob, &RdeConfig::default()).map(|r| r.0)
}

/// Solution `Z` on `R^{d1} ⊕ R^{d2}` whose first block is the driver.
pub fn solve_rde_with(prob: &RdeProblem, cfg: &RdeConfig) -> Result<(ClassicalRoughPath, RdeReport)> {
    let x = &prob.driver;
    check_field(prob.field.as_ref(), x.dim(), &prob.y0)?;
    let p = x.p();
    if p.floor() > 2.0 {
        return Err(Error::Unsupported(format!("RDE solving needs ⌊p⌋ ≤ 2, got p = {p}")));
    }
    if cfg.existence_only {
        if !(prob.gamma > p - 1.0) {
            return Err(Error::Invalid(format!("existence needs γ > p - 1; got γ = {}, p = {p}", prob.gamma)));
        }
    } else if !(prob.gamma > p) {
        return Err(Error::Invalid(format!("uniqueness needs γ > p; got γ = {}, p = {p} (see existence_only)", prob.gamma)));
    }
    let x = truncate(x, 2)?;
    let (lo, hi) = euler_box(prob.field.as_ref(), &x, &prob.y0)?;
    let mut report = RdeReport { residual_exact: true, box_lo: lo.clone(), box_hi: hi.clone(), ..Default::default() };
    if cfg.validate {
        let (norm, g) = validate_field(prob.field.as_ref(), prob.gamma, prob.declared_norm, &lo, &hi)?;
        report.field_norm = Some(norm);
        report.validated_gamma = Some(g);
    }
    let z = solve_piece(&prob.field, &x, &prob.y0, cfg, 0, &mut report)?;
    if z.segments() <= 256 {
        let xz = z.project(&(0..x.dim()).collect::<Vec<_>>())?;
        report.control_constant = crate::integral::control_ratio(&z, &xz.refine_to(z.grid())?).ok();
    }
    Ok((z, report))
}

/// The response block `Y` of a solution.
pub fn response(z: &ClassicalRoughPath, d1: usize) -> Result<ClassicalRoughPath> {
    z.project(&(d1..z.dim()).collect::<Vec<_>>())
}

pub fn solve_rde_signal_dep(
    f: Arc<dyn OneForm>,
    x: &ClassicalRoughPath,
    y0: &[f64],
    gamma: f64,
) -> Result<ClassicalRoughPath> {
    solve_rde_signal_dep_with(f, x, y0, gamma, &RdeConfig::default()).map(|r| r.0)
}

/// Solve `dY = f(X, Y) dX` through `f̂` and return the `(X, Y)` block on `R^{d1} ⊕ R^{d2}`.
pub fn solve_rde_signal_dep_with(
    f: Arc<dyn OneForm>,
    x: &ClassicalRoughPath,
    y0: &[f64],
    gamma: f64,
    cfg: &RdeConfig,
) -> Result<(ClassicalRoughPath, RdeReport)> {
    let (d1, d2) = (x.dim(), y0.len());
    if f.point_dim() != d1 + d2 || f.input_dim() != d1 || f.output_dim() != d2 {
        return Err(Error::Shape(format!(
            "signal-dependent field must map R^{} to L(R^{d1}, R^{d2})",
            d1 + d2
        )));
    }
    let field: Arc<dyn OneForm> = Arc::new(SignalField { f, d1, d2 });
    let mut state0 = x.start().to_vec();
    state0.extend_from_slice(y0);
    let prob = RdeProblem::new(x.clone(), field, state0, gamma);
    let (z, report) = solve_rde_with(&prob, cfg)?;
    Ok((response(&z, d1)?, report))
}

/// Level-2 increments `(t-s)·A` of a pure-area driver with `X¹ ≡ 0`.
pub fn pure_area_driver(area: &[f64], grid: Vec<f64>, p: f64) -> Result<ClassicalRoughPath> {
    let d = (area.len() as f64).sqrt().round() as usize;
    if d * d != area.len() {
        return Err(Error::Shape("area matrix must be square".into()));
    }
    let incs = grid
        .windows(2)
        .map(|w| {
            let mut t = TruncatedTensor::one(d, 2)?;
            t.grade_mut(2).iter_mut().zip(area).for_each(|(v, a)| *v = a * (w[1] - w[0]));
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    ClassicalRoughPath::from_increments(grid, incs, vec![0.0; d], p)
}

/// `Σ_i A_i y ⊗ e_i`: the linear field with `g(y)(e_i) = A_i y` (matrices row-major `d2×d2`).
pub struct LinearField {
    pub mats: Vec<Vec<f64>>,
    pub d2: usize,
}

impl OneForm for LinearField {
    fn point_dim(&self) -> usize {
        self.d2
    }
    fn input_dim(&self) -> usize {
        self.mats.len()
    }
    fn output_dim(&self) -> usize {
        self.d2
    }
    fn jet(&self, y: &[f64]) -> FormJet {
        let (d1, d2) = (self.mats.len(), self.d2);
        let mut value = vec![0.0; d2 * d1];
        let mut deriv = vec![0.0; d2 * d2 * d1];
        for (j, m) in self.mats.iter().enumerate() {
            for a in 0..d2 {
                value[a * d1 + j] = (0..d2).map(|b| m[a * d2 + b] * y[b]).sum();
                for i in 0..d2 {
                    deriv[(a * d2 + i) * d1 + j] = m[a * d2 + i];
                }
            }
        }
        FormJet { value, deriv }
    }
    fn second_deriv(&self, _y: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.d2.pow(3) * self.mats.len()])
    }
}
