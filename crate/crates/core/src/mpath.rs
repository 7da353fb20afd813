//! Rough paths on manifolds stored as localising sequences: one coordinate
//! rough path per time interval, each inside the shrunk ball of its chart.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::atlas::{Atlas, Chart, ChartMap, ManifoldForm, PartitionOfUnity};
use crate::calculus::{auto, smooth_step, Compose, ExactForm, FormJet, GenericMap, MapForm, OneForm, Scalar, SmoothMap};
use crate::error::{Error, Result};
use crate::integral::{beta_const, rough_integrate};
use crate::lift::{concat_classical, d_p_with, restrict, ClassicalRoughPath};
use crate::lip::{lip_norm_estimate, LipJet, NormKind, ScaledIdentity};
use crate::tensor::TruncatedTensor;

/// Tolerance for endpoint-consistency probes.
pub const CONSISTENCY_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub interval: [f64; 2],
    pub chart: usize,
    pub start_coords: Vec<f64>,
    pub roughpath: ClassicalRoughPath,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifoldRoughPath {
    pub atlas: Arc<Atlas>,
    pub start: Vec<f64>,
    pub p: f64,
    pub gamma: f64,
    pub segments: Vec<Segment>,
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

impl ManifoldRoughPath {
    /// Assemble a path, checking contiguity, chart indices and segment supports.
    pub fn new(atlas: Arc<Atlas>, start: Vec<f64>, p: f64, gamma: f64, segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Invalid("a manifold rough path needs at least one segment".into()));
        }
        if start.len() != atlas.ambient_dim() {
            return Err(Error::Shape(format!("start has {} coordinates, atlas expects {}", start.len(), atlas.ambient_dim())));
        }
        for (n, s) in segments.iter().enumerate() {
            if s.chart >= atlas.charts.len() {
                return Err(Error::Invalid(format!("segment {n} names chart {} of {}", s.chart, atlas.charts.len())));
            }
            if s.roughpath.dim() != atlas.dim() || NormKind::Max.dist(s.roughpath.start(), &s.start_coords) > 1e-12 {
                return Err(Error::Shape(format!("segment {n} coordinate path does not match its chart or start")));
            }
            if !same_time(s.interval[0], s.roughpath.t0()) || !same_time(s.interval[1], s.roughpath.t1()) {
                return Err(Error::Interval(format!("segment {n} interval disagrees with its path")));
            }
            if n > 0 && !same_time(segments[n - 1].interval[1], s.interval[0]) {
                return Err(Error::Interval(format!("segments {} and {n} are not contiguous", n - 1)));
            }
        }
        let z = ManifoldRoughPath { atlas, start, p, gamma, segments };
        z.check_supports()?;
        Ok(z)
    }

    pub fn t0(&self) -> f64 {
        self.segments[0].interval[0]
    }

    pub fn t1(&self) -> f64 {
        self.segments.last().unwrap().interval[1]
    }

    pub fn level(&self) -> usize {
        self.segments[0].roughpath.level()
    }

    /// Ambient point at the end of segment `n`.
    pub fn segment_end(&self, n: usize) -> Vec<f64> {
        let s = &self.segments[n];
        let inc = s.roughpath.total();
        let u: Vec<f64> = s.start_coords.iter().zip(inc.grade(1)).map(|(a, b)| a + b).collect();
        self.atlas.charts[s.chart].inverse(&u)
    }

    pub fn end_point(&self) -> Vec<f64> {
        self.segment_end(self.segments.len() - 1)
    }

    /// Every segment's coordinate trace lies in `B(0, 1 - δ/2)`.
    pub fn check_supports(&self) -> Result<()> {
        let r = 1.0 - self.atlas.delta / 2.0;
        for (n, s) in self.segments.iter().enumerate() {
            let worst = s.roughpath.trace().iter().map(|u| self.atlas.norm.vec_norm(u)).fold(0.0, f64::max);
            if worst > r + 1e-12 {
                return Err(Error::Domain(format!("segment {n} leaves B(0, {r}) of chart {} (|u| = {worst})", s.chart)));
            }
        }
        Ok(())
    }

    /// Worst endpoint-consistency residual over all internal boundaries.
    pub fn consistency(&self) -> Result<f64> {
        let starts: Vec<Vec<f64>> =
            self.segments.iter().map(|s| self.atlas.charts[s.chart].inverse(&s.start_coords)).collect();
        let first = NormKind::Max.dist(&starts[0], &self.start);
        (1..self.segments.len())
            .into_par_iter()
            .map(|n| endpoint_residual(&self.atlas, &self.segments[n - 1], &starts[n]))
            .try_reduce(|| first, |a, b| Ok(a.max(b)))
    }

    /// Charts used by some segment.
    pub fn active_charts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.segments.iter().map(|s| s.chart).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Which coordinate block of a product chart a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    Whole,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    /// `d(χ w_a)` for the bumped probe coordinates `w`.
    Exact,
    /// `χ w_{a+1} dw_a`.
    Twisted,
}

/// Probe one-form built from the bumped coordinates of one chart.
#[derive(Clone)]
pub struct ProbeForm {
    pub chart: Arc<Chart>,
    pub kind: ProbeKind,
    pub factor: Factor,
    pub inner: f64,
    pub outer: f64,
}

#[derive(Clone)]
struct ProbeMap {
    probe: ProbeForm,
    eval: Chart,
    offset: usize,
    total: usize,
}

impl GenericMap for ProbeMap {
    fn dim_in(&self) -> usize {
        self.total
    }
    fn dim_out(&self) -> usize {
        let dp = self.probe.chart.dim();
        match self.probe.kind {
            ProbeKind::Exact => dp,
            ProbeKind::Twisted => dp * self.total,
        }
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let v = &x[self.offset..self.offset + self.eval.dim()];
        let p = self.eval.inverse(v);
        let pr = &self.probe;
        let dp = pr.chart.dim();
        if pr.kind == ProbeKind::Exact {
            return pr.chart.bump_coords(&p, pr.inner, pr.outer);
        }
        let mut out = vec![S::cst(0.0); dp * self.total];
        let pv: Vec<f64> = p.iter().map(|s| s.value()).collect();
        if !pr.chart.in_domain(&pv) {
            return out;
        }
        let w = pr.chart.forward(&p);
        if w.iter().any(|c| !(c.value().abs() < pr.outer)) {
            return out;
        }
        let chi = crate::calculus::box_cutoff(&w, pr.inner, pr.outer);
        let (big, de) = (pr.chart.ambient_dim(), self.eval.dim());
        let jf = pr.chart.forward_jacobian(&p);
        let ji = self.eval.inverse_jacobian(v);
        for a in 0..dp {
            let coef = chi * w[(a + 1) % dp];
            for c in 0..de {
                let mut acc = S::cst(0.0);
                for m in 0..big {
                    acc = acc + jf[a * big + m] * ji[m * de + c];
                }
                out[a * self.total + self.offset + c] = coef * acc;
            }
        }
        out
    }
}

impl ProbeForm {
    pub fn new(atlas: &Atlas, chart: usize, kind: ProbeKind) -> Self {
        ProbeForm { chart: atlas.charts[chart].clone(), kind, factor: Factor::Whole, inner: 1.0 - atlas.delta, outer: 1.0 }
    }

    pub fn on_factor(mut self, factor: Factor) -> Self {
        self.factor = factor;
        self
    }

    fn map(&self, atlas: &Atlas, k: usize) -> Result<ProbeMap> {
        let chart = &atlas.charts[k];
        let (eval, offset) = match self.factor {
            Factor::Whole => (chart.as_ref().clone(), 0),
            Factor::Left => (chart.factors().ok_or_else(|| Error::Invalid("probe needs a product chart".into()))?.0.clone(), 0),
            Factor::Right => {
                let (l, r) = chart.factors().ok_or_else(|| Error::Invalid("probe needs a product chart".into()))?;
                (r.clone(), l.dim())
            }
        };
        if eval.ambient_dim() != self.chart.ambient_dim() {
            return Err(Error::Shape("probe chart and evaluation chart live on different manifolds".into()));
        }
        Ok(ProbeMap { probe: self.clone(), eval, offset, total: chart.dim() })
    }
}

impl ManifoldForm for ProbeForm {
    fn output_dim(&self) -> usize {
        self.chart.dim()
    }
    fn chart_rep(&self, atlas: &Atlas, k: usize) -> Result<Arc<dyn OneForm>> {
        let m = self.map(atlas, k)?;
        let total = m.total;
        Ok(match self.kind {
            ProbeKind::Exact => Arc::new(ExactForm(auto(m))),
            ProbeKind::Twisted => Arc::new(MapForm::new(auto(m), self.chart.dim(), total)),
        })
    }
    fn vanishes_along(&self, atlas: &Atlas, k: usize, trace: &[Vec<f64>]) -> bool {
        let Ok(m) = self.map(atlas, k) else { return false };
        let ws: Vec<Option<Vec<f64>>> = trace
            .iter()
            .map(|u| self.chart.coords(&m.eval.inverse(&u[m.offset..m.offset + m.eval.dim()])))
            .collect();
        let mut step: f64 = 0.0;
        for w in ws.windows(2) {
            match (&w[0], &w[1]) {
                (Some(a), Some(b)) => step = step.max(NormKind::Max.dist(a, b)),
                (None, None) => {}
                _ => step = step.max(0.5),
            }
        }
        ws.iter().flatten().all(|w| NormKind::Max.vec_norm(w) >= self.outer + 2.0 * step)
    }
}

/// Exact and twisted probes for the given charts.
pub fn probe_family(atlas: &Atlas, charts: &[usize], factor: Factor) -> Vec<ProbeForm> {
    charts
        .iter()
        .flat_map(|&c| [ProbeKind::Exact, ProbeKind::Twisted].map(|k| ProbeForm::new(atlas, c, k).on_factor(factor)))
        .collect()
}

/// `max |g(x_n) + π₁Z^n(dg) - g(x_{n+1})|` over bumped coordinates `g` of the segment chart and of the best chart at `next`.
pub fn endpoint_residual(atlas: &Atlas, seg: &Segment, next: &[f64]) -> Result<f64> {
    let mut charts = vec![seg.chart];
    if let Some((c, _)) = atlas.best_chart(next) {
        if c != seg.chart {
            charts.push(c);
        }
    }
    let start = atlas.charts[seg.chart].inverse(&seg.start_coords);
    let mut worst: f64 = 0.0;
    for c in charts {
        let probe = ProbeForm::new(atlas, c, ProbeKind::Exact);
        let rep = probe.chart_rep(atlas, seg.chart)?;
        let inc = rough_integrate(rep.as_ref(), &seg.roughpath)?.total();
        let g0: Vec<f64> = probe.chart.bump_coords(&start, probe.inner, probe.outer);
        let g1: Vec<f64> = probe.chart.bump_coords(next, probe.inner, probe.outer);
        for a in 0..g0.len() {
            worst = worst.max((g0[a] + inc.grade(1)[a] - g1[a]).abs());
        }
    }
    Ok(worst)
}

/// Multiply grade-`g` coefficients by `Π factor[i_k]`.
fn scale_tensor(t: &TruncatedTensor, factor: &[f64]) -> TruncatedTensor {
    let d = t.dim();
    let mut out = t.clone();
    for g in 1..=t.level() {
        for (r, c) in out.grade_mut(g).iter_mut().enumerate() {
            let mut idx = r;
            let mut f = 1.0;
            for _ in 0..g {
                f *= factor[idx % d];
                idx /= d;
            }
            *c *= f;
        }
    }
    out
}

fn scale_path(x: &ClassicalRoughPath, factor: &[f64], start: Vec<f64>) -> Result<ClassicalRoughPath> {
    let incs = x.increments().iter().map(|t| scale_tensor(t, factor)).collect();
    Ok(ClassicalRoughPath::from_increments(x.grid().to_vec(), incs, start, x.p())?.with_control_scale(x.control().scale))
}

/// Image of an ambient path piece in chart coordinates, started at `z0`.
fn chart_image(chart: &Arc<Chart>, x: &ClassicalRoughPath, z0: Vec<f64>) -> Result<ClassicalRoughPath> {
    if let Some((_, scales)) = chart.affine() {
        let inv: Vec<f64> = scales.iter().map(|s| 1.0 / s).collect();
        return scale_path(x, &inv, z0);
    }
    let phi = ExactForm(auto(ChartMap { chart: chart.clone(), inverse: false }));
    rough_integrate(&phi, x)?.with_start(z0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocaliseReport {
    pub w_star: f64,
    pub dphi_norm: f64,
    pub t0: f64,
    /// `⌈T/t₀⌉`.
    pub n_formula: usize,
    pub halvings: usize,
    pub segments: usize,
    /// `whole`, `grid` or `speed`.
    pub rule: String,
    pub consistency: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LocaliseConfig {
    pub max_halvings: usize,
    pub check_consistency: bool,
}

impl Default for LocaliseConfig {
    fn default() -> Self {
        LocaliseConfig { max_halvings: 8, check_consistency: true }
    }
}

/// `W* = (δ·β·Γ(1/p+1)/(2L))^p / ‖dφ‖`: the control budget of one segment.
pub fn w_star(atlas: &Atlas, p: f64, dphi: f64) -> f64 {
    (atlas.delta * beta_const(p) * gamma(1.0 / p + 1.0) / (2.0 * atlas.l.max(1.0))).powf(p) / dphi.max(1e-300)
}

/// Step `t₀` for a path with control budget `w`, and the rule that produced it.
///
/// * `whole`: `ω(t_0, T) ≤ w`, so `t₀ = T`.
/// * `grid`: `t₀ = min_i max{t_j - t_{i+1} : ω(t_i, t_j) ≤ w}`.
/// * `speed` (`p = 1` only, where `ω` is additive): `t₀ = w · min_k Δt_k/ω(t_k, t_{k+1})`.
pub fn step_size(x: &ClassicalRoughPath, w: f64) -> Result<(f64, &'static str)> {
    let ctrl = x.control();
    let grid = x.grid();
    let m = x.segments();
    let t_total = x.t1() - x.t0();
    if ctrl.omega_row(0, w).len() == m + 1 && *ctrl.omega_row(0, w).last().unwrap() <= w {
        return Ok((t_total, "whole"));
    }
    let windows: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let row = ctrl.omega_row(i, w);
            let reach = row.iter().rposition(|&v| v <= w).unwrap_or(0);
            if i + reach >= m && row.len() == m - i + 1 {
                return f64::INFINITY;
            }
            if reach == 0 {
                0.0
            } else {
                grid[i + reach] - grid[i + 1]
            }
        })
        .collect();
    let t0 = windows.iter().copied().fold(f64::INFINITY, f64::min);
    if t0 > 0.0 && t0.is_finite() {
        return Ok((t0, "grid"));
    }
    if x.p() <= 1.0 + 1e-12 {
        let t0 = (0..m)
            .map(|k| {
                let om = ctrl.scale * ctrl.local(&x.increments()[k]);
                if om > 0.0 {
                    w * (grid[k + 1] - grid[k]) / om
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::INFINITY, f64::min);
        return Ok((t0.min(t_total), "speed"));
    }
    Err(Error::Numeric(format!(
        "control budget {w:.3e} is below a single grid step; refine the path before localising"
    )))
}

/// Localising sequence of an ambient path on a manifold: uniform segments of length `T/N`, `N = ⌈T/t₀⌉`
/// (snapped to grid points under the `grid` rule), each pushed into the chart with the smallest
/// coordinates at its start; `N` doubles up to `max_halvings` times if a trace leaves `B(0, 1 - δ/2)`.
pub fn localise_with(
    x: &ClassicalRoughPath,
    atlas: Arc<Atlas>,
    gamma_: f64,
    cfg: &LocaliseConfig,
) -> Result<(ManifoldRoughPath, LocaliseReport)> {
    if x.dim() != atlas.ambient_dim() {
        return Err(Error::Shape(format!("path in R^{}, atlas ambient R^{}", x.dim(), atlas.ambient_dim())));
    }
    let start = x.start().to_vec();
    if !atlas.contains(&start) {
        return Err(Error::Domain(format!("start {start:?} is not on the manifold inside the shrunk charts")));
    }
    let dphi = atlas.dphi_norm();
    let w = w_star(&atlas, x.p(), dphi);
    let (t0, rule) = step_size(x, w)?;
    let t_total = x.t1() - x.t0();
    let n_formula = ((t_total / t0) - 1e-9).ceil().max(1.0) as usize;
    let mut last_err = None;
    for h in 0..=cfg.max_halvings {
        let n = n_formula << h;
        let mut cuts: Vec<f64> = (0..=n).map(|k| x.t0() + t_total * k as f64 / n as f64).collect();
        if rule == "grid" {
            let g = x.grid();
            for c in cuts.iter_mut().skip(1).take(n - 1) {
                let idx = g.partition_point(|&t| t <= *c + 1e-12 * (1.0 + c.abs())) - 1;
                *c = g[idx];
            }
            cuts.dedup_by(|a, b| same_time(*a, *b));
        }
        match build_segments(x, &atlas, &cuts) {
            Ok(segments) => {
                let z = ManifoldRoughPath { atlas: atlas.clone(), start: start.clone(), p: x.p(), gamma: gamma_, segments };
                let consistency = if cfg.check_consistency { Some(z.consistency()?) } else { None };
                if let Some(c) = consistency {
                    if c > CONSISTENCY_TOL {
                        return Err(Error::Numeric(format!("endpoint consistency residual {c:.3e}")));
                    }
                }
                let report = LocaliseReport {
                    w_star: w,
                    dphi_norm: dphi,
                    t0,
                    n_formula,
                    halvings: h,
                    segments: z.segments.len(),
                    rule: rule.into(),
                    consistency,
                };
                return Ok((z, report));
            }
            Err(e @ Error::Domain(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

pub fn localise(x: &ClassicalRoughPath, atlas: Arc<Atlas>, gamma_: f64) -> Result<(ManifoldRoughPath, LocaliseReport)> {
    localise_with(x, atlas, gamma_, &LocaliseConfig::default())
}

fn build_segments(x: &ClassicalRoughPath, atlas: &Atlas, cuts: &[f64]) -> Result<Vec<Segment>> {
    let r = 1.0 - atlas.delta / 2.0;
    let mut point = x.start().to_vec();
    let mut out = Vec::with_capacity(cuts.len() - 1);
    for w in cuts.windows(2) {
        let (k, margin) = atlas.best_chart(&point).ok_or_else(|| Error::Domain(format!("point {point:?} is in no chart")))?;
        if margin >= 1.0 - atlas.delta {
            return Err(Error::Domain(format!("point {point:?} left the shrunk cover")));
        }
        let chart = &atlas.charts[k];
        let piece = restrict(x, w[0], w[1])?;
        let z0 = chart.forward(&point);
        let zp = chart_image(chart, &piece, z0.clone())?;
        let worst = zp.trace().iter().map(|u| atlas.norm.vec_norm(u)).fold(0.0, f64::max);
        if worst > r {
            return Err(Error::Domain(format!("segment on [{}, {}] leaves B(0, {r}) of chart {k}", w[0], w[1])));
        }
        let end: Vec<f64> = z0.iter().zip(zp.total().grade(1)).map(|(a, b)| a + b).collect();
        point = chart.inverse(&end);
        out.push(Segment { interval: [w[0], w[1]], chart: k, start_coords: z0, roughpath: zp });
    }
    Ok(out)
}

/// Classical path in a vector-space atlas, as a manifold rough path started at `x0` (default: its own start).
pub fn from_classical(x: &ClassicalRoughPath, x0: Option<&[f64]>, atlas: Arc<Atlas>) -> Result<ManifoldRoughPath> {
    let crate::atlas::ManifoldKind::VectorSpace { region } = &atlas.manifold else {
        return Err(Error::Invalid("from_classical needs a vector-space atlas".into()));
    };
    let x = match x0 {
        Some(p) => x.clone().with_start(p.to_vec())?,
        None => x.clone(),
    };
    let tol = 1e-12;
    if let Some(p) = x.trace().iter().find(|p| p.iter().zip(&region.lo).zip(&region.hi).any(|((v, l), h)| *v < l - tol || *v > h + tol)) {
        return Err(Error::Domain(format!("trace point {p:?} escapes the atlas region")));
    }
    let cfg = LocaliseConfig { check_consistency: false, ..Default::default() };
    Ok(localise_with(&x, atlas, x.p() + 1.0, &cfg)?.0)
}

/// Inverse of [`from_classical`]: exact for affine charts, otherwise the pushforward of a scaled identity.
pub fn to_classical(z: &ManifoldRoughPath) -> Result<ClassicalRoughPath> {
    let affine: Option<Vec<Vec<f64>>> = z.segments.iter().map(|s| z.atlas.charts[s.chart].affine().map(|a| a.1)).collect();
    if let Some(scales) = affine {
        let mut out: Option<ClassicalRoughPath> = None;
        for (s, sc) in z.segments.iter().zip(&scales) {
            let piece = scale_path(&s.roughpath, sc, z.atlas.charts[s.chart].inverse(&s.start_coords))?;
            out = Some(match out {
                None => piece,
                Some(acc) => concat_classical(&acc, &piece)?,
            });
        }
        return out.unwrap().with_start(z.start.clone());
    }
    let u = 1.0 + z.atlas.samples().iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    pushforward(z, Arc::new(ScaledIdentity::new(z.atlas.ambient_dim(), u)))
}

/// `Z(α)`: per segment, the rough integral of the chart representation, concatenated.
pub fn evaluate(z: &ManifoldRoughPath, alpha: &dyn ManifoldForm) -> Result<ClassicalRoughPath> {
    let e = alpha.output_dim();
    let pieces = z
        .segments
        .par_iter()
        .map(|s| {
            let zp = &s.roughpath;
            if alpha.vanishes_along(&z.atlas, s.chart, &zp.trace()) {
                let one = TruncatedTensor::one(e, zp.level())?;
                return ClassicalRoughPath::from_increments(zp.grid().to_vec(), vec![one; zp.segments()], vec![0.0; e], zp.p());
            }
            let rep = alpha.chart_rep(&z.atlas, s.chart)?;
            if rep.point_dim() != zp.dim() || rep.input_dim() != zp.dim() {
                return Err(Error::Shape(format!("form does not resolve on chart {}", s.chart)));
            }
            rough_integrate(rep.as_ref(), zp)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = pieces[0].clone();
    for piece in &pieces[1..] {
        out = concat_classical(&out, piece)?;
    }
    out.with_p(z.p)
}

/// Pushforward to a vector space: increments `Z(dg)`, start `g(x₀)`.
pub fn pushforward(z: &ManifoldRoughPath, g: Arc<dyn SmoothMap>) -> Result<ClassicalRoughPath> {
    if g.dim_in() != z.atlas.ambient_dim() {
        return Err(Error::Shape("g must be defined on the ambient space".into()));
    }
    let form = ExactAmbient(g.clone());
    let y = evaluate(z, &form)?;
    y.with_start(g.eval(&z.start))
}

/// Pushforward onto another atlas'd manifold whose ambient space is the target of `g`.
pub fn pushforward_manifold(z: &ManifoldRoughPath, g: Arc<dyn SmoothMap>, target: Arc<Atlas>) -> Result<ManifoldRoughPath> {
    let y = pushforward(z, g)?;
    Ok(localise(&y, target, z.gamma)?.0)
}

/// `dg` for an ambient map `g`.
struct ExactAmbient(Arc<dyn SmoothMap>);

impl ManifoldForm for ExactAmbient {
    fn output_dim(&self) -> usize {
        self.0.dim_out()
    }
    fn chart_rep(&self, atlas: &Atlas, k: usize) -> Result<Arc<dyn OneForm>> {
        let inv = auto(ChartMap { chart: atlas.charts[k].clone(), inverse: true });
        Ok(Arc::new(ExactForm(Arc::new(Compose { outer: self.0.clone(), inner: inv }))))
    }
}

/// Worst ratio `‖g*α‖/‖α‖` over constant and linear probe forms on the target.
pub fn pullback_bound(atlas: &Atlas, g: Arc<dyn SmoothMap>, gamma_: f64) -> Result<f64> {
    let m = g.dim_out();
    let mut worst: f64 = 0.0;
    for a in 0..m {
        for b in 0..=m {
            let exprs: Vec<String> = (0..m)
                .map(|c| match (c == a, b < m) {
                    (true, true) => format!("x{b}"),
                    (true, false) => "1".into(),
                    _ => "0".into(),
                })
                .collect();
            let vars: Vec<String> = (0..m).map(|i| format!("x{i}")).collect();
            let map = crate::expr::ExprMap::new(crate::expr::ExprSpec { vars, exprs })?;
            let alpha: Arc<dyn OneForm> = Arc::new(MapForm::new(auto(map), 1, m));
            let (_, rep) = crate::atlas::pullback_one_form(atlas, g.clone(), alpha, gamma_)?;
            worst = worst.max(rep.norm_pullback / rep.norm_alpha.max(1e-300));
        }
    }
    if !worst.is_finite() {
        return Err(Error::Validation("pullback bound fails on probe forms".into()));
    }
    Ok(worst)
}

/// Union of chart-inverse images of the segment traces, with the start.
pub fn support(z: &ManifoldRoughPath) -> Vec<Vec<f64>> {
    let mut out = vec![z.start.clone()];
    for s in &z.segments {
        let c = &z.atlas.charts[s.chart];
        out.extend(s.roughpath.trace().iter().map(|u| c.inverse(u)));
    }
    out
}

/// Restriction to `[s, t]`.
pub fn restrict_manifold(z: &ManifoldRoughPath, s: f64, t: f64) -> Result<ManifoldRoughPath> {
    if !(t > s) || s < z.t0() - 1e-12 || t > z.t1() + 1e-12 {
        return Err(Error::Interval(format!("[{s}, {t}] is not inside [{}, {}]", z.t0(), z.t1())));
    }
    let mut segments = Vec::new();
    for seg in &z.segments {
        let (a, b) = (seg.interval[0].max(s), seg.interval[1].min(t));
        if b - a <= 1e-12 * (1.0 + b.abs()) {
            continue;
        }
        let rp = if same_time(a, seg.interval[0]) && same_time(b, seg.interval[1]) {
            seg.roughpath.clone()
        } else {
            restrict(&seg.roughpath, a, b)?
        };
        segments.push(Segment { interval: [a, b], chart: seg.chart, start_coords: rp.start().to_vec(), roughpath: rp });
    }
    let start = z.atlas.charts[segments[0].chart].inverse(&segments[0].start_coords);
    ManifoldRoughPath::new(z.atlas.clone(), start, z.p, z.gamma, segments)
}

/// Concatenation of `z` over `[s,t]` and `y` over `[t,u]`, rejected unless the endpoint probes agree.
pub fn concat(z: &ManifoldRoughPath, y: &ManifoldRoughPath) -> Result<ManifoldRoughPath> {
    if !Arc::ptr_eq(&z.atlas, &y.atlas) && serde_json::to_string(&*z.atlas).ok() != serde_json::to_string(&*y.atlas).ok() {
        return Err(Error::Invalid("concatenated paths must share an atlas".into()));
    }
    if !same_time(z.t1(), y.t0()) {
        return Err(Error::Interval(format!("first path ends at {}, second starts at {}", z.t1(), y.t0())));
    }
    let r = endpoint_residual(&z.atlas, z.segments.last().unwrap(), &y.start)?;
    if r > CONSISTENCY_TOL {
        return Err(Error::Validation(format!("endpoint inconsistency: worst probe residual {r:.3e}")));
    }
    let mut segments = z.segments.clone();
    segments.extend(y.segments.iter().cloned());
    Ok(ManifoldRoughPath { atlas: z.atlas.clone(), start: z.start.clone(), p: z.p.max(y.p), gamma: z.gamma.min(y.gamma), segments })
}

/// `d_p` over the merged grid, with stretches where both paths are trivial collapsed.
/// The exponent is `max(p, level)`, so carried levels above `⌊p⌋` are compared in a metric that sees them.
pub fn d_p_sparse(x: &ClassicalRoughPath, y: &ClassicalRoughPath) -> Result<f64> {
    let grid = crate::lift::merge_grids(x.grid(), y.grid());
    let (xr, yr) = (x.refine_to(&grid)?, y.refine_to(&grid)?);
    let trivial = |t: &TruncatedTensor| t.coeffs()[1..].iter().all(|c| *c == 0.0);
    let mut keep = vec![grid[0]];
    for k in 0..grid.len() - 1 {
        if !(trivial(&xr.increments()[k]) && trivial(&yr.increments()[k])) || k + 1 == grid.len() - 1 {
            if !same_time(*keep.last().unwrap(), grid[k]) {
                keep.push(grid[k]);
            }
            keep.push(grid[k + 1]);
        }
    }
    keep.dedup_by(|a, b| same_time(*a, *b));
    if keep.len() < 2 {
        return Ok(0.0);
    }
    let p = x.p().max(y.p()).max(x.level() as f64);
    d_p_with(&xr.coarsen_to(&keep)?, &yr.coarsen_to(&keep)?, p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBoundReport {
    pub worst_ratio: f64,
    pub pairs: usize,
    pub form_norm: f64,
}

/// `‖Z(α)^i_{s,t}‖ ≤ (‖α‖ω(s,t))^{i/p}/(β·Γ(i/p+1))` on grid pairs of every segment (at most 64 points each).
pub fn check_control_bound(z: &ManifoldRoughPath, alpha: &dyn ManifoldForm) -> Result<ControlBoundReport> {
    let p = z.p;
    let beta = beta_const(p);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    let mut form_norm: f64 = 0.0;
    for s in &z.segments {
        let zp = &s.roughpath;
        let grid = zp.grid();
        let keep: Vec<f64> = if grid.len() > 64 {
            let mut g: Vec<f64> = (0..64).map(|k| grid[k * (grid.len() - 1) / 63]).collect();
            g.dedup();
            g
        } else {
            grid.to_vec()
        };
        let xs = zp.coarsen_to(&keep)?;
        let rep = alpha.chart_rep(&z.atlas, s.chart)?;
        let fg = (z.gamma - 1.0).clamp(0.5, 2.0);
        let norm = lip_norm_estimate(&LipJet::from_form(rep.as_ref(), &zp.trace(), fg)?)?;
        form_norm = form_norm.max(norm);
        let y = rough_integrate(rep.as_ref(), zp)?.coarsen_to(&keep)?;
        let ctrl = xs.control();
        for i in 0..keep.len() {
            let row = ctrl.omega_row(i, f64::INFINITY);
            for j in i + 1..keep.len() {
                let inc = y.increment(i, j);
                for g in 1..=inc.level() {
                    let lhs = inc.norm(g)?;
                    let rhs = (norm * row[j - i]).powf(g as f64 / p) / (beta * gamma(g as f64 / p + 1.0));
                    if lhs > 1e-13 {
                        worst = worst.max(lhs / rhs.max(1e-300));
                    }
                }
                pairs += 1;
            }
        }
    }
    Ok(ControlBoundReport { worst_ratio: worst, pairs, form_norm })
}

/// Result of [`whitney_embed`]: `g: M → R^n` and forms `β_i` on `R^n` with `g*β_i = α_i`.
pub struct WhitneyEmbedding {
    pub g: Arc<dyn SmoothMap>,
    pub betas: Vec<Arc<dyn OneForm>>,
    /// `(form, chart)` for each coordinate block.
    pub blocks: Vec<(usize, usize)>,
    pub n: usize,
    pub flags: bool,
}

#[derive(Clone)]
struct WhitneyMap {
    charts: Vec<Arc<Chart>>,
    pou: PartitionOfUnity,
    blocks: Vec<(usize, usize)>,
    inner: f64,
    outer: f64,
    flags: bool,
    ambient: usize,
}

impl WhitneyMap {
    fn block_len(&self, c: usize) -> usize {
        self.charts[c].dim() + 1 + usize::from(self.flags)
    }
}

impl GenericMap for WhitneyMap {
    fn dim_in(&self) -> usize {
        self.ambient
    }
    fn dim_out(&self) -> usize {
        self.blocks.iter().map(|b| self.block_len(b.1)).sum()
    }
    fn apply<S: Scalar>(&self, p: &[S]) -> Vec<S> {
        let mut out = Vec::new();
        for &(_, c) in &self.blocks {
            let chart = &self.charts[c];
            let pv: Vec<f64> = p.iter().map(|v| v.value()).collect();
            let (f, u) = if chart.in_domain(&pv) {
                let u = chart.forward(p);
                if u.iter().any(|v| !(v.value().abs() < self.outer)) {
                    (S::cst(0.0), vec![S::cst(0.0); chart.dim()])
                } else {
                    (crate::calculus::box_cutoff(&u, self.inner, self.outer), u)
                }
            } else {
                (S::cst(0.0), vec![S::cst(0.0); chart.dim()])
            };
            out.push(f);
            out.extend(u.into_iter().map(|v| v * f));
            if self.flags {
                out.push(self.pou.value(c, p));
            }
        }
        out
    }
}

/// `β_i(y)(dy) = Σ_c ψ(y_f)·ρ_c·rep_{i,c}(y_φ/y_f)(dy_φ)`; derivatives by central differences.
struct WhitneyForm {
    map: WhitneyMap,
    form: usize,
    reps: Vec<(usize, usize, Arc<dyn OneForm>)>,
    e: usize,
}

impl WhitneyForm {
    fn value_at(&self, y: &[f64]) -> Vec<f64> {
        let n = self.map.dim_out();
        let mut v = vec![0.0; self.e * n];
        let mut off = 0;
        for (b, &(form, c)) in self.map.blocks.iter().enumerate() {
            let d = self.map.charts[c].dim();
            let len = self.map.block_len(c);
            if form == self.form {
                let yf = y[off];
                let psi = if yf <= 0.25 { 0.0 } else { smooth_step((0.5 - yf) / 0.25) };
                if psi > 0.0 {
                    let u: Vec<f64> = y[off + 1..off + 1 + d].iter().map(|a| a / yf).collect();
                    let rho = if self.map.flags { y[off + 1 + d] } else { self.map.pou.value(c, &self.map.charts[c].inverse(&u)) };
                    if rho != 0.0 {
                        let rep = &self.reps.iter().find(|r| r.0 == b).unwrap().2;
                        let a = rep.value(&u);
                        for r in 0..self.e {
                            for j in 0..d {
                                v[r * n + off + 1 + j] += psi * rho * a[r * d + j];
                            }
                        }
                    }
                }
            }
            off += len;
        }
        v
    }
}

impl OneForm for WhitneyForm {
    fn point_dim(&self) -> usize {
        self.map.dim_out()
    }
    fn input_dim(&self) -> usize {
        self.map.dim_out()
    }
    fn output_dim(&self) -> usize {
        self.e
    }
    fn value(&self, y: &[f64]) -> Vec<f64> {
        self.value_at(y)
    }
    fn jet(&self, y: &[f64]) -> FormJet {
        let n = y.len();
        let value = self.value_at(y);
        let mut deriv = vec![0.0; self.e * n * n];
        let h = 1e-6;
        for i in 0..n {
            let (mut yp, mut ym) = (y.to_vec(), y.to_vec());
            yp[i] += h;
            ym[i] -= h;
            let (vp, vm) = (self.value_at(&yp), self.value_at(&ym));
            for a in 0..self.e {
                for j in 0..n {
                    deriv[(a * n + i) * n + j] = (vp[a * n + j] - vm[a * n + j]) / (2.0 * h);
                }
            }
        }
        FormJet { value, deriv }
    }
}

/// One-form embedding: a map `g` into `R^n`, `n = (d+1)·Σk_i` (`(d+2)·Σk_i` with flags), and forms `β_i`
/// with `g*β_i = α_i`, where `k_i` counts the charts meeting the support of `α_i`.
pub fn whitney_embed(forms: &[Arc<dyn ManifoldForm>], atlas: &Atlas, flags: bool) -> Result<WhitneyEmbedding> {
    let pou = crate::atlas::partition_of_unity(atlas)?;
    let samples = atlas.samples();
    let mut blocks = Vec::new();
    let mut reps = Vec::new();
    for (i, alpha) in forms.iter().enumerate() {
        let mut covered = vec![false; samples.len()];
        for c in 0..atlas.charts.len() {
            let rep = alpha.chart_rep(atlas, c)?;
            let mut used = false;
            for (s, p) in samples.iter().enumerate() {
                let Some(u) = atlas.chart_coords(c, p) else { continue };
                if pou.outside_support(c, p) {
                    continue;
                }
                if rep.value(&u).iter().any(|v| *v != 0.0) {
                    used = true;
                    covered[s] = true;
                }
            }
            if used {
                reps.push((i, blocks.len(), rep));
                blocks.push((i, c));
            }
        }
        for (s, p) in samples.iter().enumerate() {
            if covered[s] || atlas.best_chart(p).is_some_and(|b| b.1 < 1.0 - atlas.delta) {
                continue;
            }
            return Err(Error::Domain(format!("form {i} is not compactly supported in the charts near {p:?}")));
        }
    }
    let map = WhitneyMap {
        charts: atlas.charts.clone(),
        pou,
        blocks: blocks.clone(),
        inner: 1.0 - atlas.delta / 2.0,
        outer: 1.0 - atlas.delta / 4.0,
        flags,
        ambient: atlas.ambient_dim(),
    };
    let n = map.dim_out();
    let betas = (0..forms.len())
        .map(|i| {
            let r = reps.iter().filter(|r| r.0 == i).map(|r| (r.1, 0, r.2.clone())).collect();
            Arc::new(WhitneyForm { map: map.clone(), form: i, reps: r, e: forms[i].output_dim() }) as Arc<dyn OneForm>
        })
        .collect();
    Ok(WhitneyEmbedding { g: auto(map), betas, blocks, n, flags })
}

/// Largest `|g*β_i - α_i|` over chart representations at `n` samples.
pub fn verify_whitney(emb: &WhitneyEmbedding, forms: &[Arc<dyn ManifoldForm>], atlas: &Atlas, n: usize) -> Result<f64> {
    let pts: Vec<Vec<f64>> = atlas.manifold.sample(n);
    let mut worst: f64 = 0.0;
    for (i, alpha) in forms.iter().enumerate() {
        for p in &pts {
            let (k, _) = atlas.best_chart(p).ok_or_else(|| Error::Domain("sample outside the atlas".into()))?;
            let u = atlas.charts[k].forward(p);
            let inv = auto(ChartMap { chart: atlas.charts[k].clone(), inverse: true });
            let gk = Compose { outer: emb.g.clone(), inner: inv };
            let gj = gk.jet(&u);
            let b = emb.betas[i].value(&gj.value);
            let (e, m, d) = (alpha.output_dim(), emb.n, u.len());
            let a = alpha.chart_rep(atlas, k)?.value(&u);
            for r in 0..e {
                for j in 0..d {
                    let pulled: f64 = (0..m).map(|l| b[r * m + l] * gj.jac[l * d + j]).sum();
                    worst = worst.max((pulled - a[r * d + j]).abs());
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{circle, sphere, vector_space, AmbientForm, ManifoldKind};
    use crate::calculus::{IdentityForm, Polynomial};
    use crate::expr::ExprMap;
    use crate::lift::{d_p, signature, SampledPath};
    use crate::lip::{BoxCutoff, Region};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lpath() -> ClassicalRoughPath {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap()
    }

    fn plane() -> Arc<Atlas> {
        Arc::new(vector_space(Region::new(vec![-2.0, -2.0], vec![2.0, 2.0]), 0.5, 0.25).unwrap())
    }

    fn form(vars: &[&str], exprs: &[&str], e: usize, d: usize) -> Arc<dyn OneForm> {
        Arc::new(MapForm::new(auto(ExprMap::from_strs(vars, exprs).unwrap()), e, d))
    }

    fn great_circle(n: usize, len: f64, tilt: f64) -> ClassicalRoughPath {
        let pts = (0..=n)
            .map(|k| {
                let t = len * k as f64 / n as f64;
                vec![t.cos(), t.sin() * tilt.cos(), t.sin() * tilt.sin()]
            })
            .collect();
        signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap()
    }

    #[test]
    fn l_path_round_trip_is_exact() {
        let a = plane();
        let x = lpath();
        let z = from_classical(&x, None, a).unwrap();
        let back = to_classical(&z).unwrap();
        assert!(d_p(&back, &x).unwrap() < 1e-12);
        assert_eq!(back.start(), x.start());
    }

    #[test]
    fn constant_path_is_one_segment() {
        let x = ClassicalRoughPath::constant(vec![0.3, -0.2], 2, 0.0, 1.0).unwrap().with_p(1.0).unwrap();
        let z = from_classical(&x, None, plane()).unwrap();
        assert_eq!(z.segments.len(), 1);
        let s = support(&z);
        assert!(s.iter().all(|p| NormKind::Max.dist(p, &[0.3, -0.2]) < 1e-15));
    }

    #[test]
    fn evaluate_matches_rough_integral() {
        let pts: Vec<Vec<f64>> = (0..=200).map(|k| {
            let t = k as f64 / 200.0;
            vec![1.5 * t - 0.7, (3.0 * t).sin()]
        }).collect();
        let x = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap();
        let z = from_classical(&x, None, plane()).unwrap();
        assert!(z.segments.len() > 1);
        let alpha = form(&["x", "y"], &["cos(x*y)", "x^2", "y", "1"], 2, 2);
        let direct = rough_integrate(alpha.as_ref(), &x).unwrap();
        let via = evaluate(&z, &AmbientForm(alpha)).unwrap();
        assert!(d_p(&direct, &via).unwrap() < 1e-9);
    }

    #[test]
    fn zero_form_gives_zero_path() {
        let z = from_classical(&lpath(), None, plane()).unwrap();
        let y = evaluate(&z, &AmbientForm(form(&["x", "y"], &["0", "0"], 1, 2))).unwrap();
        assert!(y.total().coeffs()[1..].iter().all(|c| *c == 0.0));
    }

    #[test]
    fn circle_angle_integral_is_two_pi() {
        let c = Arc::new(circle().unwrap());
        let n = 4000;
        let pts = (0..=n).map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            vec![t.cos(), t.sin()]
        }).collect();
        let x = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap();
        let (z, rep) = localise(&x, c, 2.0).unwrap();
        assert_eq!(rep.halvings, 0);
        let dtheta = AmbientForm(form(&["x", "y"], &["-y/(x^2+y^2)", "x/(x^2+y^2)"], 1, 2));
        let v = evaluate(&z, &dtheta).unwrap().total().grade(1)[0];
        assert!((v - 2.0 * std::f64::consts::PI).abs() < 1e-5, "{v}");
    }

    #[test]
    fn sphere_localisation_invariants() {
        let s = Arc::new(sphere().unwrap());
        let x = great_circle(1000, 1.5, 0.4);
        let (z, rep) = localise(&x, s.clone(), 2.0).unwrap();
        assert_eq!(rep.halvings, 0);
        let t0 = rep.t0;
        assert_eq!(rep.n_formula, (1.0 / t0 - 1e-9).ceil() as usize);
        assert_eq!(z.segments.len(), rep.n_formula);
        z.check_supports().unwrap();
        assert!(rep.consistency.unwrap() <= CONSISTENCY_TOL);
        for p in support(&z) {
            assert!((p.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn slow_path_needs_one_segment() {
        let s = Arc::new(sphere().unwrap());
        let x = great_circle(10, 1e-4, 0.0);
        let (z, rep) = localise(&x, s, 2.0).unwrap();
        assert_eq!(rep.rule, "whole");
        assert_eq!(z.segments.len(), 1);
    }

    #[test]
    fn concat_restrict_round_trip_and_associativity() {
        let s = Arc::new(sphere().unwrap());
        let (z, _) = localise(&great_circle(600, 1.2, 0.9), s.clone(), 2.0).unwrap();
        let a = restrict_manifold(&z, 0.0, 0.37).unwrap();
        let b = restrict_manifold(&z, 0.37, 0.71).unwrap();
        let c = restrict_manifold(&z, 0.71, 1.0).unwrap();
        let probe = ProbeForm::new(&s, z.segments[0].chart, ProbeKind::Twisted);
        let whole = evaluate(&z, &probe).unwrap();
        let left = concat(&concat(&a, &b).unwrap(), &c).unwrap();
        let right = concat(&a, &concat(&b, &c).unwrap()).unwrap();
        let el = evaluate(&left, &probe).unwrap();
        let er = evaluate(&right, &probe).unwrap();
        assert_eq!(el, er);
        assert!(d_p(&el, &whole).unwrap() < 1e-10);
    }

    #[test]
    fn perturbed_start_is_rejected() {
        let s = Arc::new(sphere().unwrap());
        let (z, _) = localise(&great_circle(300, 1.0, 0.2), s.clone(), 2.0).unwrap();
        let a = restrict_manifold(&z, 0.0, 0.5).unwrap();
        let mut b = restrict_manifold(&z, 0.5, 1.0).unwrap();
        let q = b.start.clone();
        let bumped = [q[0] + 1e-4, q[1], q[2]];
        let n = bumped.iter().map(|v| v * v).sum::<f64>().sqrt();
        b.start = bumped.iter().map(|v| v / n).collect();
        assert!(matches!(concat(&a, &b), Err(Error::Validation(_))));
    }

    #[test]
    fn union_and_agreement_probes() {
        let a = plane();
        let (z, _) = localise(&lpath(), a.clone(), 2.0).unwrap();
        let bump = |lo: Vec<f64>, hi: Vec<f64>| -> Arc<dyn OneForm> {
            Arc::new(crate::calculus::ScaledForm { f: auto(BoxCutoff { region: Region::new(lo, hi), margin: 0.1 }), form: Arc::new(IdentityForm(2)) })
        };
        let u = bump(vec![-1.5, 0.3], vec![-0.5, 1.5]);
        let v = bump(vec![0.2, -1.8], vec![1.5, -0.4]);
        let uv: Arc<dyn OneForm> = Arc::new(crate::calculus::SumForm(vec![u.clone(), v.clone()]));
        for f in [u, v.clone(), uv] {
            let y = evaluate(&z, &AmbientForm(f)).unwrap();
            assert!(y.total().coeffs()[1..].iter().all(|c| c.abs() < 1e-12));
        }
        let base = form(&["x", "y"], &["y", "x*x"], 1, 2);
        let far = Arc::new(crate::calculus::ScaledForm { f: auto(BoxCutoff { region: Region::new(vec![0.2, -1.8], vec![1.5, -0.4]), margin: 0.1 }), form: form(&["x", "y"], &["3", "1"], 1, 2) });
        let changed: Arc<dyn OneForm> = Arc::new(crate::calculus::SumForm(vec![base.clone(), far]));
        let e1 = evaluate(&z, &AmbientForm(base)).unwrap();
        let e2 = evaluate(&z, &AmbientForm(changed)).unwrap();
        assert!(d_p(&e1, &e2).unwrap() < 1e-8);
    }

    #[test]
    fn pushforward_functoriality() {
        let a = plane();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = auto(Polynomial::random(2, 2, 2, 0.5, &mut rng));
        let h = auto(Polynomial::random(2, 2, 2, 0.5, &mut rng));
        let hg: Arc<dyn SmoothMap> = Arc::new(Compose { outer: h.clone(), inner: g.clone() });
        let gap = |n: usize| {
            let pts: Vec<Vec<f64>> = (0..=n)
                .map(|k| {
                    let t = k as f64 / n as f64;
                    vec![t - 0.5, 0.4 * (5.0 * t).cos()]
                })
                .collect();
            let x = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap();
            let z = from_classical(&x, None, a.clone()).unwrap();
            let lhs = pushforward(&z, hg.clone()).unwrap();
            let gz = pushforward(&z, g.clone()).unwrap();
            let rhs = rough_integrate(&ExactForm(h.clone()), &gz).unwrap().with_start(h.eval(gz.start())).unwrap();
            assert!(NormKind::Max.dist(lhs.start(), rhs.start()) < 1e-14);
            let id = pushforward(&z, auto(crate::calculus::IdentityMap(2))).unwrap();
            assert!(d_p(&id, &to_classical(&z).unwrap()).unwrap() < 1e-12);
            d_p(&lhs, &rhs).unwrap()
        };
        let (coarse, fine) = (gap(60), gap(240));
        assert!(fine < 1e-8, "{fine}");
        assert!(coarse / fine > 16.0, "{coarse} {fine}");
        assert!(pullback_bound(&a, g, 2.5).unwrap().is_finite());
    }

    #[test]
    fn control_bound_holds() {
        let s = Arc::new(sphere().unwrap());
        let (z, _) = localise(&great_circle(400, 1.0, 0.3), s.clone(), 2.0).unwrap();
        let rep = check_control_bound(&z, &ProbeForm::new(&s, z.segments[0].chart, ProbeKind::Twisted)).unwrap();
        assert!(rep.worst_ratio <= 1.0, "{rep:?}");
    }

    #[test]
    fn whitney_single_chart_and_sphere() {
        let pts: Vec<Vec<f64>> = (0..=200).map(|k| vec![-0.6 + 0.006 * k as f64]).collect();
        let one = Atlas::new(
            ManifoldKind::Custom { points: pts },
            vec![crate::atlas::ChartSpec::Translation { center: vec![0.0], scale: 1.0 }],
            3.0,
            0.25,
            NormKind::Max,
        )
        .unwrap();
        let f: Arc<dyn ManifoldForm> = Arc::new(AmbientForm(form(&["x"], &["cos(x)"], 1, 1)));
        let emb = whitney_embed(&[f.clone()], &one, false).unwrap();
        assert_eq!(emb.n, 2);
        assert!(verify_whitney(&emb, &[f], &one, 200).unwrap() < 1e-8);

        let s = sphere().unwrap();
        let cut = |lo: Vec<f64>, hi: Vec<f64>, ex: &[&str]| -> Arc<dyn ManifoldForm> {
            Arc::new(AmbientForm(Arc::new(crate::calculus::ScaledForm {
                f: auto(BoxCutoff { region: Region::new(lo, hi), margin: 0.3 }),
                form: form(&["x", "y", "z"], ex, 1, 3),
            })))
        };
        let forms = vec![
            cut(vec![0.3, -0.3, 0.5], vec![0.6, 0.3, 1.0], &["y", "z", "x"]),
            cut(vec![0.1, -0.1, 0.3], vec![0.8, 0.5, 1.0], &["1", "x*y", "0"]),
        ];
        for flags in [false, true] {
            let emb = whitney_embed(&forms, &s, flags).unwrap();
            let per = s.dim() + 1 + usize::from(flags);
            assert_eq!(emb.n, per * emb.blocks.len());
            assert!(verify_whitney(&emb, &forms, &s, 1000).unwrap() < 1e-8);
        }
    }

    #[test]
    fn manifold_path_json_round_trip() {
        let z = from_classical(&lpath(), None, plane()).unwrap();
        let s = serde_json::to_string(&z).unwrap();
        assert!(s.contains("\"segments\"") && s.contains("\"start_coords\""));
        let back: ManifoldRoughPath = serde_json::from_str(&s).unwrap();
        assert_eq!(back.segments, z.segments);
    }
}
