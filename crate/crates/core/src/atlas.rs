//! Lip-γ manifolds presented by finite chart atlases.
//!
//! A chart owns a coordinate map `φ` defined on an ambient domain, with
//! `U = {p : |φ(p)| < 1}` in the atlas norm. Points of built-in manifolds are
//! embedded coordinates. All coordinate maps and their Jacobians are written
//! over [`Scalar`], so compositions get exact jets.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{auto, box_cutoff, Compose, GenericMap, OneForm, Pullback, Scalar, SmoothMap};
use crate::error::{Error, Result};
use crate::expr::{Expr, ExprMap, ExprSpec};
use crate::lip::{composition_constant, lip_norm_estimate, LipJet, NormKind, Region};

/// Default number of manifold samples used for cover and transition checks.
pub const DEFAULT_SAMPLES: usize = 10_000;

/// Radius beyond which the compactly supported extension of a chart vanishes.
pub const CHART_SUPPORT: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChartSpec {
    /// `φ(p) = (p - center)/scale`.
    Translation { center: Vec<f64>, scale: f64 },
    /// Central projection of the unit sphere onto the face `sign·p[axis] = 1`, divided by `scale`.
    Gnomonic { axis: usize, sign: f64, scale: f64 },
    /// Angle on the unit circle measured from `center`, divided by `width`.
    Angle { center: f64, width: f64 },
    Product { left: Box<ChartSpec>, right: Box<ChartSpec> },
    /// Coordinate map and inverse in the expression language.
    Custom { forward: ExprSpec, inverse: ExprSpec },
}

#[derive(Clone, Debug)]
struct CustomChart {
    fwd: ExprMap,
    inv: ExprMap,
    fwd_jac: Vec<Expr>,
    inv_jac: Vec<Expr>,
}

#[derive(Clone, Debug)]
enum Kind {
    Translation { center: Vec<f64>, scale: f64 },
    Gnomonic { axis: usize, others: [usize; 2], sign: f64, scale: f64 },
    Angle { center: f64, width: f64 },
    Product(Box<Chart>, Box<Chart>),
    Custom(Box<CustomChart>),
}

#[derive(Clone, Debug)]
pub struct Chart {
    pub id: usize,
    pub spec: ChartSpec,
    kind: Kind,
}

impl Chart {
    pub fn new(id: usize, spec: ChartSpec) -> Result<Self> {
        let kind = match &spec {
            ChartSpec::Translation { center, scale } => {
                if center.is_empty() || !(*scale > 0.0) {
                    return Err(Error::Invalid("translation chart needs a center and a positive scale".into()));
                }
                Kind::Translation { center: center.clone(), scale: *scale }
            }
            ChartSpec::Gnomonic { axis, sign, scale } => {
                if *axis > 2 || sign.abs() != 1.0 || !(*scale > 0.0) {
                    return Err(Error::Invalid("gnomonic chart needs axis < 3, sign ±1, scale > 0".into()));
                }
                let others: Vec<usize> = (0..3).filter(|a| a != axis).collect();
                Kind::Gnomonic { axis: *axis, others: [others[0], others[1]], sign: *sign, scale: *scale }
            }
            ChartSpec::Angle { center, width } => {
                if !(*width > 0.0 && *width < std::f64::consts::FRAC_PI_2) {
                    return Err(Error::Invalid("angle chart width must lie in (0, π/2)".into()));
                }
                Kind::Angle { center: *center, width: *width }
            }
            ChartSpec::Product { left, right } => {
                Kind::Product(Box::new(Chart::new(0, (**left).clone())?), Box::new(Chart::new(0, (**right).clone())?))
            }
            ChartSpec::Custom { forward, inverse } => {
                let fwd = ExprMap::new(forward.clone())?;
                let inv = ExprMap::new(inverse.clone())?;
                if inv.dim_in() != fwd.dim_out() || inv.dim_out() != fwd.dim_in() {
                    return Err(Error::Shape("custom chart inverse must swap the forward dimensions".into()));
                }
                let (fwd_jac, inv_jac) = (fwd.jacobian(), inv.jacobian());
                Kind::Custom(Box::new(CustomChart { fwd, inv, fwd_jac, inv_jac }))
            }
        };
        Ok(Chart { id, spec, kind })
    }

    pub fn ambient_dim(&self) -> usize {
        match &self.kind {
            Kind::Translation { center, .. } => center.len(),
            Kind::Gnomonic { .. } => 3,
            Kind::Angle { .. } => 2,
            Kind::Product(a, b) => a.ambient_dim() + b.ambient_dim(),
            Kind::Custom(c) => c.fwd.dim_in(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            Kind::Translation { center, .. } => center.len(),
            Kind::Gnomonic { .. } => 2,
            Kind::Angle { .. } => 1,
            Kind::Product(a, b) => a.dim() + b.dim(),
            Kind::Custom(c) => c.fwd.dim_out(),
        }
    }

    /// Whether the coordinate formula is valid at the ambient point.
    pub fn in_domain(&self, p: &[f64]) -> bool {
        match &self.kind {
            Kind::Translation { .. } => true,
            Kind::Gnomonic { axis, sign, .. } => sign * p[*axis] > 1e-12,
            Kind::Angle { center, .. } => center.cos() * p[0] + center.sin() * p[1] > 1e-12,
            Kind::Product(a, b) => {
                let m = a.ambient_dim();
                a.in_domain(&p[..m]) && b.in_domain(&p[m..])
            }
            Kind::Custom(c) => {
                let u: Vec<f64> = c.fwd.apply(p);
                if u.iter().any(|v| !v.is_finite()) {
                    return false;
                }
                let q: Vec<f64> = c.inv.apply(&u);
                q.iter().zip(p).all(|(a, b)| (a - b).abs() <= 1e-8 * (1.0 + b.abs()))
            }
        }
    }

    pub fn forward<S: Scalar>(&self, p: &[S]) -> Vec<S> {
        match &self.kind {
            Kind::Translation { center, scale } => p.iter().zip(center).map(|(x, c)| (*x - *c) / *scale).collect(),
            Kind::Gnomonic { axis, others, sign, scale } => {
                let den = p[*axis] * (sign * scale);
                others.iter().map(|&o| p[o] / den).collect()
            }
            Kind::Angle { center, width } => {
                let (c, s) = (center.cos(), center.sin());
                let a = p[0] * c + p[1] * s;
                let b = p[1] * c - p[0] * s;
                vec![(b / a).atan() / *width]
            }
            Kind::Product(a, b) => {
                let m = a.ambient_dim();
                let mut out = a.forward(&p[..m]);
                out.extend(b.forward(&p[m..]));
                out
            }
            Kind::Custom(c) => c.fwd.apply(p),
        }
    }

    pub fn inverse<S: Scalar>(&self, u: &[S]) -> Vec<S> {
        match &self.kind {
            Kind::Translation { center, scale } => u.iter().zip(center).map(|(x, c)| *x * *scale + *c).collect(),
            Kind::Gnomonic { axis, others, sign, scale } => {
                let q0 = u[0] * *scale;
                let q1 = u[1] * *scale;
                let n = (q0 * q0 + q1 * q1 + 1.0).sqrt();
                let mut out = vec![S::cst(0.0); 3];
                out[others[0]] = q0 / n;
                out[others[1]] = q1 / n;
                out[*axis] = n.recip() * *sign;
                out
            }
            Kind::Angle { center, width } => {
                let th = u[0] * *width + *center;
                vec![th.cos(), th.sin()]
            }
            Kind::Product(a, b) => {
                let m = a.dim();
                let mut out = a.inverse(&u[..m]);
                out.extend(b.inverse(&u[m..]));
                out
            }
            Kind::Custom(c) => c.inv.apply(u),
        }
    }

    /// Jacobian of `φ`, row-major `d × D`.
    pub fn forward_jacobian<S: Scalar>(&self, p: &[S]) -> Vec<S> {
        let (d, big) = (self.dim(), self.ambient_dim());
        let zero = S::cst(0.0);
        match &self.kind {
            Kind::Translation { scale, .. } => {
                let mut j = vec![zero; d * d];
                (0..d).for_each(|i| j[i * d + i] = S::cst(1.0 / scale));
                j
            }
            Kind::Gnomonic { axis, others, sign, scale } => {
                let den = p[*axis] * (sign * scale);
                let mut j = vec![zero; 6];
                for (a, &o) in others.iter().enumerate() {
                    j[a * 3 + o] = den.recip();
                    j[a * 3 + axis] = -(p[o] / (den * p[*axis]));
                }
                j
            }
            Kind::Angle { center, width } => {
                let (c, s) = (center.cos(), center.sin());
                let a = p[0] * c + p[1] * s;
                let b = p[1] * c - p[0] * s;
                let den = (a * a + b * b) * *width;
                vec![(a * (-s) - b * c) / den, (a * c - b * s) / den]
            }
            Kind::Product(l, r) => {
                let (m, dl) = (l.ambient_dim(), l.dim());
                let (jl, jr) = (l.forward_jacobian(&p[..m]), r.forward_jacobian(&p[m..]));
                let mut j = vec![zero; d * big];
                for a in 0..dl {
                    for i in 0..m {
                        j[a * big + i] = jl[a * m + i];
                    }
                }
                for a in 0..d - dl {
                    for i in 0..big - m {
                        j[(dl + a) * big + m + i] = jr[a * (big - m) + i];
                    }
                }
                j
            }
            Kind::Custom(c) => c.fwd_jac.iter().map(|e| e.eval(p)).collect(),
        }
    }

    /// Jacobian of `φ^{-1}`, row-major `D × d`.
    pub fn inverse_jacobian<S: Scalar>(&self, u: &[S]) -> Vec<S> {
        let (d, big) = (self.dim(), self.ambient_dim());
        let zero = S::cst(0.0);
        match &self.kind {
            Kind::Translation { scale, .. } => {
                let mut j = vec![zero; d * d];
                (0..d).for_each(|i| j[i * d + i] = S::cst(*scale));
                j
            }
            Kind::Gnomonic { others, scale, .. } => {
                let s = *scale;
                let p = self.inverse(u);
                let n2 = (u[0] * u[0] + u[1] * u[1]) * (s * s) + 1.0;
                let n = n2.sqrt();
                let mut j = vec![zero; 6];
                for m in 0..3 {
                    for a in 0..2 {
                        let mut v = -(p[m] * u[a] * (s * s)) / n2;
                        if others[a] == m {
                            v = v + n.recip() * s;
                        }
                        j[m * 2 + a] = v;
                    }
                }
                j
            }
            Kind::Angle { center, width } => {
                let th = u[0] * *width + *center;
                vec![-th.sin() * *width, th.cos() * *width]
            }
            Kind::Product(l, r) => {
                let (m, dl) = (l.ambient_dim(), l.dim());
                let (jl, jr) = (l.inverse_jacobian(&u[..dl]), r.inverse_jacobian(&u[dl..]));
                let mut j = vec![zero; big * d];
                for a in 0..m {
                    for i in 0..dl {
                        j[a * d + i] = jl[a * dl + i];
                    }
                }
                for a in 0..big - m {
                    for i in 0..d - dl {
                        j[(m + a) * d + dl + i] = jr[a * (d - dl) + i];
                    }
                }
                j
            }
            Kind::Custom(c) => c.inv_jac.iter().map(|e| e.eval(u)).collect(),
        }
    }

    /// Coordinates of an ambient point inside the formula domain.
    pub fn coords(&self, p: &[f64]) -> Option<Vec<f64>> {
        self.in_domain(p).then(|| self.forward(p)).filter(|u| u.iter().all(|v| v.is_finite()))
    }

    /// Compactly supported global extension `χ(φ)·φ`, zero off the domain.
    pub fn global<S: Scalar>(&self, p: &[S]) -> Vec<S> {
        let pv: Vec<f64> = p.iter().map(|v| v.value()).collect();
        if !self.in_domain(&pv) {
            return vec![S::cst(0.0); self.dim()];
        }
        let u = self.forward(p);
        let chi = box_cutoff(&u, 1.0, CHART_SUPPORT);
        u.into_iter().map(|v| v * chi).collect()
    }

    /// `(center, scales)` when `φ(p) = (p - center)/scales` coordinatewise.
    pub fn affine(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.kind {
            Kind::Translation { center, scale } => Some((center.clone(), vec![*scale; center.len()])),
            Kind::Product(a, b) => {
                let (ca, sa) = a.affine()?;
                let (cb, sb) = b.affine()?;
                Some(([ca, cb].concat(), [sa, sb].concat()))
            }
            _ => None,
        }
    }

    /// Bumped coordinates `χ(φ(p))·φ(p)` with `χ = 1` on `|u| ≤ inner`, `0` on `|u| ≥ outer`.
    pub fn bump_coords<S: Scalar>(&self, p: &[S], inner: f64, outer: f64) -> Vec<S> {
        let pv: Vec<f64> = p.iter().map(|v| v.value()).collect();
        if !self.in_domain(&pv) {
            return vec![S::cst(0.0); self.dim()];
        }
        let u = self.forward(p);
        if u.iter().any(|v| !(v.value().abs() < outer)) {
            return vec![S::cst(0.0); self.dim()];
        }
        let chi = box_cutoff(&u, inner, outer);
        u.into_iter().map(|v| v * chi).collect()
    }

    /// Left and right factors of a product chart.
    pub fn factors(&self) -> Option<(&Chart, &Chart)> {
        match &self.kind {
            Kind::Product(a, b) => Some((a, b)),
            _ => None,
        }
    }
}

/// `φ` or `φ^{-1}` of a chart as a generic map.
#[derive(Clone)]
pub struct ChartMap {
    pub chart: Arc<Chart>,
    pub inverse: bool,
}

impl GenericMap for ChartMap {
    fn dim_in(&self) -> usize {
        if self.inverse {
            self.chart.dim()
        } else {
            self.chart.ambient_dim()
        }
    }
    fn dim_out(&self) -> usize {
        if self.inverse {
            self.chart.ambient_dim()
        } else {
            self.chart.dim()
        }
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        if self.inverse {
            self.chart.inverse(x)
        } else {
            self.chart.forward(x)
        }
    }
}

/// Transition `to ∘ from^{-1}` between chart coordinates.
#[derive(Clone)]
pub struct Transition {
    pub to: Arc<Chart>,
    pub from: Arc<Chart>,
}

impl GenericMap for Transition {
    fn dim_in(&self) -> usize {
        self.from.dim()
    }
    fn dim_out(&self) -> usize {
        self.to.dim()
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        self.to.forward(&self.from.inverse(x))
    }
}

/// Which manifold an atlas describes; determines the point sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldKind {
    VectorSpace { region: Region },
    Sphere,
    Circle,
    Torus,
    Product { left: Box<ManifoldKind>, right: Box<ManifoldKind> },
    Custom { points: Vec<Vec<f64>> },
}

impl ManifoldKind {
    /// About `n` deterministic sample points.
    pub fn sample(&self, n: usize) -> Vec<Vec<f64>> {
        use std::f64::consts::PI;
        match self {
            ManifoldKind::VectorSpace { region } => {
                let d = region.lo.len();
                let m = ((n as f64).powf(1.0 / d as f64).ceil() as usize).max(2);
                let mut out = vec![vec![]];
                for a in 0..d {
                    let mut next = Vec::with_capacity(out.len() * m);
                    for p in &out {
                        for k in 0..m {
                            let mut q = p.clone();
                            q.push(region.lo[a] + (region.hi[a] - region.lo[a]) * k as f64 / (m - 1) as f64);
                            next.push(q);
                        }
                    }
                    out = next;
                }
                out
            }
            ManifoldKind::Sphere => {
                let golden = PI * (3.0 - 5f64.sqrt());
                (0..n)
                    .map(|k| {
                        let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                        let r = (1.0 - z * z).sqrt();
                        let th = golden * k as f64;
                        vec![r * th.cos(), r * th.sin(), z]
                    })
                    .collect()
            }
            ManifoldKind::Circle => (0..n)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / n as f64;
                    vec![th.cos(), th.sin()]
                })
                .collect(),
            ManifoldKind::Torus => product_points(&ManifoldKind::Circle, &ManifoldKind::Circle, n),
            ManifoldKind::Product { left, right } => product_points(left, right, n),
            ManifoldKind::Custom { points } => points.clone(),
        }
    }
}

fn product_points(a: &ManifoldKind, b: &ManifoldKind, n: usize) -> Vec<Vec<f64>> {
    let m = ((n as f64).sqrt().ceil() as usize).max(2);
    let (pa, pb) = (a.sample(m), b.sample(m));
    pa.iter().flat_map(|x| pb.iter().map(move |y| x.iter().chain(y).copied().collect())).collect()
}

/// A finite Lip-γ₀ atlas with constants `(δ, L, R)`.
#[derive(Clone, Debug)]
pub struct Atlas {
    pub manifold: ManifoldKind,
    pub gamma0: f64,
    pub delta: f64,
    pub l: f64,
    pub r: f64,
    pub norm: NormKind,
    pub charts: Vec<Arc<Chart>>,
    /// Chart counts `(left, right)` of a product atlas; chart `i·right + j` is `(φ_i, ψ_j)`.
    pub factors: Option<(usize, usize)>,
    samples: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ChartEntry {
    id: usize,
    #[serde(flatten)]
    spec: ChartSpec,
}

#[derive(Serialize, Deserialize)]
struct AtlasRepr {
    manifold: ManifoldKind,
    gamma0: f64,
    delta: f64,
    #[serde(rename = "L")]
    l: f64,
    #[serde(rename = "R")]
    r: f64,
    norm: NormKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factors: Option<(usize, usize)>,
    charts: Vec<ChartEntry>,
}

impl Serialize for Atlas {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        AtlasRepr {
            manifold: self.manifold.clone(),
            gamma0: self.gamma0,
            delta: self.delta,
            l: self.l,
            r: self.r,
            norm: self.norm,
            factors: self.factors,
            charts: self.charts.iter().map(|c| ChartEntry { id: c.id, spec: c.spec.clone() }).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Atlas {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = AtlasRepr::deserialize(d)?;
        let charts = r
            .charts
            .into_iter()
            .map(|e| Chart::new(e.id, e.spec).map(Arc::new))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        let mut atlas = Atlas::assemble(r.manifold, charts, r.gamma0, r.delta, r.norm).map_err(serde::de::Error::custom)?;
        atlas.l = r.l;
        atlas.r = r.r;
        atlas.factors = r.factors;
        Ok(atlas)
    }
}

/// Outcome of the sampled cover and transition checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasReport {
    pub samples: usize,
    /// Largest over samples of the smallest coordinate norm among charts.
    pub cover_margin: f64,
    pub transitions_checked: usize,
    pub l_measured: f64,
    pub r_measured: f64,
}

fn stride<T: Clone>(v: &[T], max: usize) -> Vec<T> {
    if v.len() <= max {
        return v.to_vec();
    }
    (0..max).map(|k| v[k * v.len() / max].clone()).collect()
}

impl Atlas {
    fn assemble(manifold: ManifoldKind, charts: Vec<Arc<Chart>>, gamma0: f64, delta: f64, norm: NormKind) -> Result<Self> {
        if charts.is_empty() {
            return Err(Error::Invalid("atlas needs at least one chart".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Invalid(format!("δ = {delta} must lie in (0, 1)")));
        }
        let (big, d) = (charts[0].ambient_dim(), charts[0].dim());
        if charts.iter().any(|c| c.ambient_dim() != big || c.dim() != d) {
            return Err(Error::Shape("all charts must share dimensions".into()));
        }
        let samples = manifold.sample(DEFAULT_SAMPLES);
        if samples.iter().any(|p| p.len() != big) {
            return Err(Error::Shape(format!("manifold samples must have {big} coordinates")));
        }
        Ok(Atlas { manifold, gamma0, delta, l: f64::NAN, r: f64::NAN, norm, charts, factors: None, samples })
    }

    /// Build, validate and measure an atlas.
    pub fn new(manifold: ManifoldKind, charts: Vec<ChartSpec>, gamma0: f64, delta: f64, norm: NormKind) -> Result<Self> {
        let charts = charts.into_iter().enumerate().map(|(i, s)| Chart::new(i, s).map(Arc::new)).collect::<Result<Vec<_>>>()?;
        let mut atlas = Self::assemble(manifold, charts, gamma0, delta, norm)?;
        let rep = atlas.validate()?;
        atlas.l = rep.l_measured;
        atlas.r = rep.r_measured;
        Ok(atlas)
    }

    pub fn ambient_dim(&self) -> usize {
        self.charts[0].ambient_dim()
    }

    pub fn dim(&self) -> usize {
        self.charts[0].dim()
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    /// Coordinates of `p` in chart `k` if `p ∈ U_k`.
    pub fn chart_coords(&self, k: usize, p: &[f64]) -> Option<Vec<f64>> {
        self.charts[k].coords(p).filter(|u| self.norm.vec_norm(u) < 1.0)
    }

    /// Chart whose coordinates of `p` have the smallest norm.
    pub fn best_chart(&self, p: &[f64]) -> Option<(usize, f64)> {
        self.charts
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.coords(p).map(|u| (k, self.norm.vec_norm(&u))))
            .fold(None, |best: Option<(usize, f64)>, c| match best {
                Some(b) if b.1 <= c.1 => Some(b),
                _ => Some(c),
            })
    }

    /// Whether `p` lies on the manifold inside a shrunk chart: the chart round trip returns `p`.
    pub fn contains(&self, p: &[f64]) -> bool {
        self.best_chart(p).is_some_and(|(k, m)| {
            m < 1.0 - self.delta && NormKind::Max.dist(&self.charts[k].inverse(&self.charts[k].forward(p)), p) <= 1e-9 * (1.0 + NormKind::Max.vec_norm(p))
        })
    }

    /// `sup |∂φ_a/∂p_b|` over charts and samples in `U_k`: the operator norm of `dφ` from ambient ℓ1 to coordinates.
    pub fn dphi_norm(&self) -> f64 {
        (0..self.charts.len())
            .into_par_iter()
            .map(|k| {
                self.samples
                    .iter()
                    .filter(|p| self.chart_coords(k, p).is_some())
                    .map(|p| self.charts[k].forward_jacobian(p).iter().fold(0.0f64, |a, v| a.max(v.abs())))
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Coordinates in chart `k` of the samples lying in `U_k ∩ U_j`.
    pub fn overlap_coords(&self, k: usize, j: usize) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .filter(|p| self.chart_coords(j, p).is_some())
            .filter_map(|p| self.chart_coords(k, p))
            .collect()
    }

    fn pair_budget(&self) -> usize {
        if self.charts.len() > 16 {
            32
        } else {
            96
        }
    }

    fn transition_norm(&self, to: &Arc<Chart>, from: &Arc<Chart>, pts: &[Vec<f64>], gamma: f64) -> Result<f64> {
        let t = auto(Transition { to: to.clone(), from: from.clone() });
        let jet = LipJet::from_map(t.as_ref(), pts, gamma.min(3.0))?.with_norm(self.norm);
        lip_norm_estimate(&jet)
    }

    /// Sampled cover check and transition measurement.
    pub fn validate(&self) -> Result<AtlasReport> {
        let shrunk = 1.0 - self.delta;
        let margins: Vec<f64> = self.samples.par_iter().map(|p| self.best_chart(p).map_or(f64::INFINITY, |b| b.1)).collect();
        let (worst, cover_margin) = margins.iter().enumerate().fold((0, 0.0), |a, (i, &m)| if m > a.1 { (i, m) } else { a });
        if cover_margin >= shrunk {
            return Err(Error::Validation(format!(
                "shrunk charts do not cover the sample point {:?} (best coordinate norm {cover_margin})",
                self.samples[worst]
            )));
        }
        let n = self.charts.len();
        let budget = self.pair_budget();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let norms = pairs
            .par_iter()
            .map(|&(i, j)| {
                let pts = stride(&self.overlap_coords(j, i), budget);
                if pts.is_empty() {
                    return Ok(None);
                }
                self.transition_norm(&self.charts[i], &self.charts[j], &pts, self.gamma0).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let checked = norms.iter().flatten().count();
        let l = norms.into_iter().flatten().fold(0.0, f64::max);
        if !l.is_finite() {
            return Err(Error::Validation("a transition map is not finite on its sampled overlap".into()));
        }
        let r = self
            .samples
            .par_iter()
            .map(|p| self.charts.iter().map(|c| self.norm.vec_norm(&c.global(p))).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max);
        Ok(AtlasReport { samples: self.samples.len(), cover_margin, transitions_checked: checked, l_measured: l, r_measured: r })
    }
}

/// Translation charts on a grid of the given step covering `region`.
pub fn vector_space(region: Region, step: f64, delta: f64) -> Result<Atlas> {
    let d = region.lo.len();
    if d == 0 || region.hi.len() != d || region.lo.iter().zip(&region.hi).any(|(l, h)| !(h > l)) {
        return Err(Error::Invalid("vector-space atlas needs a bounded non-empty region".into()));
    }
    if !(step > 0.0) || step / 2.0 > 1.0 - delta {
        return Err(Error::Invalid(format!("grid step {step} leaves gaps for δ = {delta}")));
    }
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let m = ((region.hi[a] - region.lo[a]) / step).ceil() as usize;
            (0..=m).map(|k| (region.lo[a] + k as f64 * step).min(region.hi[a])).collect()
        })
        .collect();
    let mut centers = vec![vec![]];
    for ax in &axes {
        centers = centers.iter().flat_map(|c: &Vec<f64>| ax.iter().map(move |v| [c.clone(), vec![*v]].concat())).collect();
    }
    let charts = centers.into_iter().map(|center| ChartSpec::Translation { center, scale: 1.0 }).collect();
    Atlas::new(ManifoldKind::VectorSpace { region }, charts, 3.0, delta, NormKind::Max)
}

/// The unit sphere in `R^3` with six overlapping face charts.
pub fn sphere() -> Result<Atlas> {
    let charts = (0..3)
        .flat_map(|axis| [1.0, -1.0].map(|sign| ChartSpec::Gnomonic { axis, sign, scale: 1.3 }))
        .collect();
    Atlas::new(ManifoldKind::Sphere, charts, 2.5, 0.2, NormKind::Max)
}

/// The unit circle in `R^2` with four angle charts.
pub fn circle() -> Result<Atlas> {
    let charts = (0..4)
        .map(|k| ChartSpec::Angle { center: k as f64 * std::f64::consts::FRAC_PI_2, width: 1.2 })
        .collect();
    Atlas::new(ManifoldKind::Circle, charts, 3.0, 0.2, NormKind::Max)
}

pub fn torus() -> Result<Atlas> {
    let c = circle()?;
    let mut t = product_atlas(&c, &c)?;
    t.manifold = ManifoldKind::Torus;
    Ok(t)
}

/// Serializable atlas recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AtlasKind {
    VectorSpace {
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default = "half")]
        step: f64,
        #[serde(default = "quarter")]
        delta: f64,
    },
    Sphere,
    Circle,
    Torus,
    Custom {
        charts: Vec<ChartSpec>,
        points: Vec<Vec<f64>>,
        #[serde(default = "three")]
        gamma0: f64,
        delta: f64,
    },
}

fn half() -> f64 {
    0.5
}
fn quarter() -> f64 {
    0.25
}
fn three() -> f64 {
    3.0
}

pub fn build_atlas(kind: &AtlasKind) -> Result<Atlas> {
    match kind {
        AtlasKind::VectorSpace { lo, hi, step, delta } => vector_space(Region::new(lo.clone(), hi.clone()), *step, *delta),
        AtlasKind::Sphere => sphere(),
        AtlasKind::Circle => circle(),
        AtlasKind::Torus => torus(),
        AtlasKind::Custom { charts, points, gamma0, delta } => {
            Atlas::new(ManifoldKind::Custom { points: points.clone() }, charts.clone(), *gamma0, *delta, NormKind::Max)
        }
    }
}

/// Product atlas with charts `(φ_i, ψ_j)` in the max of the factor norms.
pub fn product_atlas(a: &Atlas, b: &Atlas) -> Result<Atlas> {
    if a.norm != NormKind::Max || b.norm != NormKind::Max {
        return Err(Error::Unsupported("product atlases need max-norm factors".into()));
    }
    let mut charts = Vec::with_capacity(a.charts.len() * b.charts.len());
    for ca in &a.charts {
        for cb in &b.charts {
            let spec = ChartSpec::Product { left: Box::new(ca.spec.clone()), right: Box::new(cb.spec.clone()) };
            charts.push(Arc::new(Chart::new(charts.len(), spec)?));
        }
    }
    let manifold = ManifoldKind::Product { left: Box::new(a.manifold.clone()), right: Box::new(b.manifold.clone()) };
    let mut out = Atlas::assemble(manifold, charts, a.gamma0.min(b.gamma0), a.delta.min(b.delta), NormKind::Max)?;
    out.l = a.l.max(b.l);
    out.r = a.r.max(b.r);
    out.factors = Some((a.charts.len(), b.charts.len()));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductReport {
    pub factor_error: f64,
    pub pairs_checked: usize,
    pub l_sampled: f64,
    pub cover_ok: bool,
}

/// Sampled re-validation: componentwise transitions, Lip bound on random chart pairs, cover.
pub fn verify_product(e: &Atlas, a: &Atlas, b: &Atlas, pairs: usize, seed: u64) -> Result<ProductReport> {
    let (na, nb) = e.factors.ok_or_else(|| Error::Invalid("not a product atlas".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let da = a.dim();
    let mut factor_error: f64 = 0.0;
    let mut l_sampled: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < pairs && attempts < 50 * pairs {
        attempts += 1;
        let (k, kk) = (rng.gen_range(0..na * nb), rng.gen_range(0..na * nb));
        let pts = stride(&e.overlap_coords(kk, k), 64);
        if pts.is_empty() {
            continue;
        }
        let (i, j, ii, jj) = (k / nb, k % nb, kk / nb, kk % nb);
        let ta = Transition { to: a.charts[i].clone(), from: a.charts[ii].clone() };
        let tb = Transition { to: b.charts[j].clone(), from: b.charts[jj].clone() };
        let te = Transition { to: e.charts[k].clone(), from: e.charts[kk].clone() };
        for u in &pts {
            let full: Vec<f64> = te.apply(u);
            let mut parts: Vec<f64> = ta.apply(&u[..da]);
            parts.extend(tb.apply::<f64>(&u[da..]));
            factor_error = factor_error.max(NormKind::Max.dist(&full, &parts));
        }
        l_sampled = l_sampled.max(e.transition_norm(&e.charts[k], &e.charts[kk], &pts, e.gamma0)?);
        checked += 1;
    }
    let cover_ok = e.samples.par_iter().all(|p| e.best_chart(p).is_some_and(|b| b.1 < 1.0 - e.delta));
    Ok(ProductReport { factor_error, pairs_checked: checked, l_sampled, cover_ok })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub constant: f64,
    pub transitions_checked: usize,
    /// Smallest and largest ratio `‖f‖_B / ‖f‖_A` over the probe functions.
    pub c_low: f64,
    pub d_high: f64,
    pub probes: usize,
}

/// Ambient probe `p ↦ sin(k·p + φ)`.
#[derive(Clone)]
struct WaveProbe {
    k: Vec<f64>,
    phase: f64,
}

impl GenericMap for WaveProbe {
    fn dim_in(&self) -> usize {
        self.k.len()
    }
    fn dim_out(&self) -> usize {
        1
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut acc = S::cst(self.phase);
        for (xi, ki) in x.iter().zip(&self.k) {
            acc = acc + *xi * *ki;
        }
        vec![acc.sin()]
    }
}

/// Manifold Lip-γ norm of an ambient function: max over charts of the coordinate norm on `U_k`.
pub fn manifold_lip_norm(atlas: &Atlas, f: &Arc<dyn SmoothMap>, gamma: f64) -> Result<f64> {
    let budget = atlas.pair_budget();
    (0..atlas.charts.len())
        .into_par_iter()
        .map(|k| {
            let pts = stride(&atlas.overlap_coords(k, k), budget);
            if pts.is_empty() {
                return Ok(0.0);
            }
            let inv = auto(ChartMap { chart: atlas.charts[k].clone(), inverse: true });
            let g = Compose { outer: f.clone(), inner: inv };
            let jet = LipJet::from_map(&g, &pts, gamma.min(3.0))?.with_norm(atlas.norm);
            lip_norm_estimate(&jet)
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}

/// Cross-transition constant and probe-norm band between two atlases on the same point set.
pub fn atlas_equivalence_check(a: &Atlas, b: &Atlas, gamma: f64) -> Result<EquivalenceReport> {
    if a.ambient_dim() != b.ambient_dim() || a.dim() != b.dim() {
        return Err(Error::Shape("atlases describe different spaces".into()));
    }
    if let Some(p) = a.samples.iter().find(|p| b.best_chart(p).is_none_or(|c| c.1 >= 1.0)) {
        return Err(Error::Domain(format!("point {p:?} is outside every chart of the second atlas")));
    }
    let budget = a.pair_budget().min(b.pair_budget());
    let pairs: Vec<(usize, usize)> = (0..a.charts.len()).flat_map(|i| (0..b.charts.len()).map(move |j| (i, j))).collect();
    let norms = pairs
        .par_iter()
        .map(|&(i, j)| {
            let both: Vec<&Vec<f64>> =
                a.samples.iter().filter(|p| a.chart_coords(i, p).is_some() && b.chart_coords(j, p).is_some()).collect();
            if both.is_empty() {
                return Ok((0, 0.0));
            }
            let ub: Vec<Vec<f64>> = stride(&both, budget).iter().map(|p| b.charts[j].forward(p)).collect();
            let ua: Vec<Vec<f64>> = stride(&both, budget).iter().map(|p| a.charts[i].forward(p)).collect();
            let n1 = a.transition_norm(&a.charts[i], &b.charts[j], &ub, gamma)?;
            let n2 = a.transition_norm(&b.charts[j], &a.charts[i], &ua, gamma)?;
            Ok((2, n1.max(n2)))
        })
        .collect::<Result<Vec<_>>>()?;
    let constant = norms.iter().map(|x| x.1).fold(0.0, f64::max);
    let checked = norms.iter().map(|x| x.0).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut ratios = Vec::new();
    for _ in 0..6 {
        let k: Vec<f64> = (0..a.ambient_dim()).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let f = auto(WaveProbe { k, phase: rng.gen_range(0.0..3.0) });
        let na = manifold_lip_norm(a, &f, gamma)?;
        let nb = manifold_lip_norm(b, &f, gamma)?;
        if na > 0.0 {
            ratios.push(nb / na);
        }
    }
    Ok(EquivalenceReport {
        constant,
        transitions_checked: checked,
        c_low: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        d_high: ratios.iter().copied().fold(0.0, f64::max),
        probes: ratios.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallPassingReport {
    pub checked: usize,
    pub violations: usize,
}

/// For `m ∈ U∩V` with `r`-balls inside both images, the `ψ`-ball of radius `0.99 r/L` lands in the `φ`-ball of radius `r`.
pub fn ball_passing_check(atlas: &Atlas, trials: usize, seed: u64) -> Result<BallPassingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = atlas.charts.len();
    let (mut checked, mut violations) = (0, 0);
    let mut attempts = 0;
    while checked < trials && attempts < 100 * trials {
        attempts += 1;
        let p = &atlas.samples[rng.gen_range(0..atlas.samples.len())];
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let (Some(ui), Some(uj)) = (atlas.chart_coords(i, p), atlas.chart_coords(j, p)) else { continue };
        let r = 0.9 * (1.0 - atlas.norm.vec_norm(&ui)).min(1.0 - atlas.norm.vec_norm(&uj));
        let u = 0.99 * r / atlas.l.max(1.0);
        let t = Transition { to: atlas.charts[i].clone(), from: atlas.charts[j].clone() };
        for _ in 0..16 {
            let v: Vec<f64> = (0..atlas.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vn = atlas.norm.vec_norm(&v).max(1e-12);
            let q: Vec<f64> = uj.iter().zip(&v).map(|(a, b)| a + u * b / vn).collect();
            let amb = atlas.charts[j].inverse(&q);
            let ok = atlas.charts[i].in_domain(&amb) && atlas.norm.dist(&t.apply(&q), &ui) < r;
            if !ok {
                violations += 1;
            }
        }
        checked += 1;
    }
    Ok(BallPassingReport { checked, violations })
}

/// Partition of unity `f_i = c_i / Σ_j c_j` from box bumps `c_i` equal to 1 on `U_i^δ`.
#[derive(Clone)]
pub struct PartitionOfUnity {
    charts: Vec<Arc<Chart>>,
    inner: f64,
    outer: f64,
}

pub fn partition_of_unity(atlas: &Atlas) -> Result<PartitionOfUnity> {
    if atlas.norm != NormKind::Max {
        return Err(Error::Unsupported("partitions of unity use max-norm box bumps".into()));
    }
    Ok(PartitionOfUnity { charts: atlas.charts.clone(), inner: 1.0 - atlas.delta, outer: 1.0 - atlas.delta / 2.0 })
}

impl PartitionOfUnity {
    pub fn len(&self) -> usize {
        self.charts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charts.is_empty()
    }

    fn bump<S: Scalar>(&self, i: usize, p: &[S]) -> S {
        let pv: Vec<f64> = p.iter().map(|v| v.value()).collect();
        if !self.charts[i].in_domain(&pv) {
            return S::cst(0.0);
        }
        let u = self.charts[i].forward(p);
        if u.iter().any(|v| v.value().abs() >= self.outer) {
            return S::cst(0.0);
        }
        box_cutoff(&u, self.inner, self.outer)
    }

    /// `f_i(p)` for one chart.
    pub fn value<S: Scalar>(&self, i: usize, p: &[S]) -> S {
        let ci = self.bump(i, p);
        if ci.value() == 0.0 {
            return S::cst(0.0);
        }
        let mut total = S::cst(0.0);
        for j in 0..self.charts.len() {
            total = total + self.bump(j, p);
        }
        ci / total
    }

    pub fn values(&self, p: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = (0..self.charts.len()).map(|i| self.bump(i, p)).collect();
        let s: f64 = c.iter().sum();
        if s == 0.0 {
            return c;
        }
        c.into_iter().map(|v| v / s).collect()
    }

    /// `f_i ∘ φ_k^{-1}` on chart `k` coordinates.
    pub fn in_chart(&self, i: usize, k: usize) -> Arc<dyn SmoothMap> {
        auto(PouInChart { pou: self.clone(), i, k })
    }

    /// Whether `f_i` vanishes at `p` because `p` lies outside the support of the bump.
    pub fn outside_support(&self, i: usize, p: &[f64]) -> bool {
        self.bump::<f64>(i, p) == 0.0
    }
}

#[derive(Clone)]
struct PouInChart {
    pou: PartitionOfUnity,
    i: usize,
    k: usize,
}

impl GenericMap for PouInChart {
    fn dim_in(&self) -> usize {
        self.pou.charts[self.k].dim()
    }
    fn dim_out(&self) -> usize {
        1
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        vec![self.pou.value(self.i, &self.pou.charts[self.k].inverse(x))]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PouReport {
    pub samples: usize,
    pub max_sum_error: f64,
    pub min_value: f64,
    /// Smallest over samples of `max_i f_i`.
    pub min_active: f64,
    /// Samples where some `f_i > 0` outside `U_i`.
    pub support_violations: usize,
    /// Largest coordinate Lip-γ₀ norm of any `f_i` on any chart.
    pub lip_norm: f64,
}

/// Sampled partition-of-unity checks on `n` manifold points.
pub fn verify_partition(atlas: &Atlas, pou: &PartitionOfUnity, n: usize) -> Result<PouReport> {
    let pts = atlas.manifold.sample(n);
    let rows: Vec<(f64, f64, f64, usize)> = pts
        .par_iter()
        .map(|p| {
            let v = pou.values(p);
            let s: f64 = v.iter().sum();
            let outside = v.iter().enumerate().filter(|(i, f)| **f > 0.0 && atlas.chart_coords(*i, p).is_none()).count();
            (
                (s - 1.0).abs(),
                v.iter().copied().fold(f64::INFINITY, f64::min),
                v.iter().copied().fold(0.0, f64::max),
                outside,
            )
        })
        .collect();
    let n_ch = atlas.charts.len();
    let lip = (0..n_ch * n_ch)
        .into_par_iter()
        .map(|ik| {
            let (i, k) = (ik / n_ch, ik % n_ch);
            let pts = stride(&atlas.overlap_coords(k, i), 64);
            if pts.is_empty() {
                return Ok(0.0);
            }
            let jet = LipJet::from_map(pou.in_chart(i, k).as_ref(), &pts, atlas.gamma0.min(3.0))?.with_norm(atlas.norm);
            lip_norm_estimate(&jet)
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    Ok(PouReport {
        samples: pts.len(),
        max_sum_error: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        min_value: rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
        min_active: rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min),
        support_violations: rows.iter().map(|r| r.3).sum(),
        lip_norm: lip,
    })
}

/// A one-form on a manifold, known through its coordinate representations.
pub trait ManifoldForm: Send + Sync {
    fn output_dim(&self) -> usize;
    /// The form in chart `k` coordinates.
    fn chart_rep(&self, atlas: &Atlas, k: usize) -> Result<Arc<dyn OneForm>>;
    /// Whether the form is known to vanish near the chart-`k` polyline `trace`.
    fn vanishes_along(&self, _atlas: &Atlas, _k: usize, _trace: &[Vec<f64>]) -> bool {
        false
    }
}

/// Restriction of a one-form on the ambient space.
#[derive(Clone)]
pub struct AmbientForm(pub Arc<dyn OneForm>);

impl ManifoldForm for AmbientForm {
    fn output_dim(&self) -> usize {
        self.0.output_dim()
    }
    fn chart_rep(&self, atlas: &Atlas, k: usize) -> Result<Arc<dyn OneForm>> {
        if self.0.point_dim() != atlas.ambient_dim() {
            return Err(Error::Shape(format!("ambient form lives on R^{}, atlas on R^{}", self.0.point_dim(), atlas.ambient_dim())));
        }
        let inv = auto(ChartMap { chart: atlas.charts[k].clone(), inverse: true });
        Ok(Arc::new(Pullback { form: self.0.clone(), map: inv }))
    }
}

/// Explicit per-chart representations.
#[derive(Clone)]
pub struct PerChartForm(pub Vec<Arc<dyn OneForm>>);

impl ManifoldForm for PerChartForm {
    fn output_dim(&self) -> usize {
        self.0[0].output_dim()
    }
    fn chart_rep(&self, _atlas: &Atlas, k: usize) -> Result<Arc<dyn OneForm>> {
        self.0.get(k).cloned().ok_or_else(|| Error::Domain(format!("no representation on chart {k}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackReport {
    pub norm_h: f64,
    pub norm_alpha: f64,
    pub norm_pullback: f64,
    pub constant: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `h*α` chartwise as `α(h∘φ^{-1})·D(h∘φ^{-1})`, with the norm inequality measured on samples.
pub fn pullback_one_form(
    atlas: &Atlas,
    h: Arc<dyn SmoothMap>,
    alpha: Arc<dyn OneForm>,
    gamma: f64,
) -> Result<(PerChartForm, PullbackReport)> {
    if h.dim_in() != atlas.ambient_dim() || alpha.point_dim() != h.dim_out() || alpha.input_dim() != h.dim_out() {
        return Err(Error::Shape("h must map the ambient space into the form's base".into()));
    }
    if !(gamma > 1.0 && gamma <= 3.0) {
        return Err(Error::Invalid(format!("pullback norms are measured for γ ∈ (1, 3], got {gamma}")));
    }
    let reps: Vec<Arc<dyn OneForm>> = atlas
        .charts
        .iter()
        .map(|c| {
            let inner = Arc::new(Compose { outer: h.clone(), inner: auto(ChartMap { chart: c.clone(), inverse: true }) });
            Arc::new(Pullback { form: alpha.clone(), map: inner }) as Arc<dyn OneForm>
        })
        .collect();
    let images: Vec<Vec<f64>> = stride(&atlas.samples, 400).iter().map(|p| h.eval(p)).collect();
    if images.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("h leaves the finite range on sampled points".into()));
    }
    let a_jet = LipJet::from_form(alpha.as_ref(), &images, gamma - 1.0)?.with_norm(atlas.norm);
    let norm_alpha = lip_norm_estimate(&a_jet)?;
    if !norm_alpha.is_finite() {
        return Err(Error::Domain("α is not finite on h(M)".into()));
    }
    let norm_h = manifold_lip_norm(atlas, &h, gamma)?;
    let budget = atlas.pair_budget();
    let norm_pullback = (0..atlas.charts.len())
        .into_par_iter()
        .map(|k| {
            let pts = stride(&atlas.overlap_coords(k, k), budget);
            if pts.is_empty() {
                return Ok(0.0);
            }
            lip_norm_estimate(&LipJet::from_form(reps[k].as_ref(), &pts, gamma - 1.0)?.with_norm(atlas.norm))
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    let constant = atlas.dim() as f64 * composition_constant(gamma);
    let bound = constant * norm_alpha * norm_h * norm_h.powi(gamma.floor() as i32).max(1.0);
    let report = PullbackReport { norm_h, norm_alpha, norm_pullback, constant, bound, holds: norm_pullback <= bound };
    Ok((PerChartForm(reps), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{IdentityMap, MapForm, Polynomial};

    #[test]
    fn chart_jacobians_match_jets() {
        let specs = [
            ChartSpec::Gnomonic { axis: 1, sign: -1.0, scale: 1.3 },
            ChartSpec::Angle { center: 2.0, width: 1.2 },
            ChartSpec::Translation { center: vec![0.5, -1.0], scale: 2.0 },
            ChartSpec::Product {
                left: Box::new(ChartSpec::Angle { center: 0.0, width: 1.0 }),
                right: Box::new(ChartSpec::Gnomonic { axis: 2, sign: 1.0, scale: 1.3 }),
            },
        ];
        for spec in specs {
            let c = Arc::new(Chart::new(0, spec).unwrap());
            let u: Vec<f64> = (0..c.dim()).map(|i| 0.3 - 0.2 * i as f64).collect();
            let p = c.inverse(&u);
            let back = c.forward(&p);
            assert!(NormKind::Max.dist(&back, &u) < 1e-14);
            let fj = auto(ChartMap { chart: c.clone(), inverse: false }).jet(&p).jac;
            let ij = auto(ChartMap { chart: c.clone(), inverse: true }).jet(&u).jac;
            assert!(NormKind::Max.dist(&fj, &c.forward_jacobian(&p)) < 1e-12);
            assert!(NormKind::Max.dist(&ij, &c.inverse_jacobian(&u)) < 1e-12);
        }
    }

    #[test]
    fn vector_space_transitions_are_translations() {
        let a = vector_space(Region::new(vec![-2.0], vec![2.0]), 0.5, 0.25).unwrap();
        assert_eq!(a.charts.len(), 9);
        assert!((a.l - 1.0).abs() < 1e-12, "L = {}", a.l);
        for p in a.samples() {
            for k in 0..a.charts.len() {
                if let Some(u) = a.chart_coords(k, p) {
                    assert!(a.norm.vec_norm(&u) < 1.0);
                }
            }
        }
    }

    #[test]
    fn sphere_cover_and_antipodes() {
        let s = sphere().unwrap();
        let rep = s.validate().unwrap();
        assert!(rep.cover_margin < 1.0 - s.delta);
        assert!(s.l.is_finite() && s.l >= 1.0);
        for p in s.samples().iter().step_by(97) {
            let q: Vec<f64> = p.iter().map(|v| -v).collect();
            for k in 0..6 {
                assert!(!(s.chart_coords(k, p).is_some() && s.chart_coords(k, &q).is_some()));
            }
        }
    }

    #[test]
    fn custom_atlas_rejects_gaps() {
        let spec = ChartSpec::Custom {
            forward: ExprSpec { vars: vec!["x".into()], exprs: vec!["x/0.5".into()] },
            inverse: ExprSpec { vars: vec!["u".into()], exprs: vec!["0.5*u".into()] },
        };
        let pts: Vec<Vec<f64>> = (0..=100).map(|k| vec![-1.0 + 0.02 * k as f64]).collect();
        let err = Atlas::new(ManifoldKind::Custom { points: pts }, vec![spec], 3.0, 0.2, NormKind::Max).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn product_constants_and_factorisation() {
        let a = vector_space(Region::new(vec![-1.0], vec![1.0]), 0.5, 0.25).unwrap();
        let b = circle().unwrap();
        let e = product_atlas(&a, &b).unwrap();
        assert_eq!(e.delta, a.delta.min(b.delta));
        assert_eq!(e.l, a.l.max(b.l));
        assert_eq!(e.r, a.r.max(b.r));
        let rep = verify_product(&e, &a, &b, 8, 1).unwrap();
        assert!(rep.factor_error < 1e-12);
        assert!(rep.l_sampled <= e.l * (1.0 + 1e-9), "{} > {}", rep.l_sampled, e.l);
        assert!(rep.cover_ok);
    }

    #[test]
    fn self_equivalence_is_l() {
        let c = circle().unwrap();
        let rep = atlas_equivalence_check(&c, &c, c.gamma0).unwrap();
        assert!((rep.constant - c.l).abs() <= 1e-12 * c.l);
        assert!((rep.c_low - 1.0).abs() < 1e-12 && (rep.d_high - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_and_warped_atlases_are_equivalent() {
        let region = Region::new(vec![-1.0], vec![1.0]);
        let a = vector_space(region.clone(), 0.5, 0.25).unwrap();
        let b = vector_space(Region::new(vec![-1.2], vec![1.0]), 0.5, 0.25).unwrap();
        let rep = atlas_equivalence_check(&a, &b, 2.5).unwrap();
        assert!(rep.constant.is_finite());
        let warp = ChartSpec::Custom {
            forward: ExprSpec { vars: vec!["x".into()], exprs: vec!["(x + 0.1*x^2)/1.6".into()] },
            inverse: ExprSpec { vars: vec!["u".into()], exprs: vec!["(sqrt(1 + 0.4*1.6*u) - 1)/0.2".into()] },
        };
        let w = Atlas::new(ManifoldKind::VectorSpace { region }, vec![warp], 3.0, 0.2, NormKind::Max).unwrap();
        let rep_w = atlas_equivalence_check(&a, &w, 2.5).unwrap();
        assert!(rep_w.constant > rep.constant);
        assert!(rep_w.c_low > 0.0 && rep_w.d_high < f64::INFINITY && rep_w.c_low <= rep_w.d_high);
    }

    #[test]
    fn ball_passing_holds_on_sphere() {
        let s = sphere().unwrap();
        let rep = ball_passing_check(&s, 200, 3).unwrap();
        assert!(rep.checked > 100);
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn partitions_sum_to_one() {
        for atlas in [vector_space(Region::new(vec![-2.0], vec![2.0]), 0.5, 0.25).unwrap(), sphere().unwrap(), circle().unwrap()] {
            let pou = partition_of_unity(&atlas).unwrap();
            let rep = verify_partition(&atlas, &pou, 1000).unwrap();
            assert!(rep.max_sum_error < 1e-10, "{rep:?}");
            assert!(rep.min_value >= 0.0 && rep.min_active > 0.0);
            assert_eq!(rep.support_violations, 0);
            assert!(rep.lip_norm.is_finite());
        }
    }

    #[test]
    fn single_chart_partition_is_one() {
        let pts: Vec<Vec<f64>> = (0..=50).map(|k| vec![-0.5 + 0.02 * k as f64]).collect();
        let a = Atlas::new(
            ManifoldKind::Custom { points: pts.clone() },
            vec![ChartSpec::Translation { center: vec![0.0], scale: 1.0 }],
            3.0,
            0.25,
            NormKind::Max,
        )
        .unwrap();
        let pou = partition_of_unity(&a).unwrap();
        assert!(pts.iter().all(|p| pou.values(p) == vec![1.0]));
    }

    #[test]
    fn circle_pullback_is_angle_form() {
        let c = circle().unwrap();
        let alpha: Arc<dyn OneForm> = Arc::new(MapForm::new(auto(ExprMap::from_strs(&["x", "y"], &["-y", "x"]).unwrap()), 1, 2));
        let (form, rep) = pullback_one_form(&c, auto(IdentityMap(2)), alpha, 2.5).unwrap();
        for k in 0..4 {
            let r = form.chart_rep(&c, k).unwrap();
            for u in [-0.9, -0.3, 0.0, 0.6] {
                assert!((r.value(&[u])[0] - 1.2).abs() < 1e-10);
            }
        }
        assert!(rep.holds);
    }

    #[test]
    fn chart_map_pullback_is_identity() {
        let s = sphere().unwrap();
        let h = auto(ChartMap { chart: s.charts[2].clone(), inverse: false });
        let rep = AmbientForm(Arc::new(crate::calculus::ExactForm(h))).chart_rep(&s, 2).unwrap();
        let v = rep.value(&[0.2, -0.4]);
        assert!(NormKind::Max.dist(&v, &[1.0, 0.0, 0.0, 1.0]) < 1e-12);
    }

    #[test]
    fn pullback_bound_on_random_polynomials() {
        let c = circle().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let h = auto(Polynomial::random(2, 2, 2, 0.7, &mut rng));
            let a = Arc::new(MapForm::new(auto(Polynomial::random(2, 2, 2, 0.7, &mut rng)), 1, 2));
            let (_, rep) = pullback_one_form(&c, h, a, 2.5).unwrap();
            assert!(rep.holds, "{rep:?}");
        }
    }

    #[test]
    fn atlas_json_round_trip() {
        let c = circle().unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"L\"") && s.contains("\"kind\":\"angle\""));
        let back: Atlas = serde_json::from_str(&s).unwrap();
        assert_eq!(back.charts.len(), 4);
        assert_eq!(back.l, c.l);
    }

    #[test]
    fn torus_is_a_product() {
        let t = torus().unwrap();
        assert_eq!(t.charts.len(), 16);
        assert_eq!(t.dim(), 2);
        assert_eq!(t.ambient_dim(), 4);
        let pou = partition_of_unity(&t).unwrap();
        let rep = verify_partition(&t, &pou, 1000).unwrap();
        assert!(rep.max_sum_error < 1e-10);
    }
}
