//! Rough differential equations on manifolds driven through a connection
//! `Γ_{(x,y)}(v) = (v, g(x,y)v)` on `E = N × M`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{build_atlas, product_atlas, Atlas, AtlasKind, Chart, ManifoldForm};
use crate::calculus::{auto, FormJet, GenericMap, LinearCompose, MapForm, OneForm, Scalar, SmoothMap};
use crate::error::{Error, Result};
use crate::expr::{ExprMap, ExprSpec};
use crate::lift::{restrict, ClassicalRoughPath};
use crate::lip::{lip_norm_estimate, LipJet, NormKind};
use crate::mpath::{d_p_sparse, evaluate, Factor, ManifoldRoughPath, ProbeForm, ProbeKind, Segment};
use crate::rde::{response, solve_rde_with, RdeConfig, RdeProblem, SignalField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartPairRep {
    #[serde(rename = "chartN")]
    pub chart_n: usize,
    #[serde(rename = "chartM")]
    pub chart_m: usize,
    /// Variables `(z, ν)`, outputs the `d2×d1` matrix row-major.
    pub expr: ExprSpec,
}

/// Connection input. `ambient` gives `g(x, y)` as a `D_M×D_N` matrix in ambient variables `(x, y)`;
/// `reps` override it on individual chart pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    #[serde(rename = "N")]
    pub n: AtlasKind,
    #[serde(rename = "M")]
    pub m: AtlasKind,
    pub gamma: f64,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambient: Option<ExprSpec>,
    #[serde(default)]
    pub reps: Vec<ChartPairRep>,
}

#[derive(Clone)]
pub struct Connection {
    pub n: Arc<Atlas>,
    pub m: Arc<Atlas>,
    pub e: Arc<Atlas>,
    pub gamma: f64,
    pub c: Option<f64>,
    ambient: Option<ExprMap>,
    reps: BTreeMap<(usize, usize), ExprMap>,
}

/// `g_{φ,ψ}(z, ν) = Dψ(y)·g(x, y)·Dφ^{-1}(z)` with `x = φ^{-1}(z)`, `y = ψ^{-1}(ν)`.
#[derive(Clone)]
struct AmbientRep {
    g: ExprMap,
    phi: Arc<Chart>,
    psi: Arc<Chart>,
}

impl GenericMap for AmbientRep {
    fn dim_in(&self) -> usize {
        self.phi.dim() + self.psi.dim()
    }
    fn dim_out(&self) -> usize {
        self.phi.dim() * self.psi.dim()
    }
    fn apply<S: Scalar>(&self, w: &[S]) -> Vec<S> {
        let (d1, d2) = (self.phi.dim(), self.psi.dim());
        let (big_n, big_m) = (self.phi.ambient_dim(), self.psi.ambient_dim());
        let (z, nu) = w.split_at(d1);
        let mut xy = self.phi.inverse(z);
        let y = self.psi.inverse(nu);
        xy.extend_from_slice(&y);
        let g = self.g.apply(&xy);
        let jpsi = self.psi.forward_jacobian(&y);
        let jphi = self.phi.inverse_jacobian(z);
        let mut gj = vec![S::cst(0.0); big_m * d1];
        for b in 0..big_m {
            for c in 0..big_n {
                let gbc = g[b * big_n + c];
                for j in 0..d1 {
                    gj[b * d1 + j] = gj[b * d1 + j] + gbc * jphi[c * d1 + j];
                }
            }
        }
        let mut out = vec![S::cst(0.0); d2 * d1];
        for a in 0..d2 {
            for b in 0..big_m {
                for j in 0..d1 {
                    out[a * d1 + j] = out[a * d1 + j] + jpsi[a * big_m + b] * gj[b * d1 + j];
                }
            }
        }
        out
    }
}

impl Connection {
    pub fn from_spec(spec: &ConnectionSpec) -> Result<Self> {
        let n = Arc::new(build_atlas(&spec.n)?);
        let m = Arc::new(build_atlas(&spec.m)?);
        Self::new(n, m, spec.gamma, spec.c, spec.ambient.clone(), spec.reps.clone())
    }

    pub fn new(
        n: Arc<Atlas>,
        m: Arc<Atlas>,
        gamma: f64,
        c: Option<f64>,
        ambient: Option<ExprSpec>,
        reps: Vec<ChartPairRep>,
    ) -> Result<Self> {
        if !(gamma > 1.0) {
            return Err(Error::Invalid(format!("connection needs γ > 1, got {gamma}")));
        }
        let e = Arc::new(product_atlas(&n, &m)?);
        let (d1, d2) = (n.dim(), m.dim());
        let ambient = ambient.map(ExprMap::new).transpose()?;
        if let Some(g) = &ambient {
            if g.dim_in() != n.ambient_dim() + m.ambient_dim() || g.dim_out() != n.ambient_dim() * m.ambient_dim() {
                return Err(Error::Shape(format!(
                    "ambient connection must map R^{} to {}×{} matrices",
                    n.ambient_dim() + m.ambient_dim(),
                    m.ambient_dim(),
                    n.ambient_dim()
                )));
            }
        }
        let mut map = BTreeMap::new();
        for r in reps {
            if r.chart_n >= n.charts.len() || r.chart_m >= m.charts.len() {
                return Err(Error::Invalid(format!("chart pair ({}, {}) does not exist", r.chart_n, r.chart_m)));
            }
            let em = ExprMap::new(r.expr)?;
            if em.dim_in() != d1 + d2 || em.dim_out() != d1 * d2 {
                return Err(Error::Shape(format!("chart pair ({}, {}) representation has the wrong shape", r.chart_n, r.chart_m)));
            }
            map.insert((r.chart_n, r.chart_m), em);
        }
        if ambient.is_none() && map.len() != n.charts.len() * m.charts.len() {
            return Err(Error::Invalid("without an ambient connection every chart pair needs a representation".into()));
        }
        Ok(Connection { n, m, e, gamma, c, ambient, reps: map })
    }

    /// Zero connection: `g ≡ 0`.
    pub fn zero(n: Arc<Atlas>, m: Arc<Atlas>, gamma: f64) -> Result<Self> {
        let vars: Vec<String> = (0..n.ambient_dim() + m.ambient_dim()).map(|i| format!("w{i}")).collect();
        let exprs = vec!["0".to_string(); n.ambient_dim() * m.ambient_dim()];
        Self::new(n, m, gamma, None, Some(ExprSpec { vars, exprs }), vec![])
    }

    pub fn d1(&self) -> usize {
        self.n.dim()
    }

    pub fn d2(&self) -> usize {
        self.m.dim()
    }

    pub fn map_rep(&self, k: usize, j: usize) -> Result<Arc<dyn SmoothMap>> {
        if let Some(m) = self.reps.get(&(k, j)) {
            return Ok(auto(m.clone()));
        }
        let g = self.ambient.clone().ok_or_else(|| Error::Invalid(format!("no representation for chart pair ({k}, {j})")))?;
        Ok(auto(AmbientRep { g, phi: self.n.charts[k].clone(), psi: self.m.charts[j].clone() }))
    }

    /// `g_{φ_k,ψ_j}` as a form over `R^{d1+d2}` with values in `L(R^{d1}, R^{d2})`.
    pub fn rep(&self, k: usize, j: usize) -> Result<Arc<dyn OneForm>> {
        Ok(Arc::new(MapForm::new(self.map_rep(k, j)?, self.d2(), self.d1())))
    }

    /// Chart pair of product chart `c`.
    pub fn split(&self, c: usize) -> (usize, usize) {
        let nm = self.m.charts.len();
        (c / nm, c % nm)
    }

    fn pair_samples(&self, c: usize, limit: usize) -> Vec<Vec<f64>> {
        let all: Vec<Vec<f64>> = self.e.samples().iter().filter_map(|p| self.e.chart_coords(c, p)).collect();
        let stride = (all.len() / limit.max(1)).max(1);
        all.into_iter().step_by(stride).take(limit).collect()
    }

    /// Lip norms of the representations and the worst overlap incompatibility.
    pub fn validate(&self) -> Result<ConnectionReport> {
        let pairs = self.e.charts.len();
        let gamma = self.gamma.min(3.0);
        let norms = (0..pairs)
            .into_par_iter()
            .map(|c| {
                let (k, j) = self.split(c);
                let pts = self.pair_samples(c, 40);
                if pts.len() < 2 {
                    return Ok(0.0);
                }
                let jet = LipJet::from_map(self.map_rep(k, j)?.as_ref(), &pts, gamma)?.with_norm(NormKind::Max);
                lip_norm_estimate(&jet)
            })
            .collect::<Result<Vec<f64>>>()?;
        let lip = norms.iter().copied().fold(0.0, f64::max);
        let compat = self.compatibility(200)?;
        let report = ConnectionReport { lip_norm: lip, declared: self.c, compatibility: compat, pairs };
        if let Some(c) = self.c {
            if lip > c {
                return Err(Error::Validation(format!("measured connection norm {lip:.4} exceeds declared C = {c}")));
            }
        }
        if compat > 1e-8 {
            return Err(Error::Validation(format!("chart representations disagree on overlaps by {compat:.3e}")));
        }
        Ok(report)
    }

    /// `max |g' - D(ψ'ψ^{-1}) g D(φφ'^{-1})|` over sampled overlaps of chart pairs.
    pub fn compatibility(&self, n: usize) -> Result<f64> {
        let samples = self.e.samples();
        let stride = (samples.len() / n.max(1)).max(1);
        let (dn, d1, d2) = (self.n.ambient_dim(), self.d1(), self.d2());
        let dm = self.m.ambient_dim();
        let worst = samples
            .par_iter()
            .step_by(stride)
            .map(|p| {
                let inside: Vec<usize> = (0..self.e.charts.len()).filter(|&c| self.e.chart_coords(c, p).is_some()).collect();
                let mut worst: f64 = 0.0;
                let Some(&base) = inside.first() else { return Ok(0.0) };
                let (x, y) = p.split_at(dn);
                let (k, j) = self.split(base);
                let w = self.e.charts[base].forward(p);
                let g = self.map_rep(k, j)?.eval(&w);
                for &other in &inside[1..] {
                    let (k2, j2) = self.split(other);
                    let w2 = self.e.charts[other].forward(p);
                    let g2 = self.map_rep(k2, j2)?.eval(&w2);
                    let a = mat_mul(&self.m.charts[j2].forward_jacobian(y), &self.m.charts[j].inverse_jacobian(&w[d1..]), d2, dm, d2);
                    let b = mat_mul(&self.n.charts[k].forward_jacobian(x), &self.n.charts[k2].inverse_jacobian(&w2[..d1]), d1, dn, d1);
                    let conj = mat_mul(&mat_mul(&a, &g, d2, d2, d1), &b, d2, d1, d1);
                    worst = worst.max(NormKind::Max.dist(&conj, &g2));
                }
                Ok(worst)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(worst.into_iter().fold(0.0, f64::max))
    }
}

fn mat_mul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for l in 0..k {
            let ail = a[i * k + l];
            for j in 0..c {
                out[i * c + j] += ail * b[l * c + j];
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionReport {
    pub lip_norm: f64,
    pub declared: Option<f64>,
    pub compatibility: f64,
    pub pairs: usize,
}

/// `(v, w) ↦ (v, g(z, ν)v)`: the connection in product-chart coordinates, `Γ∘π_*`.
pub struct ConnectionForm {
    pub g: Arc<dyn OneForm>,
    pub d1: usize,
    pub d2: usize,
}

impl OneForm for ConnectionForm {
    fn point_dim(&self) -> usize {
        self.d1 + self.d2
    }
    fn input_dim(&self) -> usize {
        self.d1 + self.d2
    }
    fn output_dim(&self) -> usize {
        self.d1 + self.d2
    }
    fn jet(&self, x: &[f64]) -> FormJet {
        let (d1, n) = (self.d1, self.d1 + self.d2);
        let g = self.g.jet(x);
        let mut value = vec![0.0; n * n];
        let mut deriv = vec![0.0; n * n * n];
        for a in 0..d1 {
            value[a * n + a] = 1.0;
        }
        for a in 0..self.d2 {
            for j in 0..d1 {
                value[(d1 + a) * n + j] = g.value[a * d1 + j];
                for i in 0..n {
                    deriv[((d1 + a) * n + i) * n + j] = g.deriv[(a * n + i) * d1 + j];
                }
            }
        }
        FormJet { value, deriv }
    }
}

/// `ξ_*Γ` for the chart pair `(φ_k, ψ_j)`.
pub fn pushforward_connection(conn: &Connection, k: usize, j: usize) -> Result<Arc<dyn OneForm>> {
    if k >= conn.n.charts.len() || j >= conn.m.charts.len() {
        return Err(Error::Invalid(format!("chart pair ({k}, {j}) does not exist")));
    }
    Ok(Arc::new(ConnectionForm { g: conn.rep(k, j)?, d1: conn.d1(), d2: conn.d2() }))
}

/// `α^Γ = α∘Γ∘π_*`.
pub struct AlphaGamma<'a> {
    pub alpha: &'a dyn ManifoldForm,
    pub conn: &'a Connection,
}

impl ManifoldForm for AlphaGamma<'_> {
    fn output_dim(&self) -> usize {
        self.alpha.output_dim()
    }
    fn chart_rep(&self, atlas: &Atlas, c: usize) -> Result<Arc<dyn OneForm>> {
        let (k, j) = self.conn.split(c);
        Ok(Arc::new(LinearCompose { outer: self.alpha.chart_rep(atlas, c)?, inner: pushforward_connection(self.conn, k, j)? }))
    }
    fn vanishes_along(&self, atlas: &Atlas, c: usize, trace: &[Vec<f64>]) -> bool {
        self.alpha.vanishes_along(atlas, c, trace)
    }
}

pub fn alpha_gamma<'a>(alpha: &'a dyn ManifoldForm, conn: &'a Connection) -> AlphaGamma<'a> {
    AlphaGamma { alpha, conn }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub segments: usize,
    pub splits: usize,
    pub max_response_norm: f64,
    pub sweeps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifoldRdeSolution {
    pub path: ManifoldRoughPath,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub report: SolveReport,
}

impl ManifoldRdeSolution {
    /// Ambient response points at every grid time.
    pub fn response_trace(&self) -> Vec<(f64, Vec<f64>)> {
        let dn = self.x0.len();
        let mut out = Vec::new();
        for (n, s) in self.path.segments.iter().enumerate() {
            let chart = &self.path.atlas.charts[s.chart];
            let skip = usize::from(n > 0);
            for (t, u) in s.roughpath.grid().iter().zip(s.roughpath.trace()).skip(skip) {
                out.push((*t, chart.inverse(&u)[dn..].to_vec()));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct MrdeConfig {
    pub rde: RdeConfig,
    pub max_splits: usize,
}

impl Default for MrdeConfig {
    fn default() -> Self {
        MrdeConfig { rde: RdeConfig { tol: 1e-12, validate: false, ..Default::default() }, max_splits: 8 }
    }
}

pub fn solve_manifold_rde(conn: &Connection, x: &ManifoldRoughPath, y0: &[f64]) -> Result<ManifoldRdeSolution> {
    solve_manifold_rde_with(conn, x, y0, &MrdeConfig::default())
}

/// Chart-hopping solver: on each piece of the localised signal, solve the augmented equation in the
/// chart pair `(φ, ψ)` with `ψ` the best chart at the current response point, halving the piece
/// (up to `max_splits` times) while the coordinate trace leaves `B(0, 1 - δ/2)`.
pub fn solve_manifold_rde_with(
    conn: &Connection,
    x: &ManifoldRoughPath,
    y0: &[f64],
    cfg: &MrdeConfig,
) -> Result<ManifoldRdeSolution> {
    if !Arc::ptr_eq(&x.atlas, &conn.n) && serde_json::to_string(&*x.atlas).ok() != serde_json::to_string(&*conn.n).ok() {
        return Err(Error::Invalid("signal path must live on the connection's signal atlas".into()));
    }
    if y0.len() != conn.m.ambient_dim() {
        return Err(Error::Shape(format!("y0 has {} coordinates, response atlas expects {}", y0.len(), conn.m.ambient_dim())));
    }
    if !conn.m.contains(y0) {
        return Err(Error::Domain(format!("y0 {y0:?} is not on the response manifold inside the shrunk charts")));
    }
    let (d1, d2) = (conn.d1(), conn.d2());
    let nm = conn.m.charts.len();
    let r = 1.0 - conn.e.delta / 2.0;
    let mut y = y0.to_vec();
    let mut segments = Vec::new();
    let mut report = SolveReport { segments: 0, splits: 0, max_response_norm: 0.0, sweeps: 0 };
    for seg in &x.segments {
        let mut queue = vec![(seg.interval[0], seg.interval[1], 0usize)];
        while let Some((a, b, depth)) = queue.pop() {
            let zp = if same(a, seg.interval[0]) && same(b, seg.interval[1]) {
                seg.roughpath.clone()
            } else {
                restrict(&seg.roughpath, a, b)?
            };
            let (j, _) = conn.m.best_chart(&y).ok_or_else(|| Error::Domain(format!("response {y:?} left the atlas")))?;
            let psi = &conn.m.charts[j];
            let nu0 = psi.forward(&y);
            let field: Arc<dyn OneForm> = Arc::new(SignalField { f: conn.rep(seg.chart, j)?, d1, d2 });
            let mut state0 = zp.start().to_vec();
            state0.extend_from_slice(&nu0);
            let prob = RdeProblem::new(zp.clone(), field, state0.clone(), conn.gamma);
            let (joint, rep) = solve_rde_with(&prob, &cfg.rde)?;
            let joint = response(&joint, d1)?.with_start(state0)?;
            report.sweeps = report.sweeps.max(rep.sweeps);
            let worst = joint.trace().iter().map(|w| NormKind::Max.vec_norm(&w[d1..])).fold(0.0, f64::max);
            if worst > r {
                if depth >= cfg.max_splits || zp.segments() < 2 {
                    return Err(Error::Numeric(format!(
                        "response leaves chart {j} on [{a}, {b}] after {depth} halvings (|ν| = {worst:.4})"
                    )));
                }
                let g = zp.grid();
                let mid = g[g.len() / 2];
                report.splits += 1;
                queue.push((mid, b, depth + 1));
                queue.push((a, mid, depth + 1));
                continue;
            }
            report.max_response_norm = report.max_response_norm.max(worst);
            let end = joint.total();
            let nu1: Vec<f64> = nu0.iter().zip(&end.grade(1)[d1..]).map(|(u, v)| u + v).collect();
            y = psi.inverse(&nu1);
            let start_coords = joint.start().to_vec();
            segments.push(Segment { interval: [a, b], chart: seg.chart * nm + j, start_coords, roughpath: joint });
        }
    }
    report.segments = segments.len();
    let mut start = x.start.clone();
    start.extend_from_slice(y0);
    let path = ManifoldRoughPath::new(conn.e.clone(), start, x.p, x.gamma, segments)?;
    Ok(ManifoldRdeSolution { path, x0: x.start.clone(), y0: y0.to_vec(), report })
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub start_error: f64,
    pub signal_residual: f64,
    pub fixed_point_residual: f64,
    pub probes: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Start equality, signal recovery `π_*Z ∼ X` and the fixed point `Z(α) = Z(α^Γ)` on bumped
/// coordinate probes of the active charts.
pub fn verify_solution(sol: &ManifoldRdeSolution, conn: &Connection, x: &ManifoldRoughPath, tol: f64) -> Result<VerifyReport> {
    let z = &sol.path;
    let mut start = sol.x0.clone();
    start.extend_from_slice(&sol.y0);
    let start_error = NormKind::Max.dist(&z.start, &start).max(NormKind::Max.dist(&sol.x0, &x.start));

    let signal_charts = x.active_charts();
    let signal = signal_charts
        .par_iter()
        .flat_map(|&c| [ProbeKind::Exact, ProbeKind::Twisted].map(|k| (c, k)).to_vec())
        .map(|(c, kind)| {
            let probe = ProbeForm::new(&conn.n, c, kind);
            let on_x = evaluate(x, &probe)?;
            let on_z = evaluate(z, &probe.clone().on_factor(Factor::Left))?;
            d_p_sparse(&on_x, &on_z)
        })
        .collect::<Result<Vec<f64>>>()?;

    let active = z.active_charts();
    let fixed = active
        .par_iter()
        .flat_map(|&c| [ProbeKind::Exact, ProbeKind::Twisted].map(|k| (c, k)).to_vec())
        .map(|(c, kind)| {
            let probe = ProbeForm::new(&z.atlas, c, kind);
            let a = evaluate(z, &probe)?;
            let b = evaluate(z, &alpha_gamma(&probe, conn))?;
            d_p_sparse(&a, &b)
        })
        .collect::<Result<Vec<f64>>>()?;
    let signal_residual = signal.iter().copied().fold(0.0, f64::max);
    let fixed_point_residual = fixed.iter().copied().fold(0.0, f64::max);
    let probes = signal.len() + fixed.len();
    Ok(VerifyReport {
        start_error,
        signal_residual,
        fixed_point_residual,
        probes,
        tol,
        passed: start_error <= 1e-12 && signal_residual <= tol && fixed_point_residual <= tol,
    })
}

/// Ambient connection `g(x, y)v = -(y·v)(x - (x·y)y)` on sphere × sphere: parallel transport of a unit tangent vector.
pub fn sphere_transport_spec() -> ExprSpec {
    let vars: Vec<String> = ["x1", "x2", "x3", "y1", "y2", "y3"].map(String::from).to_vec();
    let xy = "(x1*y1+x2*y2+x3*y3)";
    let mut exprs = Vec::new();
    for a in 1..=3 {
        for b in 1..=3 {
            exprs.push(format!("-(x{a}-{xy}*y{a})*y{b}"));
        }
    }
    ExprSpec { vars, exprs }
}

/// Signal-recovery helper: the classical projection of `Z` onto its first `d1` chart coordinates, per segment.
pub fn signal_segments(z: &ManifoldRoughPath, d1: usize) -> Result<Vec<ClassicalRoughPath>> {
    z.segments.iter().map(|s| s.roughpath.project(&(0..d1).collect::<Vec<_>>())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{sphere, vector_space};
    use crate::calculus::IdentityMap;
    use crate::lift::{d_p, signature, SampledPath};
    use crate::lip::Region;
    use crate::mpath::{from_classical, localise, pushforward};
    use crate::rde::solve_rde_signal_dep_with;
    use std::f64::consts::PI;

    fn latitude(theta: f64, n: usize) -> ClassicalRoughPath {
        let pts = (0..=n)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / n as f64;
                vec![theta.sin() * t.cos(), theta.sin() * t.sin(), theta.cos()]
            })
            .collect();
        signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap()
    }

    fn plane(d: usize) -> Arc<Atlas> {
        Arc::new(vector_space(Region::cube(d, 1.5), 0.5, 0.25).unwrap())
    }

    #[test]
    fn zero_connection_keeps_response() {
        let s = Arc::new(sphere().unwrap());
        let conn = Connection::zero(s.clone(), s.clone(), 2.0).unwrap();
        let (x, _) = localise(&latitude(0.6, 200), s.clone(), 2.0).unwrap();
        let y0 = [0.0, 0.6f64.cos(), -0.6f64.sin()];
        let sol = solve_manifold_rde(&conn, &x, &y0).unwrap();
        for (_, y) in sol.response_trace() {
            assert!(NormKind::Max.dist(&y, &y0) < 1e-12);
        }
        let rep = verify_solution(&sol, &conn, &x, 1e-9).unwrap();
        assert!(rep.passed, "{rep:?}");

        let mut bad = sol.clone();
        let seg = &mut bad.path.segments[1].roughpath;
        let k = seg.segments() / 2;
        seg.increments_mut()[k].grade_mut(1)[3] += 1e-3;
        let rep = verify_solution(&bad, &conn, &x, 1e-6).unwrap();
        assert!(!rep.passed && rep.fixed_point_residual > 1e-6, "{rep:?}");
    }

    #[test]
    fn vector_space_reduction_matches_rde() {
        let (n, m) = (plane(2), plane(2));
        let g = ExprSpec {
            vars: ["x1", "x2", "y1", "y2"].map(String::from).to_vec(),
            exprs: ["0.3*y2", "sin(x1)", "-0.2*y1", "0.1*x2*y2"].map(String::from).to_vec(),
        };
        let conn = Connection::new(n.clone(), m.clone(), 2.0, None, Some(g.clone()), vec![]).unwrap();
        let pts: Vec<Vec<f64>> = (0..=300).map(|k| {
            let t = k as f64 / 300.0;
            vec![0.8 * (3.0 * t).sin(), 0.5 * t - 0.2]
        }).collect();
        let xc = signature(&SampledPath::from_points(pts).unwrap(), 2).unwrap().with_p(1.0).unwrap();
        let x = from_classical(&xc, None, n).unwrap();
        let y0 = [0.1, -0.2];
        let sol = solve_manifold_rde(&conn, &x, &y0).unwrap();
        let f: Arc<dyn OneForm> = Arc::new(MapForm::new(auto(ExprMap::new(g).unwrap()), 2, 2));
        let (joint, _) = solve_rde_signal_dep_with(f, &xc, &y0, 2.0, &RdeConfig::default()).unwrap();
        let direct = joint.project(&[2, 3]).unwrap();
        let proj = crate::calculus::AffineMap { a: vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0], b: vec![0.0, 0.0], n: 4 };
        let via = pushforward(&sol.path, auto(proj)).unwrap();
        let gap = d_p(&direct, &via).unwrap();
        assert!(gap < 1e-7, "{gap}");
        let rep = verify_solution(&sol, &conn, &x, 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn alpha_gamma_identities() {
        let (n, m) = (plane(1), plane(1));
        let g = ExprSpec { vars: vec!["x".into(), "y".into()], exprs: vec!["x*y+1".into()] };
        let conn = Connection::new(n, m, 2.0, None, Some(g), vec![]).unwrap();
        let c = 4;
        let id = crate::atlas::PerChartForm(vec![Arc::new(crate::calculus::IdentityForm(2)); conn.e.charts.len()]);
        let ag = alpha_gamma(&id, &conn);
        let rep = ag.chart_rep(&conn.e, c).unwrap();
        let w = [0.3, -0.4];
        let (k, j) = conn.split(c);
        let xy = conn.e.charts[c].inverse(&w);
        let v = rep.value(&w);
        let gv = xy[0] * xy[1] + 1.0;
        assert!(NormKind::Max.dist(&v, &[1.0, 0.0, gv, 0.0]) < 1e-12, "{v:?} {k} {j}");
        let agag = AlphaGamma { alpha: &ag, conn: &conn };
        let v2 = agag.chart_rep(&conn.e, c).unwrap().value(&w);
        assert!(NormKind::Max.dist(&v, &v2) < 1e-14);
        let horizontal: Arc<dyn OneForm> = Arc::new(crate::calculus::ConstantForm { n: 2, e: 1, d: 2, a: vec![-gv, 1.0] });
        let annihilate = crate::atlas::PerChartForm(vec![horizontal; conn.e.charts.len()]);
        let zero = alpha_gamma(&annihilate, &conn).chart_rep(&conn.e, c).unwrap().value(&w);
        assert!(zero.iter().all(|v| v.abs() < 1e-14));
        let _ = IdentityMap(1);
    }

    #[test]
    fn sphere_connection_is_compatible() {
        let s = Arc::new(sphere().unwrap());
        let conn = Connection::new(s.clone(), s, 2.0, None, Some(sphere_transport_spec()), vec![]).unwrap();
        assert!(conn.compatibility(300).unwrap() < 1e-8);
    }

    #[test]
    fn sphere_holonomy() {
        let s = Arc::new(sphere().unwrap());
        let conn = Connection::new(s.clone(), s.clone(), 2.0, None, Some(sphere_transport_spec()), vec![]).unwrap();
        let theta: f64 = PI / 4.0;
        let (x, _) = localise(&latitude(theta, 1000), s.clone(), 2.0).unwrap();
        let y0 = [theta.cos(), 0.0, -theta.sin()];
        let sol = solve_manifold_rde(&conn, &x, &y0).unwrap();
        let trace = sol.response_trace();
        let y1 = &trace.last().unwrap().1;
        let x0 = &x.start;
        let cross = [y0[1] * y1[2] - y0[2] * y1[1], y0[2] * y1[0] - y0[0] * y1[2], y0[0] * y1[1] - y0[1] * y1[0]];
        let angle = (cross[0] * x0[0] + cross[1] * x0[1] + cross[2] * x0[2]).atan2(y0.iter().zip(y1).map(|(a, b)| a * b).sum());
        let expect = 2.0 * PI * (1.0 - theta.cos());
        let wrap = |a: f64| (a + PI).rem_euclid(2.0 * PI) - PI;
        let err = wrap(angle - expect).abs().min(wrap(angle + expect).abs());
        assert!(err < 1e-3, "{angle} vs {expect}");
        for (_, y) in &trace {
            assert!((y.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
