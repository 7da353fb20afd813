//! Lip-γ jets in the sense of Stein on finite sample sets: norm estimation,
//! validation, composition, closure extension, local-to-global bounds and
//! blended extensions with smooth cutoffs.
//!
//! A jet component `f^j(x)` is stored flat with layout `[a][i_1..i_j][c]`:
//! output index `a < e`, `j` derivative indices `< n`, and a trailing linear
//! slot `c < slot` (`slot = 1` for functions, `slot = d` for one-forms).

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{Auto, FormJet, GenericMap, MapJet, OneForm, Scalar, SmoothMap};
use crate::error::{Error, Result};

/// Base norm on `R^n` and the induced norm on multilinear maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// ℓ1 base norm; multilinear maps get the exact projective operator norm.
    #[default]
    L1,
    /// ℓ∞ base norm; multilinear maps get the row-sum bound (exact for linear maps).
    Max,
}

impl NormKind {
    pub fn dist(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            NormKind::L1 => x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum(),
            NormKind::Max => x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        }
    }

    pub fn vec_norm(self, x: &[f64]) -> f64 {
        match self {
            NormKind::L1 => x.iter().map(|a| a.abs()).sum(),
            NormKind::Max => x.iter().map(|a| a.abs()).fold(0.0, f64::max),
        }
    }

    /// Norm of a flat `[a][rest]` array with `e` outputs.
    pub fn multilinear(self, t: &[f64], e: usize) -> f64 {
        let cols = t.len() / e;
        match self {
            NormKind::L1 => (0..cols).map(|c| (0..e).map(|a| t[a * cols + c].abs()).sum::<f64>()).fold(0.0, f64::max),
            NormKind::Max => (0..e).map(|a| t[a * cols..(a + 1) * cols].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max),
        }
    }
}

/// The integer `k` with `γ ∈ (k, k+1]`.
pub fn k_of(gamma: f64) -> usize {
    (gamma.ceil() as usize).max(1) - 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct JetSample {
    pub x: Vec<f64>,
    /// `f[j]` for `j = 0..=k`.
    pub f: Vec<Vec<f64>>,
}

/// Region descriptor used by the local-to-global check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Domain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Scattered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JetRepr", into = "JetRepr")]
pub struct LipJet {
    pub gamma: f64,
    pub dim_in: usize,
    pub dim_out: usize,
    pub slot: usize,
    pub norm_kind: NormKind,
    pub samples: Vec<JetSample>,
    pub declared: Option<f64>,
    pub domain: Domain,
}

#[derive(Serialize, Deserialize)]
struct SampleRepr {
    x: Vec<f64>,
    #[serde(flatten)]
    comps: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct JetRepr {
    gamma: f64,
    dim_in: usize,
    dim_out: usize,
    #[serde(default = "one_slot")]
    slot: usize,
    #[serde(default)]
    norm_kind: NormKind,
    samples: Vec<SampleRepr>,
    norm: Option<f64>,
    #[serde(default = "scattered")]
    domain: Domain,
}

fn one_slot() -> usize {
    1
}

fn scattered() -> Domain {
    Domain::Scattered
}

impl TryFrom<JetRepr> for LipJet {
    type Error = Error;
    fn try_from(r: JetRepr) -> Result<Self> {
        let k = k_of(r.gamma);
        let samples = r
            .samples
            .into_iter()
            .map(|s| {
                let f = (0..=k)
                    .map(|j| s.comps.get(&format!("f{j}")).cloned().ok_or_else(|| Error::Parse(format!("missing f{j}"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok(JetSample { x: s.x, f })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut jet = LipJet::new(r.gamma, r.dim_in, r.dim_out, r.slot, samples)?;
        jet.norm_kind = r.norm_kind;
        jet.declared = r.norm;
        jet.domain = r.domain;
        Ok(jet)
    }
}

impl From<LipJet> for JetRepr {
    fn from(j: LipJet) -> Self {
        JetRepr {
            gamma: j.gamma,
            dim_in: j.dim_in,
            dim_out: j.dim_out,
            slot: j.slot,
            norm_kind: j.norm_kind,
            samples: j
                .samples
                .into_iter()
                .map(|s| SampleRepr {
                    x: s.x,
                    comps: s.f.into_iter().enumerate().map(|(i, c)| (format!("f{i}"), c)).collect(),
                })
                .collect(),
            norm: j.declared,
            domain: j.domain,
        }
    }
}

/// Contract the last derivative index of `t` (degree `deg`) with `v`.
fn contract(t: &[f64], e: usize, n: usize, deg: usize, slot: usize, v: &[f64]) -> Vec<f64> {
    let mid = n.pow(deg as u32 - 1);
    let mut out = vec![0.0; e * mid * slot];
    for a in 0..e {
        for i in 0..mid {
            for m in 0..n {
                let vm = v[m];
                if vm == 0.0 {
                    continue;
                }
                let src = ((a * mid + i) * n + m) * slot;
                let dst = (a * mid + i) * slot;
                for c in 0..slot {
                    out[dst + c] += t[src + c] * vm;
                }
            }
        }
    }
    out
}

/// Evenly spaced points of a box with the given pitch per axis.
pub fn grid_points(lo: &[f64], hi: &[f64], pitch: f64) -> Vec<Vec<f64>> {
    let counts: Vec<usize> = lo.iter().zip(hi).map(|(a, b)| ((b - a) / pitch).round().max(1.0) as usize).collect();
    let mut out = vec![vec![]];
    for (axis, &c) in counts.iter().enumerate() {
        let mut next = Vec::with_capacity(out.len() * (c + 1));
        for p in &out {
            for s in 0..=c {
                let mut q = p.clone();
                q.push(lo[axis] + (hi[axis] - lo[axis]) * s as f64 / c as f64);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

impl LipJet {
    pub fn new(gamma: f64, dim_in: usize, dim_out: usize, slot: usize, samples: Vec<JetSample>) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::Invalid(format!("γ = {gamma} must be positive")));
        }
        if samples.is_empty() {
            return Err(Error::Invalid("jet domain is empty".into()));
        }
        let k = k_of(gamma);
        for (s_i, s) in samples.iter().enumerate() {
            if s.x.len() != dim_in || s.f.len() != k + 1 {
                return Err(Error::Shape(format!("sample {s_i}: point or component count mismatch")));
            }
            for (j, fj) in s.f.iter().enumerate() {
                if fj.len() != dim_out * dim_in.pow(j as u32) * slot {
                    return Err(Error::Shape(format!("sample {s_i}: component f{j} has wrong size")));
                }
            }
        }
        Ok(LipJet { gamma, dim_in, dim_out, slot, norm_kind: NormKind::L1, samples, declared: None, domain: Domain::Scattered })
    }

    pub fn with_norm(mut self, kind: NormKind) -> Self {
        self.norm_kind = kind;
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_declared(mut self, l: f64) -> Self {
        self.declared = Some(l);
        self
    }

    pub fn k(&self) -> usize {
        k_of(self.gamma)
    }

    /// Jet of a smooth map sampled at `points` (supports `k ≤ 2`).
    pub fn from_map(map: &dyn SmoothMap, points: &[Vec<f64>], gamma: f64) -> Result<Self> {
        let k = k_of(gamma);
        if k > 2 {
            return Err(Error::Unsupported(format!("map jets carry two derivatives; γ = {gamma} needs {k}")));
        }
        let samples = points
            .par_iter()
            .map(|x| {
                let MapJet { value, jac, hess } = map.jet(x);
                let f = [value, jac, hess].into_iter().take(k + 1).collect();
                JetSample { x: x.clone(), f }
            })
            .collect();
        Self::new(gamma, map.dim_in(), map.dim_out(), 1, samples)
    }

    /// Jet of a one-form sampled at `points`; `gamma` is the form's own exponent (`k ≤ 2`).
    pub fn from_form(form: &dyn OneForm, points: &[Vec<f64>], gamma: f64) -> Result<Self> {
        let k = k_of(gamma);
        if k > 2 {
            return Err(Error::Unsupported(format!("form jets carry two derivatives; γ = {gamma} needs {k}")));
        }
        let samples = points
            .par_iter()
            .map(|x| {
                let FormJet { value, deriv } = form.jet(x);
                let mut f = vec![value];
                if k >= 1 {
                    f.push(deriv);
                }
                if k >= 2 {
                    f.push(form.second_deriv(x).ok_or_else(|| {
                        Error::Unsupported("second derivative of this form is not available".into())
                    })?);
                }
                Ok(JetSample { x: x.clone(), f })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(gamma, form.point_dim(), form.output_dim(), form.input_dim(), samples)
    }

    /// Taylor expansion of all components from sample `base` to the point `y`.
    pub fn taylor_from(&self, base: usize, y: &[f64]) -> Vec<Vec<f64>> {
        let s = &self.samples[base];
        let v: Vec<f64> = y.iter().zip(&s.x).map(|(a, b)| a - b).collect();
        let k = self.k();
        (0..=k)
            .map(|j| {
                let mut acc = s.f[j].clone();
                let mut fact = 1.0;
                for l in 1..=k - j {
                    fact *= l as f64;
                    let mut t = s.f[j + l].clone();
                    for deg in (j + 1..=j + l).rev() {
                        t = contract(&t, self.dim_out, self.dim_in, deg, self.slot, &v);
                    }
                    acc.iter_mut().zip(&t).for_each(|(a, b)| *a += b / fact);
                }
                acc
            })
            .collect()
    }

    /// Largest `|f^j(x)|` over samples and grades.
    pub fn sup_norm(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| s.f.iter().map(|c| self.norm_kind.multilinear(c, self.dim_out)))
            .fold(0.0, f64::max)
    }

    /// Index of the nearest sample and its distance.
    pub fn nearest(&self, y: &[f64]) -> (usize, f64) {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (i, self.norm_kind.dist(&s.x, y)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
    }

    /// Fill-distance estimate: the largest nearest-neighbour spacing among samples.
    pub fn resolution(&self) -> f64 {
        if self.samples.len() < 2 {
            return 0.0;
        }
        self.samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                self.samples
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, t)| self.norm_kind.dist(&s.x, &t.x))
                    .fold(f64::INFINITY, f64::min)
            })
            .reduce(|| 0.0, f64::max)
    }

    fn worst_pair(&self, l: f64) -> (f64, f64, Option<(usize, usize, usize)>) {
        // (norm estimate, worst ratio against l, witness)
        let k = self.k();
        let n = self.samples.len();
        let best = (0..n)
            .into_par_iter()
            .map(|x| {
                let mut est: f64 = 0.0;
                let mut worst = (0.0f64, None);
                for y in 0..n {
                    if x == y {
                        continue;
                    }
                    let dist = self.norm_kind.dist(&self.samples[x].x, &self.samples[y].x);
                    if dist == 0.0 {
                        continue;
                    }
                    let tx = self.taylor_from(x, &self.samples[y].x);
                    for j in 0..=k {
                        let diff: Vec<f64> = self.samples[y].f[j].iter().zip(&tx[j]).map(|(a, b)| a - b).collect();
                        let r = self.norm_kind.multilinear(&diff, self.dim_out) / dist.powf(self.gamma - j as f64);
                        est = est.max(r);
                        if l > 0.0 && r / l > worst.0 {
                            worst = (r / l, Some((x, y, j)));
                        }
                    }
                }
                (est, worst.0, worst.1)
            })
            .reduce(|| (0.0, 0.0, None), |a, b| (a.0.max(b.0), if a.1 >= b.1 { a.1 } else { b.1 }, if a.1 >= b.1 { a.2 } else { b.2 }));
        best
    }
}

/// Smallest `L` such that both sup and remainder bounds hold over all sampled pairs.
pub fn lip_norm_estimate(jet: &LipJet) -> Result<f64> {
    if jet.samples.is_empty() {
        return Err(Error::Invalid("jet domain is empty".into()));
    }
    Ok(jet.sup_norm().max(jet.worst_pair(0.0).0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub norm_estimate: f64,
    pub bound: f64,
    /// Largest violation ratio `|R_j(x,y)| / (L |x-y|^{γ-j})` (or `sup|f^j| / L`).
    pub worst_ratio: f64,
    /// `(x index, y index, j)` of the worst remainder.
    pub witness: Option<(usize, usize, usize)>,
}

/// Validate against the declared norm, or against the estimate when none is declared.
pub fn lip_validate(jet: &LipJet) -> Result<ValidationReport> {
    if jet.samples.len() < 2 {
        return Err(Error::Invalid("validation needs at least two samples".into()));
    }
    let (est, _, _) = jet.worst_pair(0.0);
    let sup = jet.sup_norm();
    let norm_estimate = est.max(sup);
    let bound = jet.declared.unwrap_or(norm_estimate);
    let (_, ratio, witness) = jet.worst_pair(bound);
    let worst_ratio = ratio.max(if bound > 0.0 { sup / bound } else { 0.0 });
    Ok(ValidationReport { ok: worst_ratio <= 1.0 + 1e-12, norm_estimate, bound, worst_ratio, witness })
}

fn bell(n: usize) -> u64 {
    // Bell triangle
    let mut row = vec![1u64];
    for _ in 0..n {
        let mut next = vec![*row.last().unwrap()];
        for v in &row {
            let last = *next.last().unwrap();
            next.push(last + v);
        }
        row = next;
    }
    row[0]
}

/// Published composition constant `C(γ) = 2^{k+1}·Bell(k+1)`.
pub fn composition_constant(gamma: f64) -> f64 {
    let k = k_of(gamma);
    2f64.powi(k as i32 + 1) * bell(k + 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposeReport {
    pub c_gamma: f64,
    pub norm_g: f64,
    pub norm_f: f64,
    pub norm_composed: f64,
    /// `C(γ)·‖g‖·max(‖f‖^k, 1)`.
    pub bound_k: f64,
    /// `C(γ)·‖g‖·max(‖f‖^γ, 1)`.
    pub bound_gamma: f64,
    /// Largest distance from an `f`-value to its nearest `g`-sample.
    pub interpolation_distance: f64,
}

fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in set_partitions(n - 1) {
        for b in 0..p.len() {
            let mut q = p.clone();
            q[b].push(n - 1);
            out.push(q);
        }
        let mut q = p.clone();
        q.push(vec![n - 1]);
        out.push(q);
    }
    out
}

fn index_digits(mut flat: usize, n: usize, len: usize) -> Vec<usize> {
    let mut d = vec![0; len];
    for i in (0..len).rev() {
        d[i] = flat % n;
        flat /= n;
    }
    d
}

/// `g ∘ f` by the higher-order chain rule; `g` is evaluated at `f(x)` by nearest-sample Taylor expansion.
pub fn lip_compose(g: &LipJet, f: &LipJet) -> Result<(LipJet, ComposeReport)> {
    if (g.gamma - f.gamma).abs() > 1e-12 {
        return Err(Error::Invalid("composition requires a common γ".into()));
    }
    if g.slot != 1 || f.slot != 1 || g.dim_in != f.dim_out {
        return Err(Error::Shape("composition needs function jets with matching dimensions".into()));
    }
    let k = f.k();
    let (n, m, e) = (f.dim_in, f.dim_out, g.dim_out);
    let reach = 1.01 * g.resolution().max(1e-12);
    let mut offending = Vec::new();
    let mut interp: f64 = 0.0;
    let mut samples = Vec::with_capacity(f.samples.len());
    for (idx, s) in f.samples.iter().enumerate() {
        let y = &s.f[0];
        let (base, dist) = g.nearest(y);
        if dist > reach {
            offending.push(idx);
            continue;
        }
        interp = interp.max(dist);
        let gj = g.taylor_from(base, y);
        let mut comps = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let mut out = vec![0.0; e * n.pow(j as u32)];
            if j == 0 {
                out.copy_from_slice(&gj[0]);
                comps.push(out);
                continue;
            }
            let parts = set_partitions(j);
            for flat in 0..n.pow(j as u32) {
                let idx = index_digits(flat, n, j);
                for part in &parts {
                    let mm = part.len();
                    // Σ over b_1..b_mm of g^mm[a][b] Π f^{|B_r|}[b_r][i_{B_r}]
                    for bflat in 0..m.pow(mm as u32) {
                        let b = index_digits(bflat, m, mm);
                        let mut prod = 1.0;
                        for (r, block) in part.iter().enumerate() {
                            let fl = &s.f[block.len()];
                            let sub = block.iter().fold(0, |acc, &q| acc * n + idx[q]);
                            prod *= fl[b[r] * n.pow(block.len() as u32) + sub];
                            if prod == 0.0 {
                                break;
                            }
                        }
                        if prod == 0.0 {
                            continue;
                        }
                        for a in 0..e {
                            out[a * n.pow(j as u32) + flat] += gj[mm][a * m.pow(mm as u32) + bflat] * prod;
                        }
                    }
                }
            }
            comps.push(out);
        }
        samples.push(JetSample { x: s.x.clone(), f: comps });
    }
    if !offending.is_empty() {
        let shown: Vec<String> = offending.iter().take(10).map(|i| i.to_string()).collect();
        return Err(Error::Domain(format!(
            "{} samples of f map outside the coverage of g (indices {}{})",
            offending.len(),
            shown.join(", "),
            if offending.len() > 10 { ", ..." } else { "" }
        )));
    }
    let jet = LipJet::new(f.gamma, n, e, 1, samples)?.with_norm(f.norm_kind).with_domain(f.domain.clone());
    let norm_g = lip_norm_estimate(g)?;
    let norm_f = lip_norm_estimate(f)?;
    let norm_composed = lip_norm_estimate(&jet)?;
    let c = composition_constant(f.gamma);
    let report = ComposeReport {
        c_gamma: c,
        norm_g,
        norm_f,
        norm_composed,
        bound_k: c * norm_g * norm_f.powi(k as i32).max(1.0),
        bound_gamma: c * norm_g * norm_f.powf(f.gamma).max(1.0),
        interpolation_distance: interp,
    };
    Ok((jet, report))
}

/// Extend a jet to limit points by Taylor expansion from an approximating sample.
///
/// Returns the extended jet and, per target, the Cauchy-modulus error bound
/// `4L·max(|p-x|, |p-x|^{γ-j})` maximized over `j`.
pub fn lip_extend_closure(
    jet: &LipJet,
    targets: &[Vec<f64>],
    approach: Option<&[Vec<usize>]>,
) -> Result<(LipJet, Vec<f64>)> {
    let l = match jet.declared {
        Some(l) => l,
        None => lip_norm_estimate(jet)?,
    };
    let reach = 1.01 * jet.resolution().max(1e-12);
    let k = jet.k();
    let mut out = jet.clone();
    let mut bounds = Vec::with_capacity(targets.len());
    for (t, p) in targets.iter().enumerate() {
        let (base, dist) = match approach.and_then(|a| a.get(t)).and_then(|seq| seq.last()) {
            Some(&b) => (b, jet.norm_kind.dist(&jet.samples[b].x, p)),
            None => jet.nearest(p),
        };
        if dist > reach {
            return Err(Error::Domain(format!("target {t} is {dist:.3e} from the samples, beyond resolution {reach:.3e}")));
        }
        if dist == 0.0 {
            bounds.push(0.0);
            continue;
        }
        let comps = jet.taylor_from(base, p);
        let bound = (0..=k).map(|j| 4.0 * l * dist.max(dist.powf(jet.gamma - j as f64))).fold(0.0, f64::max);
        bounds.push(bound);
        out.samples.push(JetSample { x: p.clone(), f: comps });
    }
    Ok((out, bounds))
}

/// `max(C, 2C/δ^{γ-⌊γ⌋})`.
pub fn local_to_global_bound(c: f64, delta: f64, gamma: f64) -> f64 {
    c.max(2.0 * c / delta.powf(gamma - gamma.floor()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalToGlobalReport {
    pub local_constant: f64,
    pub bound: f64,
    pub global_estimate: f64,
    pub ok: bool,
}

/// Measure the local constant over δ-balls centred at samples and compare the global estimate with the bound.
pub fn verify_local_to_global(jet: &LipJet, delta: f64) -> Result<LocalToGlobalReport> {
    if !matches!(jet.domain, Domain::Box { .. }) {
        return Err(Error::Domain("local-to-global bound needs a convex (box) domain".into()));
    }
    let local_constant = (0..jet.samples.len())
        .into_par_iter()
        .map(|c| {
            let centre = &jet.samples[c].x;
            let sub: Vec<JetSample> = jet
                .samples
                .iter()
                .filter(|s| jet.norm_kind.dist(&s.x, centre) < delta)
                .cloned()
                .collect();
            let mut local = jet.clone();
            local.samples = sub;
            lip_norm_estimate(&local).unwrap_or(0.0)
        })
        .reduce(|| 0.0, f64::max);
    let bound = local_to_global_bound(local_constant, delta, jet.gamma);
    let global_estimate = lip_norm_estimate(jet)?;
    Ok(LocalToGlobalReport { local_constant, bound, global_estimate, ok: global_estimate <= bound * (1.0 + 1e-12) })
}

/// Axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Region { lo, hi }
    }

    pub fn cube(d: usize, r: f64) -> Self {
        Region { lo: vec![-r; d], hi: vec![r; d] }
    }

    /// Max-norm distance between two boxes.
    pub fn distance(&self, other: &Region) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .map(|((a0, a1), (b0, b1))| (b0 - a1).max(a0 - b1).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| *v >= *l && *v <= *h)
    }
}

/// Smooth cutoff equal to 1 on a box and 0 outside its `margin`-neighbourhood (max norm).
#[derive(Clone, Debug)]
pub struct BoxCutoff {
    pub region: Region,
    pub margin: f64,
}

impl GenericMap for BoxCutoff {
    fn dim_in(&self) -> usize {
        self.region.lo.len()
    }
    fn dim_out(&self) -> usize {
        1
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut acc = S::cst(1.0);
        for (i, xi) in x.iter().enumerate() {
            let v = xi.value();
            let u = if v < self.region.lo[i] {
                (-*xi + self.region.lo[i]) / self.margin
            } else if v > self.region.hi[i] {
                (*xi - self.region.hi[i]) / self.margin
            } else {
                continue;
            };
            if u.value() >= 1.0 {
                return vec![S::cst(0.0)];
            }
            acc = acc * crate::calculus::smooth_step(u);
        }
        vec![acc]
    }
}

/// `Σ_c χ_c(x)·m_c(x)` for components on separated boxes.
pub struct BlendedMap {
    pub components: Vec<(Region, Arc<dyn SmoothMap>)>,
    pub margin: f64,
}

impl BlendedMap {
    /// Components must be separated by a positive max-norm distance; the cutoff margin is half of it (capped by `max_margin`).
    pub fn new(components: Vec<(Region, Arc<dyn SmoothMap>)>, max_margin: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Invalid("blend needs at least one component".into()));
        }
        let e = components[0].1.dim_out();
        let d = components[0].0.lo.len();
        let mut sep = f64::INFINITY;
        for (i, (ri, mi)) in components.iter().enumerate() {
            if mi.dim_out() != e || mi.dim_in() != d || ri.lo.len() != d {
                return Err(Error::Shape("blend components must share dimensions".into()));
            }
            for (rj, _) in &components[i + 1..] {
                sep = sep.min(ri.distance(rj));
            }
        }
        if !(sep > 0.0) {
            return Err(Error::Domain("blend components are not separated".into()));
        }
        Ok(BlendedMap { components, margin: (0.5 * sep).min(max_margin) })
    }

    fn cutoff(&self, c: usize) -> Auto<BoxCutoff> {
        Auto(BoxCutoff { region: self.components[c].0.clone(), margin: self.margin })
    }

    /// Bound on `‖F‖ / max_c ‖m_c‖` from the Leibniz rule and the cutoff derivative bounds.
    pub fn norm_constant(&self, gamma: f64) -> f64 {
        let d = self.components[0].0.lo.len() as f64;
        let s = step_derivative_bounds();
        let k = k_of(gamma);
        // Each derivative of the cutoff picks up at most d·sup|s^{(l)}|/margin^l.
        let chi: Vec<f64> = (0..=2).map(|l| if l == 0 { 1.0 } else { (d * s[l] / self.margin.powi(l as i32)).powi(1) * d.powi(l as i32 - 1) }).collect();
        let mut c = 0.0;
        for j in 0..=k.min(2) {
            let mut sum = 0.0;
            for l in 0..=j {
                sum += binom(j, l) * chi[l];
            }
            c = f64::max(c, sum);
        }
        2.0 * c * (1.0 + 1.0 / self.margin)
    }
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Tabulated `sup |s^{(l)}|`, `l = 0, 1, 2`, for the smooth step.
pub fn step_derivative_bounds() -> [f64; 3] {
    let mut b = [1.0, 0.0, 0.0];
    for i in 1..2000 {
        let u = i as f64 / 2000.0;
        let j: crate::calculus::Jet2<1> = crate::calculus::smooth_step(crate::calculus::Jet2::variable(u, 0));
        b[1] = f64::max(b[1], j.g[0].abs());
        b[2] = f64::max(b[2], j.h[0][0].abs());
    }
    [b[0], b[1] * 1.01, b[2] * 1.01]
}

impl SmoothMap for BlendedMap {
    fn dim_in(&self) -> usize {
        self.components[0].1.dim_in()
    }
    fn dim_out(&self) -> usize {
        self.components[0].1.dim_out()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_out()];
        for c in 0..self.components.len() {
            let chi = self.cutoff(c).eval(x)[0];
            if chi != 0.0 {
                let m = self.components[c].1.eval(x);
                out.iter_mut().zip(&m).for_each(|(o, v)| *o += chi * v);
            }
        }
        out
    }
    fn jet(&self, x: &[f64]) -> MapJet {
        let (n, e) = (x.len(), self.dim_out());
        let mut out = MapJet { value: vec![0.0; e], jac: vec![0.0; e * n], hess: vec![0.0; e * n * n] };
        for c in 0..self.components.len() {
            let chi = self.cutoff(c).jet(x);
            if chi.value[0] == 0.0 && chi.jac.iter().all(|v| *v == 0.0) && chi.hess.iter().all(|v| *v == 0.0) {
                continue;
            }
            let m = self.components[c].1.jet(x);
            for a in 0..e {
                out.value[a] += chi.value[0] * m.value[a];
                for i in 0..n {
                    out.jac[a * n + i] += chi.jac[i] * m.value[a] + chi.value[0] * m.jac[a * n + i];
                    for j in 0..n {
                        out.hess[(a * n + i) * n + j] += chi.hess[i * n + j] * m.value[a]
                            + chi.jac[i] * m.jac[a * n + j]
                            + chi.jac[j] * m.jac[a * n + i]
                            + chi.value[0] * m.hess[(a * n + i) * n + j];
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendReport {
    pub constant: f64,
    pub input_norm: f64,
    pub output_norm: f64,
    pub margin: f64,
}

/// Blend components on separated boxes with smooth cutoffs and sample the result on `target`.
pub fn lip_extend_blend(
    components: Vec<(Region, Arc<dyn SmoothMap>)>,
    target: &Region,
    pitch: f64,
    gamma: f64,
) -> Result<(LipJet, BlendReport)> {
    let blend = BlendedMap::new(components, 1.0)?;
    let points = grid_points(&target.lo, &target.hi, pitch);
    let jet = LipJet::from_map(&blend, &points, gamma)?
        .with_norm(NormKind::Max)
        .with_domain(Domain::Box { lo: target.lo.clone(), hi: target.hi.clone() });
    let mut input_norm: f64 = 0.0;
    for (region, m) in &blend.components {
        let lo: Vec<f64> = region.lo.iter().map(|v| v - blend.margin).collect();
        let hi: Vec<f64> = region.hi.iter().map(|v| v + blend.margin).collect();
        let pts: Vec<Vec<f64>> = points.iter().filter(|p| Region::new(lo.clone(), hi.clone()).contains(p)).cloned().collect();
        if pts.len() >= 2 {
            let j = LipJet::from_map(m.as_ref(), &pts, gamma)?.with_norm(NormKind::Max);
            input_norm = input_norm.max(lip_norm_estimate(&j)?);
        }
    }
    let output_norm = lip_norm_estimate(&jet)?;
    let report = BlendReport { constant: blend.norm_constant(gamma), input_norm, output_norm, margin: blend.margin };
    Ok((jet, report))
}

/// `f_u(x) = u·f_1(x/u)` where `f_1` is the identity on `[-1,1]^d` blended to zero outside `[-2,2]^d`.
pub struct ScaledIdentity {
    pub u: f64,
    base: BlendedMap,
}

impl ScaledIdentity {
    pub fn new(d: usize, u: f64) -> Self {
        let id: Arc<dyn SmoothMap> = crate::calculus::auto(crate::calculus::IdentityMap(d));
        let base = BlendedMap { components: vec![(Region::cube(d, 1.0), id)], margin: 1.0 };
        ScaledIdentity { u, base }
    }
}

impl SmoothMap for ScaledIdentity {
    fn dim_in(&self) -> usize {
        self.base.dim_in()
    }
    fn dim_out(&self) -> usize {
        self.base.dim_out()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let y: Vec<f64> = x.iter().map(|v| v / self.u).collect();
        self.base.eval(&y).into_iter().map(|v| v * self.u).collect()
    }
    fn jet(&self, x: &[f64]) -> MapJet {
        let y: Vec<f64> = x.iter().map(|v| v / self.u).collect();
        let mut j = self.base.jet(&y);
        j.value.iter_mut().for_each(|v| *v *= self.u);
        j.hess.iter_mut().for_each(|v| *v /= self.u);
        j
    }
}

/// Nearest-sample Taylor interpolation of a sampled one-form jet.
#[derive(Clone, Debug)]
pub struct OneFormJet {
    pub jet: LipJet,
    pub support: Option<Region>,
}

impl OneFormJet {
    pub fn new(jet: LipJet, support: Option<Region>) -> Result<Self> {
        if jet.k() < 1 {
            return Err(Error::Invalid("a sampled one-form needs its first derivative (γ-1 > 1)".into()));
        }
        Ok(OneFormJet { jet, support })
    }

    /// `L·|x - x_n|^{γ-j}` error bound for the value at `x` (with `L` declared or estimated).
    pub fn interpolation_error(&self, x: &[f64]) -> f64 {
        let (_, dist) = self.jet.nearest(x);
        let l = self.jet.declared.unwrap_or_else(|| self.jet.sup_norm());
        l * dist.powf(self.jet.gamma)
    }
}

impl OneForm for OneFormJet {
    fn point_dim(&self) -> usize {
        self.jet.dim_in
    }
    fn input_dim(&self) -> usize {
        self.jet.slot
    }
    fn output_dim(&self) -> usize {
        self.jet.dim_out
    }
    fn jet(&self, x: &[f64]) -> FormJet {
        if let Some(s) = &self.support {
            if !s.contains(x) {
                let (e, d, n) = (self.jet.dim_out, self.jet.slot, self.jet.dim_in);
                return FormJet { value: vec![0.0; e * d], deriv: vec![0.0; e * n * d] };
            }
        }
        let (base, _) = self.jet.nearest(x);
        let mut t = self.jet.taylor_from(base, x);
        let deriv = t.swap_remove(1);
        FormJet { value: t.swap_remove(0), deriv }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{auto, ExactForm, Polynomial};
    use crate::expr::ExprMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_grid() -> Vec<Vec<f64>> {
        (0..=100).map(|i| vec![i as f64 / 100.0]).collect()
    }

    fn expr(src: &str) -> Arc<dyn SmoothMap> {
        auto(ExprMap::from_strs(&["x"], &[src]).unwrap())
    }

    #[test]
    fn constant_jet_norm() {
        let j = LipJet::from_map(expr("-3").as_ref(), &unit_grid(), 2.0).unwrap();
        assert_eq!(lip_norm_estimate(&j).unwrap(), 3.0);
        assert_eq!(j.worst_pair(0.0).0, 0.0);
    }

    #[test]
    fn linear_jet_norm() {
        for gamma in [1.2, 1.5, 2.0] {
            let j = LipJet::from_map(expr("x").as_ref(), &unit_grid(), gamma).unwrap();
            assert!((lip_norm_estimate(&j).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn square_jet_norm_matches_brute_force() {
        let j = LipJet::from_map(expr("x^2").as_ref(), &unit_grid(), 2.0).unwrap();
        // Brute force: sup|f¹| = 2, |R_0| = |x-y|^2, |R_1| = 2|x-y|.
        let xs: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let mut brute: f64 = 2.0;
        for &x in &xs {
            for &y in &xs {
                if x != y {
                    let r0 = (y * y - x * x - 2.0 * x * (y - x)).abs() / (y - x).powi(2);
                    let r1 = (2.0 * y - 2.0 * x).abs() / (y - x).abs();
                    brute = brute.max(r0).max(r1);
                }
            }
        }
        assert!((lip_norm_estimate(&j).unwrap() - brute).abs() < 1e-12);
        assert!((brute - 2.0).abs() < 1e-12);
    }

    #[test]
    fn validation_reports_violations() {
        let j = LipJet::from_map(expr("x^2").as_ref(), &unit_grid(), 2.0).unwrap().with_declared(1.5);
        let r = lip_validate(&j).unwrap();
        assert!(!r.ok);
        assert!((r.worst_ratio - 2.0 / 1.5).abs() < 1e-12);
        let ok = lip_validate(&j.with_declared(2.0)).unwrap();
        assert!(ok.ok);
    }

    #[test]
    fn compose_with_identity() {
        let f = LipJet::from_map(expr("sin(3*x)").as_ref(), &unit_grid(), 2.0).unwrap();
        let ys: Vec<Vec<f64>> = (0..=200).map(|i| vec![-1.0 + i as f64 / 100.0]).collect();
        let id = LipJet::from_map(expr("x").as_ref(), &ys, 2.0).unwrap();
        let (c, rep) = lip_compose(&id, &f).unwrap();
        for (a, b) in c.samples.iter().zip(&f.samples) {
            for (u, v) in a.f.iter().flatten().zip(b.f.iter().flatten()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert!((rep.norm_composed - rep.norm_f).abs() < 1e-9);
    }

    #[test]
    fn compose_square_after_shift() {
        let f = LipJet::from_map(expr("x + 1").as_ref(), &unit_grid(), 2.0).unwrap();
        let ys: Vec<Vec<f64>> = (0..=100).map(|i| vec![1.0 + i as f64 / 100.0]).collect();
        let g = LipJet::from_map(expr("x^2").as_ref(), &ys, 2.0).unwrap();
        let (c, _) = lip_compose(&g, &f).unwrap();
        for s in &c.samples {
            let x = s.x[0];
            assert!((s.f[0][0] - (x + 1.0).powi(2)).abs() < 1e-12);
            assert!((s.f[1][0] - 2.0 * (x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_sine_twice() {
        let f = LipJet::from_map(expr("sin(x)").as_ref(), &unit_grid(), 2.0).unwrap();
        let g = LipJet::from_map(expr("sin(x)").as_ref(), &unit_grid(), 2.0).unwrap();
        let (c, rep) = lip_compose(&g, &f).unwrap();
        assert!(lip_validate(&c).unwrap().ok);
        assert!(rep.norm_composed <= rep.bound_k);
        assert!(rep.interpolation_distance <= 0.01);
    }

    #[test]
    fn compose_range_escape() {
        let f = LipJet::from_map(expr("x + 5").as_ref(), &unit_grid(), 2.0).unwrap();
        let g = LipJet::from_map(expr("x").as_ref(), &unit_grid(), 2.0).unwrap();
        assert!(matches!(lip_compose(&g, &f), Err(Error::Domain(_))));
    }

    #[test]
    fn faa_di_bruno_second_order_in_two_variables() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pf = Polynomial::random(2, 2, 2, 0.5, &mut rng);
        let pg = Polynomial::random(2, 1, 3, 0.5, &mut rng);
        let fm = auto(pf);
        let gm = auto(pg);
        let xs = grid_points(&[0.0, 0.0], &[0.5, 0.5], 0.1);
        let f = LipJet::from_map(fm.as_ref(), &xs, 2.5).unwrap();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| fm.eval(x)).collect();
        let g = LipJet::from_map(gm.as_ref(), &ys, 2.5).unwrap();
        let (c, _) = lip_compose(&g, &f).unwrap();
        let direct = crate::calculus::Compose { outer: gm, inner: fm };
        for s in &c.samples {
            let j = direct.jet(&s.x);
            for (u, v) in s.f[1].iter().zip(&j.jac).chain(s.f[2].iter().zip(&j.hess)) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn published_constants() {
        assert_eq!(composition_constant(1.5), 8.0);
        assert_eq!(composition_constant(2.0), 8.0);
        assert_eq!(composition_constant(2.5), 40.0);
        assert_eq!(bell(3), 5);
        assert_eq!(bell(4), 15);
    }

    #[test]
    fn closure_extension_of_identity() {
        let pts: Vec<Vec<f64>> = (1..100).map(|i| vec![i as f64 / 100.0]).collect();
        let j = LipJet::from_map(expr("x").as_ref(), &pts, 2.0).unwrap();
        let (ext, _) = lip_extend_closure(&j, &[vec![0.0], vec![1.0]], None).unwrap();
        let n = ext.samples.len();
        assert!(ext.samples[n - 2].f[0][0].abs() < 1e-15);
        assert!((ext.samples[n - 1].f[0][0] - 1.0).abs() < 1e-15);
        let before = lip_norm_estimate(&j).unwrap();
        let after = lip_norm_estimate(&ext).unwrap();
        assert!((before - after).abs() < 1e-8);
    }

    #[test]
    fn closure_extension_of_square_root() {
        let pts: Vec<Vec<f64>> = (1..100).map(|i| vec![i as f64 / 100.0]).collect();
        let f = expr("sqrt(x + 0.01)");
        let j = LipJet::from_map(f.as_ref(), &pts, 2.0).unwrap();
        let (ext, bounds) = lip_extend_closure(&j, &[vec![1.0]], None).unwrap();
        let got = ext.samples.last().unwrap().f[0][0];
        let want = 1.01f64.sqrt();
        assert!((got - want).abs() <= bounds[0]);
        assert!(matches!(lip_extend_closure(&j, &[vec![1.5]], None), Err(Error::Domain(_))));
    }

    #[test]
    fn local_to_global_examples() {
        assert_eq!(local_to_global_bound(1.0, 1.0, 1.7), 2.0);
        assert!((local_to_global_bound(3.0, 0.5, 1.5) - 6.0 / 0.5f64.sqrt()).abs() < 1e-12);
        let j = LipJet::from_map(expr("x^2").as_ref(), &unit_grid(), 2.0)
            .unwrap()
            .with_domain(Domain::Box { lo: vec![0.0], hi: vec![1.0] });
        let r = verify_local_to_global(&j, 0.25).unwrap();
        assert!(r.local_constant <= 2.0 + 1e-12);
        assert!((r.bound - 4.0).abs() < 1e-12);
        assert!((r.global_estimate - 2.0).abs() < 1e-12);
        assert!(r.ok);
        let scattered = LipJet::from_map(expr("x").as_ref(), &unit_grid(), 2.0).unwrap();
        assert!(matches!(verify_local_to_global(&scattered, 0.25), Err(Error::Domain(_))));
    }

    #[test]
    fn blended_bump() {
        let one: Arc<dyn SmoothMap> = auto(ExprMap::from_strs(&["x", "y"], &["1"]).unwrap());
        let zero: Arc<dyn SmoothMap> = auto(ExprMap::from_strs(&["x", "y"], &["0"]).unwrap());
        let inner = Region::cube(2, 0.5);
        // The zero component is far away; only the cutoff of the inner box matters.
        let far = Region::new(vec![5.0, 5.0], vec![6.0, 6.0]);
        let (jet, rep) = lip_extend_blend(vec![(inner.clone(), one), (far, zero)], &Region::cube(2, 2.0), 1.0 / 16.0, 2.0).unwrap();
        for s in &jet.samples {
            assert!((0.0..=1.0).contains(&s.f[0][0]));
            if inner.contains(&s.x) {
                assert_eq!(s.f[0][0], 1.0);
                assert!(s.f[1].iter().all(|v| *v == 0.0));
            }
            if s.x.iter().any(|v| v.abs() >= 0.5 + rep.margin) {
                assert_eq!(s.f[0][0], 0.0);
            }
        }
        assert!(lip_validate(&jet).unwrap().ok);
        assert!(rep.output_norm <= rep.constant * rep.input_norm.max(1.0));
    }

    #[test]
    fn blend_restricts_to_input() {
        let f: Arc<dyn SmoothMap> = expr("sin(x) + x^2");
        let region = Region::new(vec![0.0], vec![1.0]);
        let blend = BlendedMap::new(vec![(region, f.clone())], 0.5).unwrap();
        for i in 0..=20 {
            let x = [i as f64 / 20.0];
            assert_eq!(blend.jet(&x), f.jet(&x));
        }
        let a = Region::new(vec![0.0], vec![1.0]);
        let b = Region::new(vec![0.5], vec![2.0]);
        assert!(matches!(BlendedMap::new(vec![(a, f.clone()), (b, f)], 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn scaled_identity_bounds_independent_of_u() {
        let base = ScaledIdentity::new(2, 1.0);
        let pts = grid_points(&[-2.5, -2.5], &[2.5, 2.5], 0.05);
        let sup = |m: &ScaledIdentity, scale: f64| {
            pts.iter()
                .map(|p| {
                    let x: Vec<f64> = p.iter().map(|v| v * scale).collect();
                    let j = m.jet(&x);
                    (
                        j.jac.iter().map(|v| v.abs()).fold(0.0, f64::max),
                        j.hess.iter().map(|v| v.abs()).fold(0.0, f64::max),
                    )
                })
                .fold((0.0f64, 0.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1)))
        };
        let (d1, d2) = sup(&base, 1.0);
        for u in [1.0, 2.0, 5.0, 40.0] {
            let m = ScaledIdentity::new(2, u);
            let (e1, e2) = sup(&m, u);
            assert!(e1 <= d1 + 1e-12 && e2 <= d2 + 1e-12, "u = {u}");
            let x = [0.7 * u, -0.9 * u];
            assert_eq!(m.eval(&x), x.to_vec());
        }
    }

    #[test]
    fn sampled_form_interpolates_exact_form() {
        let h = auto(ExprMap::from_strs(&["x", "y"], &["x*y + x^2"]).unwrap());
        let form = ExactForm(h);
        let pts = grid_points(&[0.0, 0.0], &[1.0, 1.0], 1.0 / 32.0);
        let jet = LipJet::from_form(&form, &pts, 1.5).unwrap();
        let sampled = OneFormJet::new(jet, None).unwrap();
        let x = [0.31, 0.77];
        let want = form.value(&x);
        let got = sampled.value(&x);
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn jet_json_round_trip() {
        let j = LipJet::from_map(expr("x^2").as_ref(), &unit_grid()[..3], 2.0).unwrap().with_declared(2.0);
        let s = serde_json::to_string(&j).unwrap();
        assert!(s.contains("\"f1\""));
        let back: LipJet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, j);
    }
}
