//! Signature lifts of polylines and grid-based multiplicative functionals:
//! Chen products, restriction and concatenation, controls, p-variation, the
//! d_p metric and numerical extension to higher levels.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::integral::beta_const;
use crate::tensor::TruncatedTensor;

/// Relative tolerance used to identify grid times.
pub const TIME_EPS: f64 = 1e-12;

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIME_EPS * (1.0 + a.abs().max(b.abs()))
}

/// A piecewise-linear path sampled at strictly increasing times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledPath {
    times: Vec<f64>,
    points: Vec<Vec<f64>>,
}

impl SampledPath {
    pub fn new(times: Vec<f64>, points: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Invalid("a path needs at least one segment".into()));
        }
        if times.len() != points.len() {
            return Err(Error::Shape(format!("{} times but {} points", times.len(), points.len())));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Shape("points must share a positive dimension".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("times must be finite and strictly increasing".into()));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("points must be finite".into()));
        }
        Ok(SampledPath { times, points })
    }

    /// Uniform time grid on `[0, 1]`.
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let m = points.len().saturating_sub(1).max(1);
        let times = (0..points.len()).map(|k| k as f64 / m as f64).collect();
        Self::new(times, points)
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn segments(&self) -> usize {
        self.times.len() - 1
    }
}

/// A multiplicative functional stored through its increments over adjacent grid points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassicalRoughPath {
    dim: usize,
    p: f64,
    level: usize,
    grid: Vec<f64>,
    increments: Vec<TruncatedTensor>,
    start: Vec<f64>,
    #[serde(default = "one")]
    control_scale: f64,
}

fn one() -> f64 {
    1.0
}

/// Level-`n` signature of a polyline; `p` defaults to `n`.
pub fn signature(path: &SampledPath, level: usize) -> Result<ClassicalRoughPath> {
    let d = path.dim();
    let increments = path
        .points
        .windows(2)
        .map(|w| {
            let delta: Vec<f64> = w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect();
            TruncatedTensor::from_vector(&delta, level).map(|t| t.exp_unchecked())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassicalRoughPath {
        dim: d,
        p: level as f64,
        level,
        grid: path.times.clone(),
        increments,
        start: path.points[0].clone(),
        control_scale: 1.0,
    })
}

impl ClassicalRoughPath {
    pub fn from_increments(grid: Vec<f64>, increments: Vec<TruncatedTensor>, start: Vec<f64>, p: f64) -> Result<Self> {
        if increments.is_empty() || grid.len() != increments.len() + 1 {
            return Err(Error::Shape(format!("{} grid points for {} increments", grid.len(), increments.len())));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("grid must be strictly increasing".into()));
        }
        let (dim, level) = (increments[0].dim(), increments[0].level());
        if increments.iter().any(|x| x.dim() != dim || x.level() != level) {
            return Err(Error::Shape("increments must share dimension and level".into()));
        }
        if increments.iter().any(|x| (x.coeffs()[0] - 1.0).abs() > 1e-12) {
            return Err(Error::Domain("increments must have grade-0 coefficient 1".into()));
        }
        if start.len() != dim {
            return Err(Error::Shape(format!("start has dimension {}, expected {dim}", start.len())));
        }
        let path = ClassicalRoughPath { dim, p: 1.0, level, grid, increments, start, control_scale: 1.0 };
        path.with_p(p)
    }

    /// Constant path of the given dimension and level on `[t0, t1]`.
    pub fn constant(start: Vec<f64>, level: usize, t0: f64, t1: f64) -> Result<Self> {
        let one = TruncatedTensor::one(start.len(), level)?;
        Self::from_increments(vec![t0, t1], vec![one], start, level as f64)
    }

    /// Set the roughness exponent; requires `level ≥ ⌊p⌋`.
    pub fn with_p(mut self, p: f64) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::Invalid(format!("p = {p} must be ≥ 1")));
        }
        if (p.floor() as usize) > self.level {
            return Err(Error::Invalid(format!("level {} below ⌊p⌋ for p = {p}", self.level)));
        }
        self.p = p;
        Ok(self)
    }

    pub fn with_start(mut self, start: Vec<f64>) -> Result<Self> {
        if start.len() != self.dim {
            return Err(Error::Shape("start dimension".into()));
        }
        self.start = start;
        Ok(self)
    }

    pub fn with_control_scale(mut self, scale: f64) -> Self {
        self.control_scale = scale;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn increments(&self) -> &[TruncatedTensor] {
        &self.increments
    }

    pub fn segments(&self) -> usize {
        self.increments.len()
    }

    pub fn t0(&self) -> f64 {
        self.grid[0]
    }

    pub fn t1(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// `X_{t_i, t_j}` as an ordered product of segment increments.
    pub fn increment(&self, i: usize, j: usize) -> TruncatedTensor {
        assert!(i <= j && j < self.grid.len(), "grid indices out of range");
        let mut acc = TruncatedTensor::one_unchecked(self.dim, self.level);
        for x in &self.increments[i..j] {
            acc = acc.product(x);
        }
        acc
    }

    /// `X_{0,T}`.
    pub fn total(&self) -> TruncatedTensor {
        self.increment(0, self.segments())
    }

    /// Index of the segment containing `t` (the last one for `t = T`).
    pub fn segment_of(&self, t: f64) -> usize {
        let k = self.grid.partition_point(|&g| g <= t);
        k.clamp(1, self.segments()) - 1
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if t < self.t0() - TIME_EPS * (1.0 + self.t0().abs()) || t > self.t1() + TIME_EPS * (1.0 + self.t1().abs()) {
            return Err(Error::Interval(format!("time {t} outside [{}, {}]", self.t0(), self.t1())));
        }
        let k = self.segment_of(t);
        let lam = ((t - self.grid[k]) / (self.grid[k + 1] - self.grid[k])).clamp(0.0, 1.0);
        Ok((k, lam))
    }

    /// Portion `[λ0, λ1] ⊂ [0, 1]` of segment `k`, by geodesic interpolation `exp(λ log X_k)`.
    pub fn sub_increment(&self, k: usize, lam0: f64, lam1: f64) -> TruncatedTensor {
        if lam0 == 0.0 && lam1 == 1.0 {
            return self.increments[k].clone();
        }
        self.increments[k].log_unchecked().scale(lam1 - lam0).exp_unchecked()
    }

    /// `X_{s,t}` for arbitrary times in the span (geodesic interpolation inside segments).
    pub fn increment_between(&self, s: f64, t: f64) -> Result<TruncatedTensor> {
        if t < s {
            return Err(Error::Interval(format!("increment over [{s}, {t}]")));
        }
        let (ks, ls) = self.locate(s)?;
        let (kt, lt) = self.locate(t)?;
        if ks == kt {
            return Ok(self.sub_increment(ks, ls, lt));
        }
        let mut acc = self.sub_increment(ks, ls, 1.0);
        for x in &self.increments[ks + 1..kt] {
            acc = acc.product(x);
        }
        Ok(acc.product(&self.sub_increment(kt, 0.0, lt)))
    }

    /// Level-1 trace `start + X¹_{0,t_k}` at every grid point.
    pub fn trace(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.grid.len());
        let mut x = self.start.clone();
        out.push(x.clone());
        for inc in &self.increments {
            for (xi, di) in x.iter_mut().zip(inc.grade(1)) {
                *xi += di;
            }
            out.push(x.clone());
        }
        out
    }

    /// Level-1 trace at an arbitrary time.
    pub fn trace_at(&self, t: f64) -> Result<Vec<f64>> {
        let inc = self.increment_between(self.t0(), t)?;
        Ok(self.start.iter().zip(inc.grade(1)).map(|(a, b)| a + b).collect())
    }

    /// The same functional on a finer grid (a superset of the current grid with equal endpoints).
    pub fn refine_to(&self, grid: &[f64]) -> Result<Self> {
        if !same_time(grid[0], self.t0()) || !same_time(*grid.last().unwrap(), self.t1()) {
            return Err(Error::Interval("refinement must keep the endpoints".into()));
        }
        let mut increments = Vec::with_capacity(grid.len() - 1);
        let mut k = 0;
        let mut r = 0;
        for seg in 0..self.segments() {
            let (a, b) = (self.grid[seg], self.grid[seg + 1]);
            if !same_time(grid[r], a) {
                return Err(Error::Interval(format!("grid point {a} missing from refinement")));
            }
            let mut inner = vec![0.0];
            r += 1;
            while r < grid.len() && !same_time(grid[r], b) && grid[r] < b {
                inner.push((grid[r] - a) / (b - a));
                r += 1;
            }
            inner.push(1.0);
            if inner.len() == 2 {
                increments.push(self.increments[seg].clone());
            } else {
                let log = self.increments[seg].log_unchecked();
                for w in inner.windows(2) {
                    increments.push(log.scale(w[1] - w[0]).exp_unchecked());
                }
            }
            k += 1;
        }
        debug_assert_eq!(k, self.segments());
        let mut out = self.clone();
        out.grid = grid.to_vec();
        *out.grid.first_mut().unwrap() = self.t0();
        *out.grid.last_mut().unwrap() = self.t1();
        out.increments = increments;
        Ok(out)
    }

    /// Insert a grid point at `t` (no-op if already present).
    pub fn insert_time(&self, t: f64) -> Result<Self> {
        let (k, lam) = self.locate(t)?;
        if lam <= TIME_EPS || lam >= 1.0 - TIME_EPS || same_time(self.grid[k], t) || same_time(self.grid[k + 1], t) {
            return Ok(self.clone());
        }
        let mut grid = self.grid.clone();
        grid.insert(k + 1, t);
        self.refine_to(&grid)
    }

    /// The part over grid indices `i..=j`, started at the trace at `t_i`.
    pub fn slice(&self, i: usize, j: usize) -> Result<Self> {
        if !(i < j && j < self.grid.len()) {
            return Err(Error::Interval(format!("grid slice {i}..={j} of {} points", self.grid.len())));
        }
        let mut start = self.start.clone();
        for inc in &self.increments[..i] {
            start.iter_mut().zip(inc.grade(1)).for_each(|(a, b)| *a += b);
        }
        let mut out = self.clone();
        out.grid = self.grid[i..=j].to_vec();
        out.increments = self.increments[i..j].to_vec();
        out.start = start;
        Ok(out)
    }

    /// The same functional on a subgrid with equal endpoints (increments multiplied out).
    pub fn coarsen_to(&self, grid: &[f64]) -> Result<Self> {
        let mut idx = Vec::with_capacity(grid.len());
        let mut r = 0;
        for &t in grid {
            while r < self.grid.len() && !same_time(self.grid[r], t) {
                r += 1;
            }
            if r == self.grid.len() {
                return Err(Error::Interval(format!("time {t} is not a grid point")));
            }
            idx.push(r);
        }
        if idx[0] != 0 || *idx.last().unwrap() != self.segments() {
            return Err(Error::Interval("coarsening must keep the endpoints".into()));
        }
        let mut out = self.clone();
        out.grid = idx.iter().map(|&k| self.grid[k]).collect();
        out.increments = idx.windows(2).map(|w| self.increment(w[0], w[1])).collect();
        Ok(out)
    }

    /// Coordinate projection onto `coords`.
    pub fn project(&self, coords: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        out.increments = self.increments.iter().map(|x| x.project(coords)).collect::<Result<_>>()?;
        out.start = coords.iter().map(|&c| self.start[c]).collect();
        out.dim = coords.len();
        Ok(out)
    }

    /// Coordinate inclusion into `R^dim`; coordinates not hit start at `fill`.
    pub fn embed(&self, dim: usize, slots: &[usize], fill: &[f64]) -> Result<Self> {
        if fill.len() != dim {
            return Err(Error::Shape(format!("fill has dimension {}, expected {dim}", fill.len())));
        }
        let mut out = self.clone();
        out.increments = self.increments.iter().map(|x| x.embed(dim, slots)).collect::<Result<_>>()?;
        out.start = fill.to_vec();
        for (i, &s) in slots.iter().enumerate() {
            out.start[s] = self.start[i];
        }
        out.dim = dim;
        Ok(out)
    }

    pub(crate) fn increments_mut(&mut self) -> &mut [TruncatedTensor] {
        &mut self.increments
    }

    pub fn control(&self) -> ControlEstimate<'_> {
        ControlEstimate { path: self, beta: beta_const(self.p), scale: self.control_scale }
    }
}

/// Union of two grids over the same interval, merging times closer than the tolerance.
pub fn merge_grids(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = if j >= b.len() || (i < a.len() && a[i] <= b[j]) {
            i += 1;
            a[i - 1]
        } else {
            j += 1;
            b[j - 1]
        };
        if out.last().map_or(true, |&l| !same_time(l, next)) {
            out.push(next);
        }
    }
    out
}

/// Restriction to `[s, t]`, inserting grid points when needed; the start becomes the trace at `s`.
pub fn restrict(x: &ClassicalRoughPath, s: f64, t: f64) -> Result<ClassicalRoughPath> {
    if !(t > s) {
        return Err(Error::Interval(format!("empty interval [{s}, {t}]")));
    }
    let y = x.insert_time(s)?.insert_time(t)?;
    let i = y.grid.iter().position(|&g| same_time(g, s)).unwrap();
    let j = y.grid.iter().position(|&g| same_time(g, t)).unwrap();
    let start = y.trace_at(y.grid[i])?;
    let mut out = y.clone();
    out.grid = y.grid[i..=j].to_vec();
    out.increments = y.increments[i..j].to_vec();
    out.start = start;
    Ok(out)
}

/// Classical concatenation of `z` over `[s,t]` and `y` over `[t,u]`; the start is `z`'s.
pub fn concat_classical(z: &ClassicalRoughPath, y: &ClassicalRoughPath) -> Result<ClassicalRoughPath> {
    if z.dim != y.dim || z.level != y.level {
        return Err(Error::Shape("concatenated paths must share dimension and level".into()));
    }
    if !same_time(z.t1(), y.t0()) {
        return Err(Error::Interval(format!("first path ends at {}, second starts at {}", z.t1(), y.t0())));
    }
    let mut out = z.clone();
    out.grid.extend_from_slice(&y.grid[1..]);
    out.increments.extend_from_slice(&y.increments);
    out.p = z.p.max(y.p);
    Ok(out)
}

/// The p-variation control `ω(s,t) = sup_D Σ φ(X_{u,v})`, `φ(X) = max_i (β·Γ(i/p+1)·‖X^i‖)^{p/i}`,
/// computed exactly over the stored grid and multiplied by `scale`.
#[derive(Clone, Copy, Debug)]
pub struct ControlEstimate<'a> {
    path: &'a ClassicalRoughPath,
    pub beta: f64,
    pub scale: f64,
}

impl<'a> ControlEstimate<'a> {
    /// `φ` of a single increment.
    pub fn local(&self, x: &TruncatedTensor) -> f64 {
        let p = self.path.p;
        (1..=x.level())
            .map(|i| {
                let c = self.beta * gamma(i as f64 / p + 1.0) * x.grade_norm(i);
                c.powf(p / i as f64)
            })
            .fold(0.0, f64::max)
    }

    /// `ω(t_i, t_k)` for `k = i..`, stopping after the first value above `limit`.
    pub fn omega_row(&self, i: usize, limit: f64) -> Vec<f64> {
        let x = self.path;
        let m = x.segments();
        let mut v = vec![0.0];
        for j in i + 1..=m {
            let mut acc = TruncatedTensor::one_unchecked(x.dim, x.level);
            let mut best: f64 = 0.0;
            for k in (i..j).rev() {
                acc = x.increments[k].product(&acc);
                best = best.max(v[k - i] + self.scale * self.local(&acc));
            }
            v.push(best);
            if best > limit {
                break;
            }
        }
        v
    }

    pub fn omega(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.omega_row(i, f64::INFINITY)[j - i]
    }

    /// Full table `ω(t_i, t_j)`, `i ≤ j` (row `i` holds entries for `j ≥ i`).
    pub fn table(&self) -> Vec<Vec<f64>> {
        (0..=self.path.segments()).map(|i| self.omega_row(i, f64::INFINITY)).collect()
    }
}

fn dp_core(x: &ClassicalRoughPath, y: Option<&ClassicalRoughPath>, p: f64) -> f64 {
    let m = x.segments();
    let n = x.level;
    let mut best = vec![vec![0.0f64; m + 1]; n + 1];
    for j in 1..=m {
        let mut ax = TruncatedTensor::one_unchecked(x.dim, n);
        let mut ay = ax.clone();
        let mut cur = vec![0.0f64; n + 1];
        for k in (0..j).rev() {
            ax = x.increments[k].product(&ax);
            if let Some(y) = y {
                ay = y.increments[k].product(&ay);
            }
            for i in 1..=n {
                let diff: f64 = if y.is_some() {
                    ax.grade(i).iter().zip(ay.grade(i)).map(|(a, b)| (a - b).abs()).sum()
                } else {
                    ax.grade_norm(i)
                };
                let v = best[i][k] + diff.powf(p / i as f64);
                if v > cur[i] {
                    cur[i] = v;
                }
            }
        }
        for i in 1..=n {
            best[i][j] = cur[i];
        }
    }
    (1..=n).map(|i| best[i][m].powf(i as f64 / p)).fold(0.0, f64::max)
}

/// p-variation of `x` over its grid: `d_p` against the constant path.
pub fn p_variation(x: &ClassicalRoughPath, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::Invalid(format!("p = {p} must be ≥ 1")));
    }
    Ok(dp_core(x, None, p))
}

/// p-variation distance, exact over the merged grid; `p` is the larger of the two exponents.
pub fn d_p(x: &ClassicalRoughPath, y: &ClassicalRoughPath) -> Result<f64> {
    d_p_with(x, y, x.p.max(y.p))
}

pub fn d_p_with(x: &ClassicalRoughPath, y: &ClassicalRoughPath, p: f64) -> Result<f64> {
    if x.dim != y.dim || x.level != y.level {
        return Err(Error::Shape("d_p requires equal dimension and level".into()));
    }
    if !same_time(x.t0(), y.t0()) || !same_time(x.t1(), y.t1()) {
        return Err(Error::Interval("d_p requires a common time interval".into()));
    }
    if x.grid.len() == y.grid.len() && x.grid.iter().zip(&y.grid).all(|(a, b)| same_time(*a, *b)) {
        return Ok(dp_core(x, Some(y), p));
    }
    let grid = merge_grids(&x.grid, &y.grid);
    let xr = x.refine_to(&grid)?;
    let yr = y.refine_to(&grid)?;
    Ok(dp_core(&xr, Some(&yr), p))
}

/// Diagnostics of [`extend`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendReport {
    pub max_levels: usize,
    pub worst_residual: f64,
}

/// Extension of a degree-`⌊p⌋` functional to degree `m` by the dyadic limit
/// `lim_R (exp_n(L/2^R) padded)^{⊗2^R}` with `L = log_n X_k` on each segment.
pub fn extend(x: &ClassicalRoughPath, m: usize) -> Result<ClassicalRoughPath> {
    extend_with_report(x, m).map(|(p, _)| p)
}

pub fn extend_with_report(x: &ClassicalRoughPath, m: usize) -> Result<(ClassicalRoughPath, ExtendReport)> {
    const MAX_LEVELS: usize = 48;
    const TOL: f64 = 1e-14;
    if m <= x.level {
        return Err(Error::Invalid(format!("target level {m} must exceed {}", x.level)));
    }
    TruncatedTensor::zero(x.dim, m)?;
    let mut report = ExtendReport { max_levels: 0, worst_residual: 0.0 };
    let mut increments = Vec::with_capacity(x.segments());
    for inc in &x.increments {
        let log = inc.log_unchecked();
        let mut prev: Option<TruncatedTensor> = None;
        let mut prev_diff = f64::INFINITY;
        let mut done = None;
        for r in 1..=MAX_LEVELS {
            let piece = log.scale(0.5f64.powi(r as i32)).exp_unchecked().with_level(m)?;
            let mut y = piece;
            for _ in 0..r {
                y = y.product(&y);
            }
            if let Some(p) = &prev {
                let diff = y.sub(p).coeffs().iter().map(|c| c.abs()).sum::<f64>();
                let size = 1.0 + y.coeffs().iter().map(|c| c.abs()).sum::<f64>();
                if diff <= TOL * size {
                    report.max_levels = report.max_levels.max(r);
                    report.worst_residual = report.worst_residual.max(diff);
                    done = Some(y);
                    break;
                }
                if r > 8 && diff > 0.9 * prev_diff && diff > 1e-10 * size {
                    return Err(Error::Numeric(format!(
                        "extension residual not contracting at level {r}: ratio {:.3}",
                        diff / prev_diff
                    )));
                }
                prev_diff = diff;
            }
            prev = Some(y);
        }
        match done {
            Some(y) => increments.push(y),
            None => {
                // Round-off floor reached: accept when the residual is tiny in absolute terms.
                let y = prev.unwrap();
                if prev_diff > 1e-10 * (1.0 + y.max_norm()) {
                    return Err(Error::Numeric(format!("extension did not converge, last residual {prev_diff:e}")));
                }
                report.max_levels = MAX_LEVELS;
                report.worst_residual = report.worst_residual.max(prev_diff);
                increments.push(y);
            }
        }
    }
    let mut out = x.clone();
    out.level = m;
    out.increments = increments;
    Ok((out, report))
}
