//! Smooth maps and one-forms with analytic first and second derivatives.
//!
//! Maps written once against the [`Scalar`] trait are differentiated by
//! forward-mode second-order jets ([`Jet2`]). One-forms are fields of linear
//! maps `x ↦ α(x) ∈ L(R^d, R^e)` over points `x ∈ R^n`.
//!
//! Layouts (all row-major):
//! - map Jacobian `jac[a*n + i] = ∂_i f_a`, Hessian `hess[(a*n + i)*n + j]`;
//! - form value `value[a*d + j] = α(x)_{a j}`, derivative
//!   `deriv[(a*n + i)*d + j] = ∂_i α(x)_{a j}`.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

pub trait Scalar:
    Copy
    + Send
    + Sync
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + 'static
{
    fn cst(c: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn atan(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, k: i32) -> Self;
    fn powf(self, p: f64) -> Self;

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn recip(self) -> Self {
        Self::cst(1.0) / self
    }
}

impl Scalar for f64 {
    fn cst(c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tan(self) -> Self {
        f64::tan(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn powi(self, k: i32) -> Self {
        f64::powi(self, k)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
}

/// Second-order forward-mode jet in `N` variables.
#[derive(Clone, Copy, Debug)]
pub struct Jet2<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> Jet2<N> {
    pub fn constant(v: f64) -> Self {
        Jet2 { v, g: [0.0; N], h: [[0.0; N]; N] }
    }

    pub fn variable(v: f64, i: usize) -> Self {
        let mut j = Self::constant(v);
        j.g[i] = 1.0;
        j
    }

    /// Apply a scalar function given its value and first two derivatives at `self.v`.
    #[inline]
    fn chain(self, f: f64, d1: f64, d2: f64) -> Self {
        let mut out = Self::constant(f);
        for i in 0..N {
            out.g[i] = d1 * self.g[i];
            for j in 0..N {
                out.h[i][j] = d1 * self.h[i][j] + d2 * self.g[i] * self.g[j];
            }
        }
        out
    }
}

impl<const N: usize> Add for Jet2<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for i in 0..N {
            self.g[i] += o.g[i];
            for j in 0..N {
                self.h[i][j] += o.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Sub for Jet2<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for i in 0..N {
            self.g[i] -= o.g[i];
            for j in 0..N {
                self.h[i][j] -= o.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Mul for Jet2<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut out = Self::constant(self.v * o.v);
        for i in 0..N {
            out.g[i] = self.g[i] * o.v + self.v * o.g[i];
            for j in 0..N {
                out.h[i][j] = self.h[i][j] * o.v
                    + self.v * o.h[i][j]
                    + self.g[i] * o.g[j]
                    + o.g[i] * self.g[j];
            }
        }
        out
    }
}

impl<const N: usize> Div for Jet2<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let r = 1.0 / o.v;
        self * o.chain(r, -r * r, 2.0 * r * r * r)
    }
}

impl<const N: usize> Neg for Jet2<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<const N: usize> Add<f64> for Jet2<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, c: f64) -> Self {
        self.v += c;
        self
    }
}

impl<const N: usize> Sub<f64> for Jet2<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, c: f64) -> Self {
        self.v -= c;
        self
    }
}

impl<const N: usize> Mul<f64> for Jet2<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, c: f64) -> Self {
        self.v *= c;
        for i in 0..N {
            self.g[i] *= c;
            for j in 0..N {
                self.h[i][j] *= c;
            }
        }
        self
    }
}

impl<const N: usize> Div<f64> for Jet2<N> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self * (1.0 / c)
    }
}

impl<const N: usize> Scalar for Jet2<N> {
    fn cst(c: f64) -> Self {
        Self::constant(c)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn tan(self) -> Self {
        let t = self.v.tan();
        let d1 = 1.0 + t * t;
        self.chain(t, d1, 2.0 * t * d1)
    }
    fn atan(self) -> Self {
        let q = 1.0 / (1.0 + self.v * self.v);
        self.chain(self.v.atan(), q, -2.0 * self.v * q * q)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn ln(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        let d1 = 1.0 - t * t;
        self.chain(t, d1, -2.0 * t * d1)
    }
    fn powi(self, k: i32) -> Self {
        let kf = k as f64;
        let d2 = if k == 0 || k == 1 { 0.0 } else { kf * (kf - 1.0) * self.v.powi(k - 2) };
        let d1 = if k == 0 { 0.0 } else { kf * self.v.powi(k - 1) };
        self.chain(self.v.powi(k), d1, d2)
    }
    fn powf(self, p: f64) -> Self {
        self.chain(self.v.powf(p), p * self.v.powf(p - 1.0), p * (p - 1.0) * self.v.powf(p - 2.0))
    }
}

/// Value, Jacobian and Hessian of a map `R^n → R^e` at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct MapJet {
    pub value: Vec<f64>,
    pub jac: Vec<f64>,
    pub hess: Vec<f64>,
}

pub trait SmoothMap: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Vec<f64>;
    fn jet(&self, x: &[f64]) -> MapJet;
}

/// A map written once over any [`Scalar`]; wrap it in [`Auto`] to obtain a [`SmoothMap`].
pub trait GenericMap: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S>;
}

/// Automatic differentiation wrapper.
#[derive(Clone, Debug)]
pub struct Auto<F>(pub F);

pub fn auto<F: GenericMap + 'static>(f: F) -> Arc<dyn SmoothMap> {
    Arc::new(Auto(f))
}

fn jet_with<const N: usize, F: GenericMap>(f: &F, x: &[f64]) -> MapJet {
    let n = x.len();
    let vars: Vec<Jet2<N>> = x.iter().enumerate().map(|(i, &v)| Jet2::variable(v, i)).collect();
    let out = f.apply(&vars);
    let e = out.len();
    let mut jet = MapJet { value: vec![0.0; e], jac: vec![0.0; e * n], hess: vec![0.0; e * n * n] };
    for (a, o) in out.iter().enumerate() {
        jet.value[a] = o.v;
        for i in 0..n {
            jet.jac[a * n + i] = o.g[i];
            for j in 0..n {
                jet.hess[(a * n + i) * n + j] = o.h[i][j];
            }
        }
    }
    jet
}

impl<F: GenericMap> SmoothMap for Auto<F> {
    fn dim_in(&self) -> usize {
        self.0.dim_in()
    }
    fn dim_out(&self) -> usize {
        self.0.dim_out()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.0.apply(x)
    }
    fn jet(&self, x: &[f64]) -> MapJet {
        match x.len() {
            0..=1 => jet_with::<1, F>(&self.0, x),
            2 => jet_with::<2, F>(&self.0, x),
            3 => jet_with::<3, F>(&self.0, x),
            4 => jet_with::<4, F>(&self.0, x),
            5..=6 => jet_with::<6, F>(&self.0, x),
            7..=8 => jet_with::<8, F>(&self.0, x),
            9..=12 => jet_with::<12, F>(&self.0, x),
            _ => jet_with::<24, F>(&self.0, x),
        }
    }
}

/// The identity map on `R^n`.
#[derive(Clone, Debug)]
pub struct IdentityMap(pub usize);

impl GenericMap for IdentityMap {
    fn dim_in(&self) -> usize {
        self.0
    }
    fn dim_out(&self) -> usize {
        self.0
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        x.to_vec()
    }
}

/// An affine map `x ↦ A x + b` with `A` row-major `e×n`.
#[derive(Clone, Debug)]
pub struct AffineMap {
    pub n: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl GenericMap for AffineMap {
    fn dim_in(&self) -> usize {
        self.n
    }
    fn dim_out(&self) -> usize {
        self.b.len()
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        self.b
            .iter()
            .enumerate()
            .map(|(r, &b)| {
                let mut acc = S::cst(b);
                for (i, xi) in x.iter().enumerate() {
                    let c = self.a[r * self.n + i];
                    if c != 0.0 {
                        acc = acc + *xi * c;
                    }
                }
                acc
            })
            .collect()
    }
}

/// Multivariate polynomial map: per output a list of `(coefficient, exponents)` monomials.
#[derive(Clone, Debug)]
pub struct Polynomial {
    pub n: usize,
    pub terms: Vec<Vec<(f64, Vec<u32>)>>,
}

impl Polynomial {
    /// Random polynomial with total degree ≤ `degree` and coefficients in `[-scale, scale]`.
    pub fn random<R: rand::Rng>(n: usize, e: usize, degree: u32, scale: f64, rng: &mut R) -> Self {
        let mut monomials = vec![vec![]];
        for _ in 0..n {
            let mut next = Vec::new();
            for m in &monomials {
                for k in 0..=degree {
                    let mut m2: Vec<u32> = m.clone();
                    m2.push(k);
                    if m2.iter().sum::<u32>() <= degree {
                        next.push(m2);
                    }
                }
            }
            monomials = next;
        }
        let terms = (0..e)
            .map(|_| monomials.iter().map(|m| (rng.gen_range(-scale..scale), m.clone())).collect())
            .collect();
        Polynomial { n, terms }
    }
}

impl GenericMap for Polynomial {
    fn dim_in(&self) -> usize {
        self.n
    }
    fn dim_out(&self) -> usize {
        self.terms.len()
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        self.terms
            .iter()
            .map(|terms| {
                let mut acc = S::cst(0.0);
                for (c, exps) in terms {
                    if *c == 0.0 {
                        continue;
                    }
                    let mut m = S::cst(*c);
                    for (xi, &k) in x.iter().zip(exps) {
                        if k > 0 {
                            m = m * xi.powi(k as i32);
                        }
                    }
                    acc = acc + m;
                }
                acc
            })
            .collect()
    }
}

/// `outer ∘ inner`, with jets composed by the second-order chain rule.
pub struct Compose {
    pub outer: Arc<dyn SmoothMap>,
    pub inner: Arc<dyn SmoothMap>,
}

impl SmoothMap for Compose {
    fn dim_in(&self) -> usize {
        self.inner.dim_in()
    }
    fn dim_out(&self) -> usize {
        self.outer.dim_out()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.outer.eval(&self.inner.eval(x))
    }
    fn jet(&self, x: &[f64]) -> MapJet {
        let ji = self.inner.jet(x);
        let jo = self.outer.jet(&ji.value);
        compose_jets(&jo, &ji, self.inner.dim_in())
    }
}

/// Jet of `g∘f` from the jet of `g` at `f(x)` and the jet of `f` at `x`.
pub fn compose_jets(g: &MapJet, f: &MapJet, n: usize) -> MapJet {
    let m = f.value.len();
    let e = g.value.len();
    let mut jac = vec![0.0; e * n];
    let mut hess = vec![0.0; e * n * n];
    for a in 0..e {
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..m {
                s += g.jac[a * m + k] * f.jac[k * n + i];
            }
            jac[a * n + i] = s;
        }
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..m {
                    let gk = g.jac[a * m + k];
                    s += gk * f.hess[(k * n + i) * n + j];
                    for l in 0..m {
                        s += g.hess[(a * m + k) * m + l] * f.jac[k * n + i] * f.jac[l * n + j];
                    }
                }
                hess[(a * n + i) * n + j] = s;
            }
        }
    }
    MapJet { value: g.value.clone(), jac, hess }
}

/// Value and first derivative of a one-form at a point (layouts in the module docs).
#[derive(Clone, Debug, PartialEq)]
pub struct FormJet {
    pub value: Vec<f64>,
    pub deriv: Vec<f64>,
}

pub trait OneForm: Send + Sync {
    /// Dimension `n` of the base point.
    fn point_dim(&self) -> usize;
    /// Dimension `d` of the tangent input.
    fn input_dim(&self) -> usize;
    /// Dimension `e` of the output.
    fn output_dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Vec<f64> {
        self.jet(x).value
    }
    fn jet(&self, x: &[f64]) -> FormJet;
    /// Second derivative `[(a*n + i)*n + k)*d + j]`, when available.
    fn second_deriv(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// `dx` on `R^d`: the identity linear map everywhere.
#[derive(Clone, Debug)]
pub struct IdentityForm(pub usize);

impl OneForm for IdentityForm {
    fn point_dim(&self) -> usize {
        self.0
    }
    fn input_dim(&self) -> usize {
        self.0
    }
    fn output_dim(&self) -> usize {
        self.0
    }
    fn jet(&self, _x: &[f64]) -> FormJet {
        let d = self.0;
        let mut value = vec![0.0; d * d];
        for i in 0..d {
            value[i * d + i] = 1.0;
        }
        FormJet { value, deriv: vec![0.0; d * d * d] }
    }
    fn second_deriv(&self, _x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.0.pow(4)])
    }
}

/// A constant linear map `A ∈ L(R^d, R^e)` over points of `R^n`.
#[derive(Clone, Debug)]
pub struct ConstantForm {
    pub n: usize,
    pub e: usize,
    pub d: usize,
    pub a: Vec<f64>,
}

impl OneForm for ConstantForm {
    fn point_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.d
    }
    fn output_dim(&self) -> usize {
        self.e
    }
    fn jet(&self, _x: &[f64]) -> FormJet {
        FormJet { value: self.a.clone(), deriv: vec![0.0; self.e * self.n * self.d] }
    }
    fn second_deriv(&self, _x: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.e * self.n * self.n * self.d])
    }
}

/// The exact form `dh` of a smooth map `h: R^n → R^e`.
pub struct ExactForm(pub Arc<dyn SmoothMap>);

impl OneForm for ExactForm {
    fn point_dim(&self) -> usize {
        self.0.dim_in()
    }
    fn input_dim(&self) -> usize {
        self.0.dim_in()
    }
    fn output_dim(&self) -> usize {
        self.0.dim_out()
    }
    fn value(&self, x: &[f64]) -> Vec<f64> {
        self.0.jet(x).jac
    }
    fn jet(&self, x: &[f64]) -> FormJet {
        let j = self.0.jet(x);
        FormJet { value: j.jac, deriv: j.hess }
    }
}

/// A form whose entries are given by a smooth map `R^n → R^{e·d}` (row-major `e×d`).
pub struct MapForm {
    pub map: Arc<dyn SmoothMap>,
    pub e: usize,
    pub d: usize,
}

impl MapForm {
    pub fn new(map: Arc<dyn SmoothMap>, e: usize, d: usize) -> Self {
        assert_eq!(map.dim_out(), e * d, "map output must have e*d entries");
        MapForm { map, e, d }
    }
}

impl OneForm for MapForm {
    fn point_dim(&self) -> usize {
        self.map.dim_in()
    }
    fn input_dim(&self) -> usize {
        self.d
    }
    fn output_dim(&self) -> usize {
        self.e
    }
    fn value(&self, x: &[f64]) -> Vec<f64> {
        self.map.eval(x)
    }
    fn jet(&self, x: &[f64]) -> FormJet {
        let j = self.map.jet(x);
        let (n, e, d) = (x.len(), self.e, self.d);
        let mut deriv = vec![0.0; e * n * d];
        for a in 0..e {
            for jj in 0..d {
                for i in 0..n {
                    deriv[(a * n + i) * d + jj] = j.jac[(a * d + jj) * n + i];
                }
            }
        }
        FormJet { value: j.value, deriv }
    }
    fn second_deriv(&self, x: &[f64]) -> Option<Vec<f64>> {
        let j = self.map.jet(x);
        let (n, e, d) = (x.len(), self.e, self.d);
        let mut out = vec![0.0; e * n * n * d];
        for a in 0..e {
            for jj in 0..d {
                for i in 0..n {
                    for k in 0..n {
                        out[((a * n + i) * n + k) * d + jj] = j.hess[((a * d + jj) * n + i) * n + k];
                    }
                }
            }
        }
        Some(out)
    }
}

/// Pullback `(h*α)(x) = α(h(x))·Dh(x)`.
pub struct Pullback {
    pub form: Arc<dyn OneForm>,
    pub map: Arc<dyn SmoothMap>,
}

impl OneForm for Pullback {
    fn point_dim(&self) -> usize {
        self.map.dim_in()
    }
    fn input_dim(&self) -> usize {
        self.map.dim_in()
    }
    fn output_dim(&self) -> usize {
        self.form.output_dim()
    }
    fn value(&self, x: &[f64]) -> Vec<f64> {
        let hj = self.map.jet(x);
        let a = self.form.value(&hj.value);
        let (e, m, n) = (self.form.output_dim(), self.map.dim_out(), x.len());
        let mut v = vec![0.0; e * n];
        for r in 0..e {
            for k in 0..m {
                let c = a[r * m + k];
                if c != 0.0 {
                    for j in 0..n {
                        v[r * n + j] += c * hj.jac[k * n + j];
                    }
                }
            }
        }
        v
    }
    fn jet(&self, x: &[f64]) -> FormJet {
        let hj = self.map.jet(x);
        let fj = self.form.jet(&hj.value);
        let (e, m, n) = (self.form.output_dim(), self.map.dim_out(), x.len());
        let mut value = vec![0.0; e * n];
        let mut deriv = vec![0.0; e * n * n];
        for r in 0..e {
            for k in 0..m {
                let c = fj.value[r * m + k];
                for j in 0..n {
                    value[r * n + j] += c * hj.jac[k * n + j];
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..m {
                        // ∂_i [α(h)]_{rk} = Σ_l ∂_l α_{rk} ∂_i h_l
                        let mut da = 0.0;
                        for l in 0..m {
                            da += fj.deriv[(r * m + l) * m + k] * hj.jac[l * n + i];
                        }
                        s += da * hj.jac[k * n + j] + fj.value[r * m + k] * hj.hess[(k * n + i) * n + j];
                    }
                    deriv[(r * n + i) * n + j] = s;
                }
            }
        }
        FormJet { value, deriv }
    }
}

/// Pointwise composition of linear maps: `x ↦ outer(x) ∘ inner(x)`.
pub struct LinearCompose {
    pub outer: Arc<dyn OneForm>,
    pub inner: Arc<dyn OneForm>,
}

impl OneForm for LinearCompose {
    fn point_dim(&self) -> usize {
        self.inner.point_dim()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.outer.output_dim()
    }
    fn jet(&self, x: &[f64]) -> FormJet {
        let o = self.outer.jet(x);
        let i = self.inner.jet(x);
        let (e, m, d, n) = (self.outer.output_dim(), self.inner.output_dim(), self.inner.input_dim(), x.len());
        let mut value = vec![0.0; e * d];
        let mut deriv = vec![0.0; e * n * d];
        for a in 0..e {
            for k in 0..m {
                let ok = o.value[a * m + k];
                for j in 0..d {
                    value[a * d + j] += ok * i.value[k * d + j];
                }
            }
            for p in 0..n {
                for j in 0..d {
                    let mut s = 0.0;
                    for k in 0..m {
                        s += o.deriv[(a * n + p) * m + k] * i.value[k * d + j]
                            + o.value[a * m + k] * i.deriv[(k * n + p) * d + j];
                    }
                    deriv[(a * n + p) * d + j] = s;
                }
            }
        }
        FormJet { value, deriv }
    }
}

/// `f(x)·α(x)` for a scalar smooth function `f`.
pub struct ScaledForm {
    pub f: Arc<dyn SmoothMap>,
    pub form: Arc<dyn OneForm>,
}

impl OneForm for ScaledForm {
    fn point_dim(&self) -> usize {
        self.form.point_dim()
    }
    fn input_dim(&self) -> usize {
        self.form.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.form.output_dim()
    }
    fn jet(&self, x: &[f64]) -> FormJet {
        let fj = self.f.jet(x);
        let f0 = fj.value[0];
        let n = x.len();
        let (e, d) = (self.output_dim(), self.input_dim());
        if f0 == 0.0 && fj.jac.iter().all(|&g| g == 0.0) {
            return FormJet { value: vec![0.0; e * d], deriv: vec![0.0; e * n * d] };
        }
        let aj = self.form.jet(x);
        let value = aj.value.iter().map(|v| v * f0).collect();
        let mut deriv = vec![0.0; e * n * d];
        for a in 0..e {
            for i in 0..n {
                for j in 0..d {
                    deriv[(a * n + i) * d + j] =
                        fj.jac[i] * aj.value[a * d + j] + f0 * aj.deriv[(a * n + i) * d + j];
                }
            }
        }
        FormJet { value, deriv }
    }
}

/// Sum of forms with identical shapes.
pub struct SumForm(pub Vec<Arc<dyn OneForm>>);

impl OneForm for SumForm {
    fn point_dim(&self) -> usize {
        self.0[0].point_dim()
    }
    fn input_dim(&self) -> usize {
        self.0[0].input_dim()
    }
    fn output_dim(&self) -> usize {
        self.0[0].output_dim()
    }
    fn jet(&self, x: &[f64]) -> FormJet {
        let mut acc = self.0[0].jet(x);
        for f in &self.0[1..] {
            let j = f.jet(x);
            acc.value.iter_mut().zip(&j.value).for_each(|(a, b)| *a += b);
            acc.deriv.iter_mut().zip(&j.deriv).for_each(|(a, b)| *a += b);
        }
        acc
    }
}

/// Evaluate `α(x)·v`.
pub fn apply_form(value: &[f64], e: usize, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..e).map(|a| (0..d).map(|j| value[a * d + j] * v[j]).sum()).collect()
}

/// Smooth step: 1 for `u ≤ 0`, 0 for `u ≥ 1`, C^∞ in between.
pub fn smooth_step<S: Scalar>(u: S) -> S {
    let uv = u.value();
    if uv <= 0.0 {
        return S::cst(1.0);
    }
    if uv >= 1.0 {
        return S::cst(0.0);
    }
    let a = (-(u.recip())).exp();
    let b = (-((-u + 1.0).recip())).exp();
    b / (a + b)
}

/// Smooth cutoff of the max-norm: 1 on `|z|∞ ≤ inner`, 0 on `|z|∞ ≥ outer`.
pub fn box_cutoff<S: Scalar>(z: &[S], inner: f64, outer: f64) -> S {
    let w = outer - inner;
    let mut acc = S::cst(1.0);
    for zi in z {
        let u = (zi.abs() - inner) / w;
        if u.value() > 0.0 {
            acc = acc * smooth_step(u);
        }
    }
    acc
}
