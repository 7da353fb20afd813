//! Truncated tensor algebra T^(n)(R^d) with dense per-grade storage.
//!
//! Grade `g` holds `d^g` coefficients in row-major order: the multi-index
//! `(i1, ..., ig)` lives at `i1*d^(g-1) + ... + ig`.

use std::ops::Mul;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 8;
pub const MAX_LEVEL: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct TruncatedTensor {
    dim: usize,
    level: usize,
    coeffs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    dim: usize,
    level: usize,
    grades: Vec<Vec<f64>>,
}

impl TryFrom<TensorRepr> for TruncatedTensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        TruncatedTensor::from_grades(r.dim, r.grades)
    }
}

impl From<TruncatedTensor> for TensorRepr {
    fn from(t: TruncatedTensor) -> Self {
        TensorRepr {
            dim: t.dim,
            level: t.level,
            grades: (0..=t.level).map(|g| t.grade(g).to_vec()).collect(),
        }
    }
}

fn check_capacity(dim: usize, level: usize) -> Result<()> {
    if dim == 0 || level == 0 {
        return Err(Error::Shape(format!("dim {dim} and level {level} must be positive")));
    }
    if dim > MAX_DIM || level > MAX_LEVEL {
        return Err(Error::Capacity(format!(
            "T^({level})(R^{dim}) exceeds the supported envelope d <= {MAX_DIM}, n <= {MAX_LEVEL}"
        )));
    }
    Ok(())
}

#[inline]
fn offset(dim: usize, grade: usize) -> usize {
    if dim == 1 {
        grade
    } else {
        (dim.pow(grade as u32) - 1) / (dim - 1)
    }
}

impl TruncatedTensor {
    /// The zero element.
    pub fn zero(dim: usize, level: usize) -> Result<Self> {
        check_capacity(dim, level)?;
        Ok(Self::zero_unchecked(dim, level))
    }

    pub(crate) fn zero_unchecked(dim: usize, level: usize) -> Self {
        TruncatedTensor { dim, level, coeffs: vec![0.0; offset(dim, level + 1)] }
    }

    /// The unit `(1, 0, ..., 0)`.
    pub fn one(dim: usize, level: usize) -> Result<Self> {
        let mut t = Self::zero(dim, level)?;
        t.coeffs[0] = 1.0;
        Ok(t)
    }

    pub(crate) fn one_unchecked(dim: usize, level: usize) -> Self {
        let mut t = Self::zero_unchecked(dim, level);
        t.coeffs[0] = 1.0;
        t
    }

    /// Element with grade 0 equal to 0 and grade 1 equal to `v`.
    pub fn from_vector(v: &[f64], level: usize) -> Result<Self> {
        let mut t = Self::zero(v.len(), level)?;
        t.grade_mut(1).copy_from_slice(v);
        Ok(t)
    }

    pub fn from_grades(dim: usize, grades: Vec<Vec<f64>>) -> Result<Self> {
        if grades.is_empty() {
            return Err(Error::Shape("tensor needs at least grade 0".into()));
        }
        let level = grades.len() - 1;
        check_capacity(dim, level)?;
        let mut t = Self::zero_unchecked(dim, level);
        for (g, c) in grades.iter().enumerate() {
            if c.len() != dim.pow(g as u32) {
                return Err(Error::Shape(format!(
                    "grade {g} has {} coefficients, expected {}",
                    c.len(),
                    dim.pow(g as u32)
                )));
            }
            t.grade_mut(g).copy_from_slice(c);
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn grade(&self, g: usize) -> &[f64] {
        &self.coeffs[offset(self.dim, g)..offset(self.dim, g + 1)]
    }

    pub fn grade_mut(&mut self, g: usize) -> &mut [f64] {
        let (a, b) = (offset(self.dim, g), offset(self.dim, g + 1));
        &mut self.coeffs[a..b]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Coefficient of the multi-index `idx` (its length is the grade).
    pub fn get(&self, idx: &[usize]) -> f64 {
        let flat = idx.iter().fold(0, |acc, &i| acc * self.dim + i);
        self.grade(idx.len())[flat]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let flat = idx.iter().fold(0, |acc, &i| acc * self.dim + i);
        self.grade_mut(idx.len())[flat] = v;
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.level != other.level {
            return Err(Error::Shape(format!(
                "T^({})(R^{}) vs T^({})(R^{})",
                self.level, self.dim, other.level, other.dim
            )));
        }
        Ok(())
    }

    /// Truncated product; panics on shape mismatch (see [`tensor_mul`]).
    pub fn product(&self, other: &Self) -> Self {
        assert_eq!((self.dim, self.level), (other.dim, other.level), "tensor shape mismatch");
        let mut out = Self::zero_unchecked(self.dim, self.level);
        mul_into(self, other, &mut out);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().zip(&other.coeffs).for_each(|(a, b)| *a += b);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().zip(&other.coeffs).for_each(|(a, b)| *a -= b);
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|a| *a *= c);
        out
    }

    /// ℓ1 norm of one grade.
    pub fn norm(&self, g: usize) -> Result<f64> {
        if g > self.level {
            return Err(Error::Domain(format!("grade {g} above level {}", self.level)));
        }
        Ok(self.grade_norm(g))
    }

    pub(crate) fn grade_norm(&self, g: usize) -> f64 {
        self.grade(g).iter().map(|c| c.abs()).sum()
    }

    /// Largest grade norm over grades `1..=level`.
    pub fn max_norm(&self) -> f64 {
        (1..=self.level).map(|g| self.grade_norm(g)).fold(0.0, f64::max)
    }

    /// Image under the coordinate inclusion `e_i ↦ e_{slots[i]}` into `R^dim`.
    pub fn embed(&self, dim: usize, slots: &[usize]) -> Result<Self> {
        if slots.len() != self.dim || slots.iter().any(|&s| s >= dim) {
            return Err(Error::Shape(format!("cannot embed R^{} into R^{dim} via {slots:?}", self.dim)));
        }
        let mut out = Self::zero(dim, self.level)?;
        for g in 0..=self.level {
            let src = self.grade(g);
            let dst = out.grade_mut(g);
            for (flat, v) in src.iter().enumerate() {
                let mut rest = flat;
                let mut target = 0;
                let mut place = 1;
                for _ in 0..g {
                    target += slots[rest % self.dim] * place;
                    rest /= self.dim;
                    place *= dim;
                }
                dst[target] = *v;
            }
        }
        Ok(out)
    }

    /// Image under the coordinate projection onto `coords` (new axis `r` is old axis `coords[r]`).
    pub fn project(&self, coords: &[usize]) -> Result<Self> {
        if coords.iter().any(|&c| c >= self.dim) {
            return Err(Error::Shape(format!("coordinates {coords:?} outside R^{}", self.dim)));
        }
        let k = coords.len();
        let mut out = Self::zero(k, self.level)?;
        for g in 0..=self.level {
            let src = self.grade(g);
            let dst = out.grade_mut(g);
            for (flat, v) in dst.iter_mut().enumerate() {
                let mut rest = flat;
                let mut source = 0;
                let mut place = 1;
                for _ in 0..g {
                    source += coords[rest % k] * place;
                    rest /= k;
                    place *= self.dim;
                }
                *v = src[source];
            }
        }
        Ok(out)
    }

    /// Copy of `self` at a different level: higher grades are zero-padded, extra grades dropped.
    pub fn with_level(&self, level: usize) -> Result<Self> {
        check_capacity(self.dim, level)?;
        let mut out = Self::zero_unchecked(self.dim, level);
        let n = offset(self.dim, level.min(self.level) + 1);
        out.coeffs[..n].copy_from_slice(&self.coeffs[..n]);
        Ok(out)
    }

    /// Exponential of an element with grade 0 equal to 0.
    pub fn exp(&self) -> Result<Self> {
        if self.coeffs[0] != 0.0 {
            return Err(Error::Domain("exp requires grade-0 coefficient 0".into()));
        }
        Ok(self.exp_unchecked())
    }

    pub(crate) fn exp_unchecked(&self) -> Self {
        // Horner: 1 + x(1 + x/2(1 + x/3(...)))
        let one = Self::one_unchecked(self.dim, self.level);
        let mut acc = one.clone();
        for k in (1..=self.level).rev() {
            acc = one.add(&self.product(&acc).scale(1.0 / k as f64));
        }
        acc
    }

    /// Logarithm of an element with grade 0 equal to 1.
    pub fn log(&self) -> Result<Self> {
        if (self.coeffs[0] - 1.0).abs() > 1e-12 {
            return Err(Error::Domain("log requires grade-0 coefficient 1".into()));
        }
        Ok(self.log_unchecked())
    }

    pub(crate) fn log_unchecked(&self) -> Self {
        let mut y = self.clone();
        y.coeffs[0] = 0.0;
        // log(1+y) = y(1 - y(1/2 - y(1/3 - ...)))
        let n = self.level;
        let mut acc = Self::zero_unchecked(self.dim, n);
        acc.coeffs[0] = if n % 2 == 1 { 1.0 / n as f64 } else { -1.0 / n as f64 };
        for k in (1..n).rev() {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            let mut next = y.product(&acc);
            next.coeffs[0] += sign / k as f64;
            acc = next;
        }
        y.product(&acc)
    }

    /// Inverse of a group-like element (grade 0 equal to 1).
    pub fn inverse(&self) -> Self {
        self.log_unchecked().scale(-1.0).exp_unchecked()
    }
}

/// Checked truncated product.
pub fn tensor_mul(a: &TruncatedTensor, b: &TruncatedTensor) -> Result<TruncatedTensor> {
    a.same_shape(b)?;
    Ok(a.product(b))
}

pub fn tensor_exp(x: &TruncatedTensor) -> Result<TruncatedTensor> {
    x.exp()
}

pub fn tensor_log(g: &TruncatedTensor) -> Result<TruncatedTensor> {
    g.log()
}

pub fn tensor_norm(a: &TruncatedTensor, grade: usize) -> Result<f64> {
    a.norm(grade)
}

fn mul_into(a: &TruncatedTensor, b: &TruncatedTensor, out: &mut TruncatedTensor) {
    let d = a.dim;
    let n = a.level;
    for g in 0..=n {
        let og = offset(d, g);
        for i in 0..=g {
            let j = g - i;
            let ai = &a.coeffs[offset(d, i)..offset(d, i + 1)];
            let bj = &b.coeffs[offset(d, j)..offset(d, j + 1)];
            let bl = bj.len();
            for (p, &x) in ai.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let row = &mut out.coeffs[og + p * bl..og + (p + 1) * bl];
                for (r, &y) in row.iter_mut().zip(bj) {
                    *r += x * y;
                }
            }
        }
    }
}

impl Mul for &TruncatedTensor {
    type Output = TruncatedTensor;

    fn mul(self, rhs: Self) -> TruncatedTensor {
        self.product(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dim: usize, level: usize, rng: &mut ChaCha8Rng, g0: f64) -> TruncatedTensor {
        let mut t = TruncatedTensor::zero(dim, level).unwrap();
        for c in t.coeffs_mut() {
            *c = rng.gen_range(-1.0..1.0);
        }
        t.coeffs_mut()[0] = g0;
        t
    }

    #[test]
    fn unit_is_two_sided_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(2, 3, &mut rng, 0.7);
        let one = TruncatedTensor::one(2, 3).unwrap();
        assert_eq!(&one * &b, b);
        assert_eq!(&b * &one, b);
    }

    #[test]
    fn one_dimensional_product_by_hand() {
        let a = TruncatedTensor::from_grades(1, vec![vec![1.0], vec![2.0], vec![0.0], vec![0.0]]).unwrap();
        let b = TruncatedTensor::from_grades(1, vec![vec![1.0], vec![3.0], vec![0.0], vec![0.0]]).unwrap();
        assert_eq!((&a * &b).coeffs(), &[1.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn product_of_grade_one_elements() {
        let x = [0.3, -1.2];
        let y = [2.0, 0.5];
        let mut a = TruncatedTensor::from_vector(&x, 2).unwrap();
        a.coeffs_mut()[0] = 1.0;
        let mut b = TruncatedTensor::from_vector(&y, 2).unwrap();
        b.coeffs_mut()[0] = 1.0;
        let c = &a * &b;
        assert_eq!(c.grade(1), &[x[0] + y[0], x[1] + y[1]]);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c.get(&[i, j]), x[i] * y[j]);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = TruncatedTensor::one(2, 2).unwrap();
        let b = TruncatedTensor::one(3, 2).unwrap();
        assert!(matches!(tensor_mul(&a, &b), Err(Error::Shape(_))));
        let c = TruncatedTensor::one(2, 3).unwrap();
        assert!(matches!(tensor_mul(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn capacity_envelope() {
        assert!(matches!(TruncatedTensor::zero(9, 2), Err(Error::Capacity(_))));
        assert!(matches!(TruncatedTensor::zero(2, 7), Err(Error::Capacity(_))));
        assert!(TruncatedTensor::zero(8, 6).is_ok());
    }

    #[test]
    fn exp_examples() {
        let z = TruncatedTensor::zero(3, 3).unwrap();
        assert_eq!(z.exp().unwrap(), TruncatedTensor::one(3, 3).unwrap());
        let x = TruncatedTensor::from_vector(&[2.0], 2).unwrap();
        assert_eq!(x.exp().unwrap().coeffs(), &[1.0, 2.0, 2.0]);
    }

    #[test]
    fn exp_log_domain_errors() {
        let one = TruncatedTensor::one(2, 2).unwrap();
        assert!(matches!(one.exp(), Err(Error::Domain(_))));
        let zero = TruncatedTensor::zero(2, 2).unwrap();
        assert!(matches!(zero.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(d, n) in &[(1, 4), (2, 3), (3, 3), (2, 5), (4, 2)] {
            for _ in 0..20 {
                let x = random(d, n, &mut rng, 0.0);
                let back = x.exp().unwrap().log().unwrap();
                let err = back.sub(&x).coeffs().iter().map(|c| c.abs()).sum::<f64>();
                assert!(err <= 1e-12, "d={d} n={n} err={err}");
            }
        }
    }

    #[test]
    fn norm_examples() {
        let z = TruncatedTensor::zero(2, 2).unwrap();
        assert_eq!(z.norm(2).unwrap(), 0.0);
        let v = TruncatedTensor::from_vector(&[3.0, -4.0], 2).unwrap();
        assert_eq!(v.norm(1).unwrap(), 7.0);
        let t = TruncatedTensor::from_grades(2, vec![vec![0.0], vec![0.0, 0.0], vec![1.0, -1.0, 0.5, 0.0]]).unwrap();
        assert_eq!(t.norm(2).unwrap(), 2.5);
        assert!(matches!(t.norm(3), Err(Error::Domain(_))));
    }

    #[test]
    fn associativity_and_submultiplicativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..=3 {
            for n in 1..=4 {
                for _ in 0..10 {
                    let g0 = rng.gen_range(-1.0..1.0);
                    let a = random(d, n, &mut rng, g0);
                    let g0 = rng.gen_range(-1.0..1.0);
                    let b = random(d, n, &mut rng, g0);
                    let g0 = rng.gen_range(-1.0..1.0);
                    let c = random(d, n, &mut rng, g0);
                    let l = &(&a * &b) * &c;
                    let r = &a * &(&b * &c);
                    assert!(l.sub(&r).coeffs().iter().all(|e| e.abs() <= 1e-12));
                    let ab = &a * &b;
                    for g in 0..=n {
                        let bound: f64 = (0..=g).map(|i| a.grade_norm(i) * b.grade_norm(g - i)).sum();
                        assert!(ab.grade_norm(g) <= bound + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn inverse_of_group_like() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random(2, 3, &mut rng, 0.0).exp().unwrap();
        let e = &g * &g.inverse();
        let one = TruncatedTensor::one(2, 3).unwrap();
        assert!(e.sub(&one).coeffs().iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn json_layout() {
        let t = TruncatedTensor::from_grades(2, vec![vec![1.0], vec![1.0, 2.0], vec![0.5, 1.0, 0.0, 2.0]]).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"dim":2,"level":2,"grades":[[1.0],[1.0,2.0],[0.5,1.0,0.0,2.0]]}"#);
        let back: TruncatedTensor = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<TruncatedTensor>(r#"{"dim":2,"level":1,"grades":[[1.0],[1.0]]}"#).is_err());
    }

    #[test]
    fn embed_then_project_round_trip() {
        let x = TruncatedTensor::from_vector(&[1.0, -2.0], 3).unwrap().exp().unwrap();
        let big = x.embed(4, &[3, 1]).unwrap();
        assert_eq!(big.get(&[3, 1, 1]), x.get(&[0, 1, 1]));
        assert_eq!(big.get(&[0]), 0.0);
        assert_eq!(big.project(&[3, 1]).unwrap(), x);
        let y = TruncatedTensor::from_vector(&[0.5, 0.25, 1.0, 0.0], 2).unwrap().exp().unwrap();
        let p = y.project(&[2, 0]).unwrap();
        assert_eq!(p.get(&[0, 1]), y.get(&[2, 0]));
    }
}
