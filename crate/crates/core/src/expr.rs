//! Expression mini-language for user-supplied coordinate maps and fields.
//!
//! Grammar (whitespace ignored):
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := unary (("*" | "/") unary)*
//! unary  := "-" unary | power
//! power  := atom ("^" unary)?
//! atom   := number | name | name "(" expr ")" | "(" expr ")"
//! ```
//!
//! Names are the declared variables, `pi`, `e`, or functions
//! `sin cos tan atan exp ln sqrt tanh abs`. Expressions are evaluated over any
//! [`Scalar`], so derivatives come from forward-mode jets.

use serde::{Deserialize, Serialize};

use crate::calculus::{GenericMap, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Atan,
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Abs,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "atan" => Func::Atan,
            "exp" => Func::Exp,
            "ln" | "log" => Func::Ln,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            _ => return None,
        })
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a [String],
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse(format!("{msg} at offset {} in `{}`", self.pos, String::from_utf8_lossy(self.src)))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(c) = self.peek() {
            match c {
                b'+' => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                b'-' => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(c) = self.peek() {
            match c {
                b'*' => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                b'/' => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            return Ok(Expr::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len() {
                    let c = self.src[self.pos];
                    let exp_sign = (c == b'+' || c == b'-')
                        && self.pos > start
                        && matches!(self.src[self.pos - 1], b'e' | b'E');
                    if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                text.parse::<f64>().map(Expr::Num).map_err(|_| self.err("malformed number"))
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                if let Some(i) = self.vars.iter().position(|v| v == name) {
                    return Ok(Expr::Var(i));
                }
                if let Some(f) = Func::from_name(name) {
                    if self.peek() != Some(b'(') {
                        return Err(self.err("expected `(` after function name"));
                    }
                    self.pos += 1;
                    let arg = self.expr()?;
                    if self.peek() != Some(b')') {
                        return Err(self.err("expected `)`"));
                    }
                    self.pos += 1;
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                match name {
                    "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                    "e" => Ok(Expr::Num(std::f64::consts::E)),
                    _ => Err(self.err(&format!("unknown name `{name}`"))),
                }
            }
            Some(_) => Err(self.err("unexpected character")),
        }
    }
}

/// Parse a single expression over the named variables.
pub fn parse(src: &str, vars: &[String]) -> Result<Expr> {
    let mut p = Parser { src: src.as_bytes(), pos: 0, vars };
    let e = p.expr()?;
    if p.peek().is_some() {
        return Err(p.err("trailing input"));
    }
    Ok(e)
}

impl Expr {
    /// Value of a variable-free expression.
    pub fn constant(&self) -> Option<f64> {
        (!self.has_var()).then(|| self.eval::<f64>(&[]))
    }

    fn has_var(&self) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(_) => true,
            Expr::Neg(a) | Expr::Call(_, a) => a.has_var(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.has_var() || b.has_var()
            }
        }
    }

    /// Symbolic partial derivative with respect to variable `v`.
    pub fn diff(&self, v: usize) -> Expr {
        use Expr::*;
        let b = Box::new;
        match self {
            Num(_) => Num(0.0),
            Var(i) => Num(if *i == v { 1.0 } else { 0.0 }),
            Neg(a) => Neg(b(a.diff(v))),
            Add(x, y) => Add(b(x.diff(v)), b(y.diff(v))),
            Sub(x, y) => Sub(b(x.diff(v)), b(y.diff(v))),
            Mul(x, y) => Add(b(Mul(b(x.diff(v)), y.clone())), b(Mul(x.clone(), b(y.diff(v))))),
            Div(x, y) => Div(
                b(Sub(b(Mul(b(x.diff(v)), y.clone())), b(Mul(x.clone(), b(y.diff(v)))))),
                b(Mul(y.clone(), y.clone())),
            ),
            Pow(x, y) => match y.constant() {
                Some(p) => Mul(b(Mul(b(Num(p)), b(Pow(x.clone(), b(Num(p - 1.0)))))), b(x.diff(v))),
                None => {
                    let lnx = Call(Func::Ln, x.clone());
                    let inner = Add(b(Mul(b(y.diff(v)), b(lnx))), b(Div(b(Mul(y.clone(), b(x.diff(v)))), x.clone())));
                    Mul(b(self.clone()), b(inner))
                }
            },
            Call(f, a) => {
                let da = b(a.diff(v));
                let outer = match f {
                    Func::Sin => Call(Func::Cos, a.clone()),
                    Func::Cos => Neg(b(Call(Func::Sin, a.clone()))),
                    Func::Tan => {
                        let c = Call(Func::Cos, a.clone());
                        Div(b(Num(1.0)), b(Mul(b(c.clone()), b(c))))
                    }
                    Func::Atan => Div(b(Num(1.0)), b(Add(b(Num(1.0)), b(Mul(a.clone(), a.clone()))))),
                    Func::Exp => Call(Func::Exp, a.clone()),
                    Func::Ln => Div(b(Num(1.0)), a.clone()),
                    Func::Sqrt => Div(b(Num(0.5)), b(Call(Func::Sqrt, a.clone()))),
                    Func::Tanh => {
                        let t = Call(Func::Tanh, a.clone());
                        Sub(b(Num(1.0)), b(Mul(b(t.clone()), b(t))))
                    }
                    Func::Abs => Div(a.clone(), b(Call(Func::Abs, a.clone()))),
                };
                Mul(b(outer), da)
            }
        }
    }

    pub fn eval<S: Scalar>(&self, x: &[S]) -> S {
        match self {
            Expr::Num(c) => S::cst(*c),
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, b) => {
                let base = a.eval(x);
                match b.constant() {
                    Some(p) if p.fract() == 0.0 && p.abs() < 64.0 => base.powi(p as i32),
                    Some(p) => base.powf(p),
                    None => (b.eval(x) * base.ln()).exp(),
                }
            }
            Expr::Call(f, a) => {
                let v = a.eval(x);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Tan => v.tan(),
                    Func::Atan => v.atan(),
                    Func::Exp => v.exp(),
                    Func::Ln => v.ln(),
                    Func::Sqrt => v.sqrt(),
                    Func::Tanh => v.tanh(),
                    Func::Abs => v.abs(),
                }
            }
        }
    }
}

/// Serializable description of a vector-valued expression map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExprSpec {
    pub vars: Vec<String>,
    pub exprs: Vec<String>,
}

/// A map `R^n → R^e` given by one expression per output.
#[derive(Clone, Debug)]
pub struct ExprMap {
    spec: ExprSpec,
    compiled: Vec<Expr>,
}

impl ExprMap {
    pub fn new(spec: ExprSpec) -> Result<Self> {
        if spec.exprs.is_empty() {
            return Err(Error::Parse("expression map needs at least one output".into()));
        }
        let compiled = spec.exprs.iter().map(|s| parse(s, &spec.vars)).collect::<Result<Vec<_>>>()?;
        Ok(ExprMap { spec, compiled })
    }

    pub fn from_strs(vars: &[&str], exprs: &[&str]) -> Result<Self> {
        Self::new(ExprSpec {
            vars: vars.iter().map(|s| s.to_string()).collect(),
            exprs: exprs.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn spec(&self) -> &ExprSpec {
        &self.spec
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.compiled
    }

    /// Symbolic Jacobian, row-major `e × n`.
    pub fn jacobian(&self) -> Vec<Expr> {
        let n = self.spec.vars.len();
        self.compiled.iter().flat_map(|e| (0..n).map(move |i| e.diff(i))).collect()
    }
}

impl GenericMap for ExprMap {
    fn dim_in(&self) -> usize {
        self.spec.vars.len()
    }
    fn dim_out(&self) -> usize {
        self.compiled.len()
    }
    fn apply<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        self.compiled.iter().map(|e| e.eval(x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{Auto, SmoothMap};

    #[test]
    fn precedence_and_associativity() {
        let m = ExprMap::from_strs(&["x", "y"], &["1 + 2*x^2 - y/4", "-x^2", "2^3^2", "x - y - 1"]).unwrap();
        let v = m.apply(&[3.0, 8.0]);
        assert_eq!(v, vec![1.0 + 18.0 - 2.0, -9.0, 512.0, -6.0]);
    }

    #[test]
    fn functions_and_constants() {
        let m = ExprMap::from_strs(&["t"], &["sin(pi*t) + cos(0) + ln(e) + sqrt(4) + exp(0)*1.5e-1"]).unwrap();
        let v = m.apply(&[0.5]);
        assert!((v[0] - (1.0 + 1.0 + 1.0 + 2.0 + 0.15)).abs() < 1e-15);
    }

    #[test]
    fn derivatives_through_jets() {
        let m = Auto(ExprMap::from_strs(&["x", "y"], &["x^2*y + sin(y)"]).unwrap());
        let j = m.jet(&[1.5, 0.3]);
        assert!((j.jac[0] - 2.0 * 1.5 * 0.3).abs() < 1e-14);
        assert!((j.jac[1] - (1.5f64 * 1.5 + 0.3f64.cos())).abs() < 1e-14);
        assert!((j.hess[0] - 0.6).abs() < 1e-14);
        assert!((j.hess[1] - 3.0).abs() < 1e-14);
        assert!((j.hess[3] + 0.3f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn symbolic_diff_matches_jets() {
        let m = ExprMap::from_strs(&["x", "y"], &["x^2*y + sin(y)/x - atan(x*y) + sqrt(x)*exp(y) + x^y"]).unwrap();
        let jac = m.jacobian();
        let p = [1.3, 0.7];
        let j = Auto(m.clone()).jet(&p);
        for i in 0..2 {
            assert!((jac[i].eval::<f64>(&p) - j.jac[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn parse_errors() {
        for bad in ["", "1 +", "foo(1)", "(1", "x y", "sin 1", "1..2"] {
            assert!(matches!(ExprMap::from_strs(&["x"], &[bad]), Err(Error::Parse(_))), "{bad}");
        }
    }
}
