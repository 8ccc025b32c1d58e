//! Closed-form coefficient expressions over `(x, t1, ..., t{n-1})`.
//!
//! Expressions are parsed once ([`parse`]) and evaluated either to a plain
//! `f64` or to a [`Jet2`] carrying exact first and second derivatives. The
//! point layout is always `[x, t1, ..., t{n-1}]`.
//!
//! Grammar:
//!
//! ```text
//! expr    = term   { ("+" | "-") term } ;
//! term    = unary  { ("*" | "/") unary } ;
//! unary   = "-" unary | power ;
//! power   = atom [ "^" unary ] ;            (* exponent must be constant *)
//! atom    = number | "x" | "t" digit { digit } | "pi"
//!         | func "(" expr ")" | "(" expr ")" ;
//! func    = "exp" | "log" | "sin" | "cos" | "sqrt" | "bracket" ;
//! ```
//!
//! `bracket(u)` is the japanese bracket `(1 + u^2)^(1/2)`. Chained powers
//! such as `2^3^2` are rejected; write `(2^3)^2`.

mod jet;
mod parser;
mod tape;

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use jet::{Jet2, MAX_VARS};
pub use parser::{parse, parse_in};
pub use tape::CompiledExpr;

use crate::error::EvalError;

/// A variable reference. Fiber angles are 1-based (`t1` is `Theta(1)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    X,
    Theta(usize),
}

impl Var {
    /// Position of the variable in an evaluation point.
    pub fn index(self) -> usize {
        match self {
            Var::X => 0,
            Var::Theta(k) => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Bracket,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Bracket => "bracket",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "bracket" => Func::Bracket,
            _ => return None,
        })
    }

    pub const ALL: [Func; 6] = [
        Func::Exp,
        Func::Log,
        Func::Sin,
        Func::Cos,
        Func::Sqrt,
        Func::Bracket,
    ];
}

/// Expression tree.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// Power with a constant real exponent.
    Pow(Box<Expr>, f64),
    Func(Func, Box<Expr>),
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn x() -> Expr {
        Expr::Var(Var::X)
    }

    pub fn theta(k: usize) -> Expr {
        Expr::Var(Var::Theta(k))
    }

    fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Num(_) | Expr::Var(_) => vec![],
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Func(_, a) => vec![a],
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => vec![a, b],
        }
    }

    fn any_var(&self, pred: &dyn Fn(Var) -> bool) -> bool {
        match self {
            Expr::Var(v) => pred(*v),
            _ => self.children().into_iter().any(|c| c.any_var(pred)),
        }
    }

    pub fn depends_on_any(&self) -> bool {
        self.any_var(&|_| true)
    }

    pub fn depends_on_x(&self) -> bool {
        self.any_var(&|v| v == Var::X)
    }

    pub fn depends_on_fiber(&self) -> bool {
        self.any_var(&|v| v != Var::X)
    }

    /// Largest fiber index referenced, if any.
    pub fn max_fiber_index(&self) -> Option<usize> {
        match self {
            Expr::Var(Var::Theta(k)) => Some(*k),
            _ => self.children().into_iter().filter_map(|c| c.max_fiber_index()).max(),
        }
    }

    /// Number of entries an evaluation point must have.
    pub fn required_len(&self) -> usize {
        match self.max_fiber_index() {
            Some(k) => k + 1,
            None if self.depends_on_x() => 1,
            None => 0,
        }
    }

    pub fn compile(&self) -> CompiledExpr {
        CompiledExpr::new(self)
    }

    /// Plain floating-point evaluation.
    pub fn eval(&self, point: &[f64]) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var(var) => *point.get(var.index()).ok_or(EvalError::Arity {
                needed: var.index() + 1,
                got: point.len(),
            })?,
            Expr::Neg(a) => -a.eval(point)?,
            Expr::Add(a, b) => a.eval(point)? + b.eval(point)?,
            Expr::Sub(a, b) => a.eval(point)? - b.eval(point)?,
            Expr::Mul(a, b) => a.eval(point)? * b.eval(point)?,
            Expr::Div(a, b) => {
                let (n, d) = (a.eval(point)?, b.eval(point)?);
                if d == 0.0 {
                    return Err(self.domain("division by zero"));
                }
                n / d
            }
            Expr::Pow(a, p) => {
                let base = a.eval(point)?;
                check_pow(base, *p, false).map_err(|why| self.domain(why))?;
                base.powf(*p)
            }
            Expr::Func(f, a) => {
                let u = a.eval(point)?;
                check_func(*f, u, false).map_err(|why| self.domain(why))?;
                apply_func(*f, u)
            }
        };
        if !v.is_finite() {
            return Err(self.domain("non-finite result"));
        }
        Ok(v)
    }

    /// Value, gradient and Hessian with respect to every point coordinate.
    pub fn eval_jet2(&self, point: &[f64]) -> Result<Jet2, EvalError> {
        let dim = point.len();
        if dim > MAX_VARS {
            return Err(EvalError::Arity {
                needed: MAX_VARS,
                got: dim,
            });
        }
        self.jet_rec(point)
    }

    fn jet_rec(&self, point: &[f64]) -> Result<Jet2, EvalError> {
        let dim = point.len();
        let j = match self {
            Expr::Num(v) => Jet2::constant(dim, *v),
            Expr::Var(var) => {
                let i = var.index();
                if i >= dim {
                    return Err(EvalError::Arity {
                        needed: i + 1,
                        got: dim,
                    });
                }
                Jet2::variable(dim, i, point[i])
            }
            Expr::Neg(a) => -a.jet_rec(point)?,
            Expr::Add(a, b) => a.jet_rec(point)? + b.jet_rec(point)?,
            Expr::Sub(a, b) => a.jet_rec(point)? - b.jet_rec(point)?,
            Expr::Mul(a, b) => a.jet_rec(point)? * b.jet_rec(point)?,
            Expr::Div(a, b) => {
                let (n, d) = (a.jet_rec(point)?, b.jet_rec(point)?);
                if d.value() == 0.0 {
                    return Err(self.domain("division by zero"));
                }
                n / d
            }
            Expr::Pow(a, p) => {
                let base = a.jet_rec(point)?;
                check_pow(base.value(), *p, true).map_err(|why| self.domain(why))?;
                base.powf(*p)
            }
            Expr::Func(f, a) => {
                let u = a.jet_rec(point)?;
                check_func(*f, u.value(), true).map_err(|why| self.domain(why))?;
                apply_func_jet(*f, &u)
            }
        };
        if !j.is_finite() {
            return Err(self.domain("non-finite result or derivative"));
        }
        Ok(j)
    }

    fn domain(&self, reason: &str) -> EvalError {
        EvalError::Domain {
            subexpr: self.to_string(),
            reason: reason.to_string(),
        }
    }

    /// An expression for `log(self)` that avoids forming `self` when it is
    /// a product, quotient, power or exponential. Used to evaluate ratios of
    /// warping functions that individually underflow.
    pub fn log_of(&self) -> Expr {
        match self {
            Expr::Func(Func::Exp, a) => (**a).clone(),
            Expr::Num(v) if *v > 0.0 => Expr::Num(v.ln()),
            Expr::Mul(a, b) => Expr::Add(Box::new(a.log_of()), Box::new(b.log_of())),
            Expr::Div(a, b) => Expr::Sub(Box::new(a.log_of()), Box::new(b.log_of())),
            Expr::Pow(a, p) => Expr::Mul(Box::new(Expr::Num(*p)), Box::new(a.log_of())),
            Expr::Func(Func::Sqrt, a) => Expr::Mul(Box::new(Expr::Num(0.5)), Box::new(a.log_of())),
            _ => Expr::Func(Func::Log, Box::new(self.clone())),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

fn check_pow(base: f64, p: f64, jet: bool) -> Result<(), &'static str> {
    if base < 0.0 && p.fract() != 0.0 {
        return Err("negative base with non-integer exponent");
    }
    if base == 0.0 && p < 0.0 {
        return Err("zero base with negative exponent");
    }
    if jet && base == 0.0 && p.fract() != 0.0 && p < 2.0 {
        return Err("power not differentiable at zero");
    }
    Ok(())
}

fn check_func(f: Func, u: f64, jet: bool) -> Result<(), &'static str> {
    match f {
        Func::Log if u <= 0.0 => Err("log of non-positive value"),
        Func::Sqrt if u < 0.0 => Err("sqrt of negative value"),
        Func::Sqrt if jet && u == 0.0 => Err("sqrt not differentiable at zero"),
        _ => Ok(()),
    }
}

fn apply_func(f: Func, u: f64) -> f64 {
    match f {
        Func::Exp => u.exp(),
        Func::Log => u.ln(),
        Func::Sin => u.sin(),
        Func::Cos => u.cos(),
        Func::Sqrt => u.sqrt(),
        Func::Bracket => (1.0 + u * u).sqrt(),
    }
}

fn apply_func_jet(f: Func, u: &Jet2) -> Jet2 {
    match f {
        Func::Exp => u.exp(),
        Func::Log => u.ln(),
        Func::Sin => u.sin(),
        Func::Cos => u.cos(),
        Func::Sqrt => u.sqrt(),
        Func::Bracket => u.bracket(),
    }
}

fn fmt_num(v: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if v == std::f64::consts::PI {
        return write!(f, "pi");
    }
    if v < 0.0 || (v == 0.0 && v.is_sign_negative()) {
        write!(f, "(-{:?})", -v)
    } else {
        write!(f, "{v:?}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Operands of equal precedence on the right are parenthesized so the
        // printed form re-parses to the same tree.
        let child = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| -> fmt::Result {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Num(v) => fmt_num(*v, f),
            Expr::Var(Var::X) => write!(f, "x"),
            Expr::Var(Var::Theta(k)) => write!(f, "t{k}"),
            Expr::Neg(a) => match **a {
                Expr::Num(v) if !(v < 0.0 || (v == 0.0 && v.is_sign_negative())) => write!(f, "-({a})"),
                _ => {
                    write!(f, "-")?;
                    child(f, a, 3)
                }
            },
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                child(f, a, 1)?;
                write!(f, " {} ", if matches!(self, Expr::Add(..)) { "+" } else { "-" })?;
                child(f, b, 2)
            }
            Expr::Mul(a, b) | Expr::Div(a, b) => {
                child(f, a, 2)?;
                write!(f, "{}", if matches!(self, Expr::Mul(..)) { "*" } else { "/" })?;
                child(f, b, 3)
            }
            Expr::Pow(a, p) => {
                child(f, a, 5)?;
                write!(f, "^")?;
                if *p < 0.0 {
                    write!(f, "(-{:?})", -p)
                } else {
                    write!(f, "{p:?}")
                }
            }
            Expr::Func(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Expr, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for Expr {
    type Err = crate::error::ParseError;
    fn from_str(s: &str) -> Result<Expr, Self::Err> {
        parse(s)
    }
}

/// Checks that `e` is 2π-periodic in every fiber angle.
///
/// Samples `samples` deterministic points with `x` spread logarithmically
/// over `[1, 1000]` and angles quasi-uniformly over the torus, and compares
/// `e(x, θ)` with `e(x, θ + 2π e_k)` for each direction `k`. A point at
/// which both evaluations fail is skipped.
pub fn check_periodic(e: &Expr, fiber_dim: usize, samples: usize) -> bool {
    let samples = samples.max(1);
    // additive recurrence with irrational steps (Kronecker sequence)
    const STEPS: [f64; 4] = [0.618_033_988_749_895, 0.414_213_562_373_095, 0.732_050_807_568_877, 0.236_067_977_499_79];
    for s in 0..samples {
        let mut point = vec![0.0; 1 + fiber_dim];
        let u = ((s as f64 + 0.5) * STEPS[0]).fract();
        point[0] = 10f64.powf(3.0 * u);
        for k in 1..=fiber_dim {
            point[k] = TAU * ((s as f64 + 0.5) * STEPS[k % 4] + 0.1 * k as f64).fract();
        }
        let base = e.eval(&point);
        for k in 1..=fiber_dim {
            let mut shifted = point.clone();
            shifted[k] += TAU;
            match (&base, e.eval(&shifted)) {
                (Ok(a), Ok(b)) => {
                    if (a - b).abs() > 1e-10 * a.abs().max(1.0) {
                        return false;
                    }
                }
                (Err(_), Err(_)) => {}
                _ => return false,
            }
        }
    }
    true
}
