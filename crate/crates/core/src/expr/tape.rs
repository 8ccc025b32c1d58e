//! Flattened postfix form of an [`Expr`] for repeated evaluation.
//!
//! Constant subtrees are folded at compile time. When an instruction hits a
//! domain problem the original tree is re-evaluated to produce an error that
//! names the offending subexpression.

use super::{apply_func, apply_func_jet, check_func, check_pow, Expr, Func, Jet2, MAX_VARS};
use crate::error::EvalError;

#[derive(Clone, Copy, Debug)]
enum Op {
    Const(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow(f64),
    Func(Func),
}

#[derive(Clone, Debug)]
pub struct CompiledExpr {
    expr: Expr,
    ops: Vec<Op>,
    depth: usize,
}

fn emit(e: &Expr, ops: &mut Vec<Op>) {
    if !e.depends_on_any() {
        if let Ok(v) = e.eval(&[]) {
            ops.push(Op::Const(v));
            return;
        }
    }
    match e {
        Expr::Num(v) => ops.push(Op::Const(*v)),
        Expr::Var(v) => ops.push(Op::Var(v.index())),
        Expr::Neg(a) => {
            emit(a, ops);
            ops.push(Op::Neg);
        }
        Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
            emit(a, ops);
            emit(b, ops);
            ops.push(match e {
                Expr::Add(..) => Op::Add,
                Expr::Sub(..) => Op::Sub,
                Expr::Mul(..) => Op::Mul,
                _ => Op::Div,
            });
        }
        Expr::Pow(a, p) => {
            emit(a, ops);
            ops.push(Op::Pow(*p));
        }
        Expr::Func(f, a) => {
            emit(a, ops);
            ops.push(Op::Func(*f));
        }
    }
}

impl CompiledExpr {
    pub fn new(e: &Expr) -> Self {
        let mut ops = Vec::new();
        emit(e, &mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Var(_) => depth += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div => depth -= 1,
                _ => {}
            }
            max_depth = max_depth.max(depth);
        }
        CompiledExpr {
            expr: e.clone(),
            ops,
            depth: max_depth,
        }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    /// The constant value, if the expression has no variables.
    pub fn as_constant(&self) -> Option<f64> {
        match self.ops.as_slice() {
            [Op::Const(v)] => Some(*v),
            _ => None,
        }
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64, EvalError> {
        let mut stack: Vec<f64> = Vec::with_capacity(self.depth);
        for op in &self.ops {
            let ok = match *op {
                Op::Const(v) => {
                    stack.push(v);
                    true
                }
                Op::Var(i) => match point.get(i) {
                    Some(v) => {
                        stack.push(*v);
                        true
                    }
                    None => false,
                },
                Op::Neg => {
                    let a = stack.last_mut().expect("tape underflow");
                    *a = -*a;
                    true
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div => {
                    let b = stack.pop().expect("tape underflow");
                    let a = stack.last_mut().expect("tape underflow");
                    match *op {
                        Op::Add => *a += b,
                        Op::Sub => *a -= b,
                        Op::Mul => *a *= b,
                        _ => *a /= b,
                    }
                    !(matches!(op, Op::Div) && b == 0.0)
                }
                Op::Pow(p) => {
                    let a = stack.last_mut().expect("tape underflow");
                    let ok = check_pow(*a, p, false).is_ok();
                    *a = a.powf(p);
                    ok
                }
                Op::Func(f) => {
                    let a = stack.last_mut().expect("tape underflow");
                    let ok = check_func(f, *a, false).is_ok();
                    *a = apply_func(f, *a);
                    ok
                }
            };
            if !ok || !stack.last().is_some_and(|v| v.is_finite()) {
                return Err(self.expr.eval(point).err().unwrap_or_else(|| EvalError::Domain {
                    subexpr: self.expr.to_string(),
                    reason: "non-finite result".into(),
                }));
            }
        }
        Ok(stack.pop().unwrap_or(0.0))
    }

    pub fn eval_jet2(&self, point: &[f64]) -> Result<Jet2, EvalError> {
        let dim = point.len();
        if dim > MAX_VARS {
            return Err(EvalError::Arity {
                needed: MAX_VARS,
                got: dim,
            });
        }
        let mut stack: Vec<Jet2> = Vec::with_capacity(self.depth);
        for op in &self.ops {
            let ok = match *op {
                Op::Const(v) => {
                    stack.push(Jet2::constant(dim, v));
                    true
                }
                Op::Var(i) => {
                    if i < dim {
                        stack.push(Jet2::variable(dim, i, point[i]));
                        true
                    } else {
                        false
                    }
                }
                Op::Neg => {
                    let a = stack.last_mut().expect("tape underflow");
                    *a = -*a;
                    true
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div => {
                    let b = stack.pop().expect("tape underflow");
                    let a = stack.last_mut().expect("tape underflow");
                    if matches!(op, Op::Div) && b.value() == 0.0 {
                        false
                    } else {
                        *a = match *op {
                            Op::Add => *a + b,
                            Op::Sub => *a - b,
                            Op::Mul => *a * b,
                            _ => *a / b,
                        };
                        true
                    }
                }
                Op::Pow(p) => {
                    let a = stack.last_mut().expect("tape underflow");
                    let ok = check_pow(a.value(), p, true).is_ok();
                    *a = a.powf(p);
                    ok
                }
                Op::Func(f) => {
                    let a = stack.last_mut().expect("tape underflow");
                    let ok = check_func(f, a.value(), true).is_ok();
                    *a = apply_func_jet(f, a);
                    ok
                }
            };
            if !ok || !stack.last().is_some_and(|j| j.is_finite()) {
                return Err(self.expr.eval_jet2(point).err().unwrap_or_else(|| EvalError::Domain {
                    subexpr: self.expr.to_string(),
                    reason: "non-finite result or derivative".into(),
                }));
            }
        }
        Ok(stack.pop().unwrap_or_else(|| Jet2::constant(dim, 0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    #[test]
    fn tape_matches_tree() {
        let srcs = ["exp(-x - x^0.5)", "x^(-1)*cos(2*t1) + 0.1*sin(t1)/x^1.5", "bracket(x - t1)*log(x)", "2*pi + 3"];
        for s in srcs {
            let e = parse(s).unwrap();
            let c = e.compile();
            for p in [[2.0, 0.3], [7.5, -1.0], [100.0, 4.0]] {
                assert_eq!(c.eval(&p).unwrap(), e.eval(&p).unwrap(), "{s}");
                assert_eq!(c.eval_jet2(&p).unwrap(), e.eval_jet2(&p).unwrap(), "{s}");
            }
        }
        assert_eq!(parse("2*pi + 3").unwrap().compile().as_constant(), Some(2.0 * std::f64::consts::PI + 3.0));
    }

    #[test]
    fn tape_errors_name_subexpression() {
        let c = parse("1 + log(x - 5)").unwrap().compile();
        match c.eval(&[3.0]) {
            Err(EvalError::Domain { subexpr, .. }) => assert_eq!(subexpr, "log(x - 5.0)"),
            other => panic!("{other:?}"),
        }
        assert!(c.eval_jet2(&[3.0]).is_err());
        assert!(parse("1/x").unwrap().compile().eval(&[0.0]).is_err());
    }
}
