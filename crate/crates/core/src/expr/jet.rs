//! Second-order forward-mode jets.
//!
//! A [`Jet2`] carries a value together with its gradient and Hessian with
//! respect to up to [`MAX_VARS`] independent variables. All arithmetic is
//! propagated in a single pass; the Hessian is stored as a packed upper
//! triangle, so it is symmetric by construction.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Largest number of independent variables a jet can carry (`x` plus three
/// fiber angles).
pub const MAX_VARS: usize = 4;

const PACKED: usize = MAX_VARS * (MAX_VARS + 1) / 2;

#[inline]
const fn tri(i: usize, j: usize) -> usize {
    // i <= j, row-major packed upper triangle for a MAX_VARS x MAX_VARS matrix
    i * MAX_VARS - i * (i + 1) / 2 + j
}

/// Value, gradient and Hessian of a scalar function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet2 {
    dim: usize,
    value: f64,
    grad: [f64; MAX_VARS],
    hess: [f64; PACKED],
}

impl Jet2 {
    /// A constant in `dim` variables.
    pub fn constant(dim: usize, value: f64) -> Self {
        assert!(dim <= MAX_VARS, "jet dimension {dim} exceeds {MAX_VARS}");
        Jet2 {
            dim,
            value,
            grad: [0.0; MAX_VARS],
            hess: [0.0; PACKED],
        }
    }

    /// The independent variable with index `index`, evaluated at `value`.
    pub fn variable(dim: usize, index: usize, value: f64) -> Self {
        let mut j = Self::constant(dim, value);
        assert!(index < dim);
        j.grad[index] = 1.0;
        j
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad[..self.dim]
    }

    pub fn d(&self, i: usize) -> f64 {
        self.grad[i]
    }

    /// Second derivative with respect to variables `i` and `j`.
    pub fn dd(&self, i: usize, j: usize) -> f64 {
        if i <= j {
            self.hess[tri(i, j)]
        } else {
            self.hess[tri(j, i)]
        }
    }

    /// Full Hessian as a dense row-major matrix.
    pub fn hessian(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.dd(i, j)).collect())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad().iter().all(|v| v.is_finite())
            && (0..self.dim).all(|i| (i..self.dim).all(|j| self.hess[tri(i, j)].is_finite()))
    }

    /// Chain rule for a scalar function `f` with `f(u)`, `f'(u)`, `f''(u)`
    /// given as `f0`, `f1`, `f2`.
    #[inline]
    pub fn chain(&self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Self::constant(self.dim, f0);
        for i in 0..self.dim {
            out.grad[i] = f1 * self.grad[i];
            for j in i..self.dim {
                let k = tri(i, j);
                out.hess[k] = f1 * self.hess[k] + f2 * self.grad[i] * self.grad[j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        out.value *= s;
        for i in 0..self.dim {
            out.grad[i] *= s;
            for j in i..self.dim {
                out.hess[tri(i, j)] *= s;
            }
        }
        out
    }

    pub fn recip(&self) -> Self {
        let v = self.value;
        let inv = 1.0 / v;
        self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }

    pub fn powf(&self, p: f64) -> Self {
        let v = self.value;
        if p == 0.0 {
            return Self::constant(self.dim, 1.0);
        }
        let f0 = v.powf(p);
        let f1 = if p == 1.0 { 1.0 } else { p * v.powf(p - 1.0) };
        let f2 = if p == 1.0 {
            0.0
        } else if p == 2.0 {
            2.0
        } else {
            p * (p - 1.0) * v.powf(p - 2.0)
        };
        self.chain(f0, f1, f2)
    }

    pub fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    pub fn ln(&self) -> Self {
        let v = self.value;
        self.chain(v.ln(), 1.0 / v, -1.0 / (v * v))
    }

    pub fn sin(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(&self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn sqrt(&self) -> Self {
        let r = self.value.sqrt();
        self.chain(r, 0.5 / r, -0.25 / (r * self.value))
    }

    /// The japanese bracket `(1 + u^2)^(1/2)`.
    pub fn bracket(&self) -> Self {
        let u = self.value;
        let b = (1.0 + u * u).sqrt();
        self.chain(b, u / b, 1.0 / (b * b * b))
    }
}

impl Add for Jet2 {
    type Output = Jet2;
    #[inline]
    fn add(mut self, rhs: Jet2) -> Jet2 {
        debug_assert_eq!(self.dim, rhs.dim);
        self.value += rhs.value;
        for i in 0..self.dim {
            self.grad[i] += rhs.grad[i];
            for j in i..self.dim {
                self.hess[tri(i, j)] += rhs.hess[tri(i, j)];
            }
        }
        self
    }
}

impl Sub for Jet2 {
    type Output = Jet2;
    #[inline]
    fn sub(mut self, rhs: Jet2) -> Jet2 {
        debug_assert_eq!(self.dim, rhs.dim);
        self.value -= rhs.value;
        for i in 0..self.dim {
            self.grad[i] -= rhs.grad[i];
            for j in i..self.dim {
                self.hess[tri(i, j)] -= rhs.hess[tri(i, j)];
            }
        }
        self
    }
}

impl Neg for Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        self.scale(-1.0)
    }
}

impl Mul for Jet2 {
    type Output = Jet2;
    #[inline]
    fn mul(self, rhs: Jet2) -> Jet2 {
        debug_assert_eq!(self.dim, rhs.dim);
        let mut out = Jet2::constant(self.dim, self.value * rhs.value);
        for i in 0..self.dim {
            out.grad[i] = self.grad[i] * rhs.value + self.value * rhs.grad[i];
            for j in i..self.dim {
                let k = tri(i, j);
                out.hess[k] = self.hess[k] * rhs.value
                    + self.value * rhs.hess[k]
                    + self.grad[i] * rhs.grad[j]
                    + self.grad[j] * rhs.grad[i];
            }
        }
        out
    }
}

impl Div for Jet2 {
    type Output = Jet2;
    #[inline]
    fn div(self, rhs: Jet2) -> Jet2 {
        self * rhs.recip()
    }
}

impl Add<f64> for Jet2 {
    type Output = Jet2;
    fn add(mut self, rhs: f64) -> Jet2 {
        self.value += rhs;
        self
    }
}

impl Mul<f64> for Jet2 {
    type Output = Jet2;
    fn mul(self, rhs: f64) -> Jet2 {
        self.scale(rhs)
    }
}
