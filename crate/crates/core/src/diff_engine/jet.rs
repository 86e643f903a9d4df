//! Forward-mode derivative numbers over a small input space.
//!
//! [`Jet`] carries a value with its gradient, Hessian and third-derivative
//! tensor with respect to `d` seed directions; [`Dual`] carries only the
//! gradient. Both implement [`Real`], so closed-form Hamiltonians and the
//! network forward pass can be written once and evaluated on either.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by `f64`, [`Dual`] and [`Jet`].
pub trait Real:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// A constant with the same derivative dimension as `self`.
    fn constant_like(&self, c: f64) -> Self;
    fn value(&self) -> f64;
    fn scale(&self, c: f64) -> Self;
    fn offset(&self, c: f64) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tanh(&self) -> Self;
}

impl Real for f64 {
    fn constant_like(&self, c: f64) -> Self {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn scale(&self, c: f64) -> Self {
        self * c
    }
    fn offset(&self, c: f64) -> Self {
        self + c
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
}

/// Value plus gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub g: Vec<f64>,
}

impl Dual {
    pub fn new(v: f64, g: Vec<f64>) -> Self {
        Self { v, g }
    }

    pub fn constant(v: f64, dim: usize) -> Self {
        Self {
            v,
            g: vec![0.0; dim],
        }
    }

    /// The `i`-th coordinate seeded with a unit tangent.
    pub fn seed(v: f64, i: usize, dim: usize) -> Self {
        let mut g = vec![0.0; dim];
        g[i] = 1.0;
        Self { v, g }
    }

    fn chain(&self, f0: f64, f1: f64) -> Self {
        Self {
            v: f0,
            g: self.g.iter().map(|g| f1 * g).collect(),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(mut self, rhs: Dual) -> Dual {
        self.v += rhs.v;
        self.g.iter_mut().zip(&rhs.g).for_each(|(a, b)| *a += b);
        self
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(mut self, rhs: Dual) -> Dual {
        self.v -= rhs.v;
        self.g.iter_mut().zip(&rhs.g).for_each(|(a, b)| *a -= b);
        self
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual {
            v: self.v * rhs.v,
            g: self
                .g
                .iter()
                .zip(&rhs.g)
                .map(|(a, b)| a * rhs.v + self.v * b)
                .collect(),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.v;
        let recip = rhs.chain(inv, -inv * inv);
        self * recip
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.scale(-1.0)
    }
}

impl Real for Dual {
    fn constant_like(&self, c: f64) -> Self {
        Dual::constant(c, self.g.len())
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn scale(&self, c: f64) -> Self {
        Dual {
            v: self.v * c,
            g: self.g.iter().map(|g| g * c).collect(),
        }
    }
    fn offset(&self, c: f64) -> Self {
        Dual {
            v: self.v + c,
            g: self.g.clone(),
        }
    }
    fn sin(&self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(&self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn tanh(&self) -> Self {
        let t = self.v.tanh();
        self.chain(t, 1.0 - t * t)
    }
}

/// Third-order truncated Taylor number in `d` variables.
///
/// `h` and `t` are stored densely in row-major order (`d²` and `d³` entries).
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub d: usize,
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub t: Vec<f64>,
}

impl Jet {
    pub fn constant(v: f64, d: usize) -> Self {
        Self {
            d,
            v,
            g: vec![0.0; d],
            h: vec![0.0; d * d],
            t: vec![0.0; d * d * d],
        }
    }

    /// The `i`-th input coordinate.
    pub fn seed(v: f64, i: usize, d: usize) -> Self {
        let mut j = Self::constant(v, d);
        j.g[i] = 1.0;
        j
    }

    /// Seeds every coordinate of a point.
    pub fn seed_point(y: &[f64]) -> Vec<Jet> {
        let d = y.len();
        y.iter()
            .enumerate()
            .map(|(i, &v)| Jet::seed(v, i, d))
            .collect()
    }

    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.d + j]
    }

    pub fn third(&self, i: usize, j: usize, k: usize) -> f64 {
        self.t[(i * self.d + j) * self.d + k]
    }

    /// Composes a scalar function with derivatives `f0..f3` at `self.v`.
    fn chain(&self, f0: f64, f1: f64, f2: f64, f3: f64) -> Self {
        let d = self.d;
        let g = &self.g;
        let h = &self.h;
        let mut out = Jet::constant(f0, d);
        for i in 0..d {
            out.g[i] = f1 * g[i];
        }
        for i in 0..d {
            for j in 0..d {
                out.h[i * d + j] = f2 * g[i] * g[j] + f1 * h[i * d + j];
            }
        }
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let idx = (i * d + j) * d + k;
                    out.t[idx] = f3 * g[i] * g[j] * g[k]
                        + f2 * (h[i * d + j] * g[k] + h[i * d + k] * g[j] + h[j * d + k] * g[i])
                        + f1 * self.t[idx];
                }
            }
        }
        out
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, rhs: Jet) -> Jet {
        self.v += rhs.v;
        self.g.iter_mut().zip(&rhs.g).for_each(|(a, b)| *a += b);
        self.h.iter_mut().zip(&rhs.h).for_each(|(a, b)| *a += b);
        self.t.iter_mut().zip(&rhs.t).for_each(|(a, b)| *a += b);
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        self + rhs.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, b: Jet) -> Jet {
        let a = self;
        let d = a.d;
        let mut out = Jet::constant(a.v * b.v, d);
        for i in 0..d {
            out.g[i] = a.g[i] * b.v + a.v * b.g[i];
        }
        for i in 0..d {
            for j in 0..d {
                let ij = i * d + j;
                out.h[ij] = a.h[ij] * b.v + a.g[i] * b.g[j] + a.g[j] * b.g[i] + a.v * b.h[ij];
            }
        }
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let idx = (i * d + j) * d + k;
                    let (ij, ik, jk) = (i * d + j, i * d + k, j * d + k);
                    out.t[idx] = a.t[idx] * b.v
                        + a.v * b.t[idx]
                        + a.h[ij] * b.g[k]
                        + a.h[ik] * b.g[j]
                        + a.h[jk] * b.g[i]
                        + a.g[i] * b.h[jk]
                        + a.g[j] * b.h[ik]
                        + a.g[k] * b.h[ij];
                }
            }
        }
        out
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        let x = rhs.v;
        let inv = 1.0 / x;
        let recip = rhs.chain(inv, -inv * inv, 2.0 * inv * inv * inv, -6.0 * inv.powi(4));
        self * recip
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Real for Jet {
    fn constant_like(&self, c: f64) -> Self {
        Jet::constant(c, self.d)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn scale(&self, c: f64) -> Self {
        Jet {
            d: self.d,
            v: self.v * c,
            g: self.g.iter().map(|x| x * c).collect(),
            h: self.h.iter().map(|x| x * c).collect(),
            t: self.t.iter().map(|x| x * c).collect(),
        }
    }
    fn offset(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.v += c;
        out
    }
    fn sin(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s, -c)
    }
    fn cos(&self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c, s)
    }
    fn tanh(&self) -> Self {
        let t = self.v.tanh();
        let d1 = 1.0 - t * t;
        let d2 = -2.0 * t * d1;
        let d3 = d1 * (6.0 * t * t - 2.0);
        self.chain(t, d1, d2, d3)
    }
}
