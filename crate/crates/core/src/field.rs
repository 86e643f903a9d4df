//! Uniform access to scalar fields on phase space: analytic Hamiltonians,
//! networks, and corrected networks all evaluate through these traits.

use crate::diff_engine::{Dual, Jet};
use crate::mlp::symplectic_from_gradient;

/// A scalar function on `R^{2n}` with exact value and gradient.
pub trait ScalarField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, y: &[f64]) -> f64;
    fn gradient(&self, y: &[f64]) -> Vec<f64>;

    /// `J⁻¹∇F(y)`.
    fn symplectic_gradient(&self, y: &[f64]) -> Vec<f64> {
        symplectic_from_gradient(&self.gradient(y))
    }
}

/// A field whose derivatives up to third order are available.
pub trait SmoothField: ScalarField {
    fn jet(&self, y: &[f64]) -> Jet;

    fn hessian(&self, y: &[f64]) -> Vec<Vec<f64>> {
        let j = self.jet(y);
        (0..j.d)
            .map(|i| (0..j.d).map(|k| j.hess(i, k)).collect())
            .collect()
    }
}

/// Value, gradient and Hessian of a field at one point, over a scalar type
/// `T`. With `T = f64` this is plain data; with `T = Dual` every entry also
/// carries its own gradient, which makes expressions built from these
/// derivatives differentiable once more.
#[derive(Debug, Clone)]
pub struct Derivs<T> {
    pub value: T,
    pub grad: Vec<T>,
    /// Row-major `d × d`.
    pub hess: Vec<T>,
}

impl<T> Derivs<T> {
    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn n(&self) -> usize {
        self.grad.len() / 2
    }

    pub fn h(&self, i: usize, j: usize) -> &T {
        &self.hess[i * self.dim() + j]
    }
}

impl Derivs<f64> {
    pub fn from_jet(j: &Jet) -> Self {
        Self {
            value: j.v,
            grad: j.g.clone(),
            hess: j.h.clone(),
        }
    }
}

impl Derivs<Dual> {
    /// Lifts a third-order jet so that each derivative entry carries its gradient.
    pub fn lifted(j: &Jet) -> Self {
        let d = j.d;
        let value = Dual::new(j.v, j.g.clone());
        let grad = (0..d)
            .map(|i| Dual::new(j.g[i], (0..d).map(|k| j.hess(i, k)).collect()))
            .collect();
        let hess = (0..d * d)
            .map(|ij| {
                let (i, k) = (ij / d, ij % d);
                Dual::new(j.hess(i, k), (0..d).map(|l| j.third(i, k, l)).collect())
            })
            .collect();
        Self { value, grad, hess }
    }
}

/// A closure-backed field for ad-hoc use.
pub struct FnField<V, G> {
    pub dim: usize,
    pub value: V,
    pub gradient: G,
}

impl<V, G> ScalarField for FnField<V, G>
where
    V: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, y: &[f64]) -> f64 {
        (self.value)(y)
    }
    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        (self.gradient)(y)
    }
}
