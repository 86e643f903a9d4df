//! Exact derivatives of scalar programs.
//!
//! Programs are written against a [`Graph`] (reverse mode over matrices).
//! The entry points here cover what the rest of the crate needs: value and
//! input gradient, the dense input Hessian, and the parameter gradient of an
//! objective that may itself contain an input gradient.

mod graph;
pub mod jet;

pub use graph::{Graph, Var};
pub use jet::{Dual, Jet, Real};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("input dimension {got} does not match program dimension {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("parameter vector has {got} entries, program expects {expected}")]
    ParamDimension { expected: usize, got: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("gradient requested of a non-scalar node with shape {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("non-finite {0} encountered")]
    NonFinite(&'static str),
    #[error("unsupported operation: differentiable gradients may only be nested one level deep")]
    NestingTooDeep,
}

/// A scalar program `f(params; y)` over inputs of dimension `input_dim`.
///
/// `build` receives a batch `x` of shape (B × d) and must return a (B × 1)
/// node whose rows depend only on the matching rows of `x`.
pub trait Differentiable {
    fn input_dim(&self) -> usize;
    fn param_shapes(&self) -> Vec<(usize, usize)>;
    fn build(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, AdError>;

    fn param_dim(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// A scalar objective of the parameters alone. It may call
/// [`Graph::grad_graph`] once to use an input gradient internally.
pub trait Objective {
    fn param_shapes(&self) -> Vec<(usize, usize)>;
    fn build(&self, g: &mut Graph, params: &[Var]) -> Result<Var, AdError>;
}

/// Registers a flat parameter vector as one variable per shape.
pub fn load_params(
    g: &mut Graph,
    shapes: &[(usize, usize)],
    flat: &[f64],
) -> Result<Vec<Var>, AdError> {
    let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if flat.len() != expected {
        return Err(AdError::ParamDimension {
            expected,
            got: flat.len(),
        });
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let block = Array2::from_shape_vec((r, c), flat[offset..offset + r * c].to_vec())
                .expect("parameter block shape");
            offset += r * c;
            g.variable(block)
        })
        .collect()
}

fn check_point(dim: usize, y: &[f64]) -> Result<(), AdError> {
    if y.len() != dim {
        return Err(AdError::InputDimension {
            expected: dim,
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(AdError::NonFinite("input point"));
    }
    Ok(())
}

/// `(f(y), ∇_y f(y))`.
pub fn value_and_input_gradient<F: Differentiable + ?Sized>(
    f: &F,
    params: &[f64],
    y: &[f64],
) -> Result<(f64, Vec<f64>), AdError> {
    let d = f.input_dim();
    check_point(d, y)?;
    let mut g = Graph::new();
    let p = load_params(&mut g, &f.param_shapes(), params)?;
    let x = g.variable(Array2::from_shape_vec((1, d), y.to_vec()).expect("row"))?;
    let out = f.build(&mut g, &p, x)?;
    let s = g.sum_all(out)?;
    let grad = g.grad(s, &[x])?.remove(0);
    Ok((g.scalar(s), grad.iter().copied().collect()))
}

/// Values and input gradients for every row of `ys` (B × d) in one pass.
pub fn batch_value_and_gradient<F: Differentiable + ?Sized>(
    f: &F,
    params: &[f64],
    ys: &Array2<f64>,
) -> Result<(Vec<f64>, Array2<f64>), AdError> {
    let d = f.input_dim();
    if ys.ncols() != d {
        return Err(AdError::InputDimension {
            expected: d,
            got: ys.ncols(),
        });
    }
    let mut g = Graph::new();
    let p = load_params(&mut g, &f.param_shapes(), params)?;
    let x = g.variable(ys.clone())?;
    let out = f.build(&mut g, &p, x)?;
    let values = g.value(out).column(0).to_vec();
    let s = g.sum_all(out)?;
    let grad = g.grad(s, &[x])?.remove(0);
    Ok((values, grad))
}

/// Dense input Hessian, symmetrized.
pub fn input_hessian<F: Differentiable + ?Sized>(
    f: &F,
    params: &[f64],
    y: &[f64],
) -> Result<Array2<f64>, AdError> {
    let raw = input_hessian_raw(f, params, y)?;
    Ok((&raw + &raw.t()) * 0.5)
}

/// Hessian rows as computed, before symmetrization.
pub fn input_hessian_raw<F: Differentiable + ?Sized>(
    f: &F,
    params: &[f64],
    y: &[f64],
) -> Result<Array2<f64>, AdError> {
    let d = f.input_dim();
    check_point(d, y)?;
    let mut g = Graph::new();
    let p = load_params(&mut g, &f.param_shapes(), params)?;
    let x = g.variable(Array2::from_shape_vec((1, d), y.to_vec()).expect("row"))?;
    let out = f.build(&mut g, &p, x)?;
    let s = g.sum_all(out)?;
    let gx = g.grad_graph(s, &[x])?[0];
    let mut hess = Array2::zeros((d, d));
    for i in 0..d {
        let mut e = Array2::zeros((1, d));
        e[[0, i]] = 1.0;
        let ev = g.constant(e)?;
        let gi = g.dot(gx, ev)?;
        let row = g.grad(gi, &[x])?.remove(0);
        hess.row_mut(i).assign(&row.row(0));
    }
    Ok(hess)
}

/// `(loss, ∂loss/∂params)` flattened in the order of `param_shapes`.
pub fn parameter_gradient<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
) -> Result<(f64, Vec<f64>), AdError> {
    let mut g = Graph::new();
    let shapes = obj.param_shapes();
    let p = load_params(&mut g, &shapes, params)?;
    let loss = obj.build(&mut g, &p)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(AdError::NonFinite("objective value"));
    }
    let grads = g.grad(loss, &p)?;
    let mut flat = Vec::with_capacity(params.len());
    for gr in grads {
        flat.extend(gr.iter().copied());
    }
    Ok((value, flat))
}

/// Evaluates an objective without differentiating it with respect to the parameters.
pub fn objective_value<O: Objective + ?Sized>(obj: &O, params: &[f64]) -> Result<f64, AdError> {
    let mut g = Graph::new();
    let p = load_params(&mut g, &obj.param_shapes(), params)?;
    let loss = obj.build(&mut g, &p)?;
    Ok(g.scalar(loss))
}
