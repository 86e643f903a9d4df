//! Reverse-mode tape over dense `f64` matrices.
//!
//! Every node holds a 2-D array. Gradients can be returned either as plain
//! arrays ([`Graph::grad`]) or as new nodes of the same graph
//! ([`Graph::grad_graph`]); the latter lets a loss contain an input gradient
//! and still be differentiated with respect to the parameters. Only one level
//! of such nesting is allowed.

use ndarray::{Array2, Axis};

use super::AdError;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Variable,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    AddRow(Var, Var),
    SumRows(Var),
    SumAll(Var),
    BroadcastRows(Var),
    BroadcastScalar(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
    /// 0 for primal nodes, 1 for nodes produced by a differentiable backward pass.
    order: u8,
}

/// A tape of matrix-valued nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(what: &'static str, a: &Array2<f64>) -> Result<(), AdError> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AdError::NonFinite(what))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Nesting level of a node: 1 if it was built by [`Graph::grad_graph`].
    pub fn order(&self, v: Var) -> u8 {
        self.nodes[v.0].order
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool, order: u8) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            order,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Result<Var, AdError> {
        check_finite("intermediate value", &value)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let order = parents
            .iter()
            .map(|p| self.nodes[p.0].order)
            .max()
            .unwrap_or(0);
        Ok(self.push(value, op, requires_grad, order))
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Array2<f64>) -> Result<Var, AdError> {
        check_finite("variable", &value)?;
        Ok(self.push(value, Op::Variable, true, 0))
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Result<Var, AdError> {
        check_finite("constant", &value)?;
        Ok(self.push(value, Op::Constant, false, 0))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AdError::ShapeMismatch {
                op: "elementwise",
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let value = self.value(a).dot(self.value(b));
        self.push_op(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AdError> {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push_op(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.same_shape(a, b)?;
        let value = self.value(a) + self.value(b);
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.same_shape(a, b)?;
        let value = self.value(a) - self.value(b);
        self.push_op(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.same_shape(a, b)?;
        let value = self.value(a) * self.value(b);
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let value = self.value(a) * c;
        self.push_op(value, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let value = self.value(a) + c;
        self.push_op(value, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AdError> {
        let value = self.value(a).mapv(f64::tanh);
        self.push_op(value, Op::Tanh(a), &[a])
    }

    /// `a` (m×n) plus the row vector `row` (1×n) added to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AdError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(AdError::ShapeMismatch {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let value = self.value(a) + self.value(row);
        self.push_op(value, Op::AddRow(a, row), &[a, row])
    }

    /// Column sums as a 1×n row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, AdError> {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push_op(value, Op::SumRows(a), &[a])
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, AdError> {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push_op(value, Op::SumAll(a), &[a])
    }

    /// Repeats a 1×n row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, AdError> {
        let s = self.shape(a);
        if s.0 != 1 {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_rows",
                left: s,
                right: (rows, s.1),
            });
        }
        let value = self
            .value(a)
            .broadcast((rows, s.1))
            .expect("row broadcast")
            .to_owned();
        self.push_op(value, Op::BroadcastRows(a), &[a])
    }

    /// Fills an m×n matrix with the value of a 1×1 node.
    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, AdError> {
        let s = self.shape(a);
        if s != (1, 1) {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_scalar",
                left: s,
                right: (rows, cols),
            });
        }
        let value = Array2::from_elem((rows, cols), self.scalar(a));
        self.push_op(value, Op::BroadcastScalar(a), &[a])
    }

    /// `x · wᵀ + b` with `w` stored as (out × in) and `b` as a 1×out row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        self.add_row(xw, b)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let ab = self.mul(a, b)?;
        self.sum_all(ab)
    }

    pub fn norm_sq(&mut self, a: Var) -> Result<Var, AdError> {
        self.dot(a, a)
    }

    /// Marks nodes lying on a path from any of `wrt` to `output`.
    fn relevant(&self, output: Var, wrt: &[Var]) -> Vec<bool> {
        let mut rel = vec![false; output.0 + 1];
        for w in wrt {
            if w.0 <= output.0 {
                rel[w.0] = true;
            }
        }
        for i in 0..=output.0 {
            if rel[i] {
                continue;
            }
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            rel[i] = parents(node.op).iter().any(|p| rel[p.0]);
        }
        rel
    }

    fn check_output(&self, output: Var) -> Result<(), AdError> {
        let s = self.shape(output);
        if s != (1, 1) {
            return Err(AdError::NonScalarOutput(s));
        }
        Ok(())
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`, as plain arrays.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Array2<f64>>, AdError> {
        self.check_output(output)?;
        let rel = self.relevant(output, wrt);
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Array2::ones((1, 1)));

        let accumulate = |adj: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| {
            if !rel[v.0] {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        };

        for i in (0..=output.0).rev() {
            if !rel[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match node.op {
                Op::Variable | Op::Constant => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if rel[a.0] {
                        accumulate(&mut adj, a, g.dot(&self.value(b).t()));
                    }
                    if rel[b.0] {
                        accumulate(&mut adj, b, self.value(a).t().dot(&g));
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut adj, a, g.t().as_standard_layout().into_owned())
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, b, g.clone());
                    accumulate(&mut adj, a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, b, -&g);
                    accumulate(&mut adj, a, g);
                }
                Op::Mul(a, b) => {
                    if rel[a.0] {
                        accumulate(&mut adj, a, &g * self.value(b));
                    }
                    if rel[b.0] {
                        accumulate(&mut adj, b, &g * self.value(a));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, a, g * c),
                Op::AddScalar(a) => accumulate(&mut adj, a, g),
                Op::Tanh(a) => {
                    let t = &node.value;
                    let d = t.mapv(|t| 1.0 - t * t);
                    accumulate(&mut adj, a, g * d);
                }
                Op::AddRow(a, row) => {
                    if rel[row.0] {
                        accumulate(&mut adj, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    accumulate(&mut adj, a, g);
                }
                Op::SumRows(a) => {
                    let rows = self.shape(a).0;
                    let full = g.broadcast((rows, g.ncols())).expect("row broadcast").to_owned();
                    accumulate(&mut adj, a, full);
                }
                Op::SumAll(a) => {
                    let full = Array2::from_elem(self.shape(a), g[[0, 0]]);
                    accumulate(&mut adj, a, full);
                }
                Op::BroadcastRows(a) => {
                    accumulate(&mut adj, a, g.sum_axis(Axis(0)).insert_axis(Axis(0)))
                }
                Op::BroadcastScalar(a) => {
                    accumulate(&mut adj, a, Array2::from_elem((1, 1), g.sum()))
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                adj.get(w.0)
                    .and_then(|a| a.clone())
                    .unwrap_or_else(|| Array2::zeros(self.shape(*w)))
            })
            .collect())
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`, recorded
    /// as new nodes so that it can be differentiated again.
    ///
    /// Fails with [`AdError::NestingTooDeep`] when `output` already depends on
    /// a node produced by an earlier call.
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AdError> {
        self.check_output(output)?;
        if self.order(output) >= 1 {
            return Err(AdError::NestingTooDeep);
        }
        let rel = self.relevant(output, wrt);
        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        let seed = self.constant(Array2::ones((1, 1)))?;
        adj[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            if !rel[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op;
            let mut contributions: Vec<(Var, Var)> = Vec::with_capacity(2);
            match op {
                Op::Variable | Op::Constant => continue,
                Op::MatMul(a, b) => {
                    if rel[a.0] {
                        let bt = self.transpose(b)?;
                        contributions.push((a, self.matmul(g, bt)?));
                    }
                    if rel[b.0] {
                        let at = self.transpose(a)?;
                        contributions.push((b, self.matmul(at, g)?));
                    }
                }
                Op::Transpose(a) => contributions.push((a, self.transpose(g)?)),
                Op::Add(a, b) => {
                    contributions.push((a, g));
                    contributions.push((b, g));
                }
                Op::Sub(a, b) => {
                    contributions.push((a, g));
                    if rel[b.0] {
                        contributions.push((b, self.neg(g)?));
                    }
                }
                Op::Mul(a, b) => {
                    if rel[a.0] {
                        contributions.push((a, self.mul(g, b)?));
                    }
                    if rel[b.0] {
                        contributions.push((b, self.mul(g, a)?));
                    }
                }
                Op::Scale(a, c) => contributions.push((a, self.scale(g, c)?)),
                Op::AddScalar(a) => contributions.push((a, g)),
                Op::Tanh(a) => {
                    let t = Var(i);
                    let t2 = self.mul(t, t)?;
                    let neg = self.scale(t2, -1.0)?;
                    let d = self.add_scalar(neg, 1.0)?;
                    contributions.push((a, self.mul(g, d)?));
                }
                Op::AddRow(a, row) => {
                    contributions.push((a, g));
                    if rel[row.0] {
                        contributions.push((row, self.sum_rows(g)?));
                    }
                }
                Op::SumRows(a) => {
                    let rows = self.shape(a).0;
                    contributions.push((a, self.broadcast_rows(g, rows)?));
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(a);
                    contributions.push((a, self.broadcast_scalar(g, r, c)?));
                }
                Op::BroadcastRows(a) => contributions.push((a, self.sum_rows(g)?)),
                Op::BroadcastScalar(a) => contributions.push((a, self.sum_all(g)?)),
            }
            for (target, contrib) in contributions {
                if !rel[target.0] {
                    continue;
                }
                adj[target.0] = Some(match adj[target.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        // Mark every node built above as derived so a second nesting is refused.
        let first_new = output.0 + 1;
        for node in &mut self.nodes[first_new..] {
            node.order = node.order.max(1);
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(v) => Ok(v),
                None => {
                    let z = Array2::zeros(self.shape(*w));
                    let v = self.constant(z)?;
                    self.nodes[v.0].order = 1;
                    Ok(v)
                }
            })
            .collect()
    }
}

fn parents(op: Op) -> Vec<Var> {
    match op {
        Op::Variable | Op::Constant => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![a, b]
        }
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Tanh(a)
        | Op::SumRows(a)
        | Op::SumAll(a)
        | Op::BroadcastRows(a)
        | Op::BroadcastScalar(a) => vec![a],
    }
}
