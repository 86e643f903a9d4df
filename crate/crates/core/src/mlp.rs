//! The scalar network `Ĥ_θ : R^{2n} → R`: `L` hidden tanh layers of width
//! `M` followed by an affine read-out.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff_engine::{self, AdError, Differentiable, Graph, Jet, Real, Var};
use crate::error::ShnnError;
use crate::field::{ScalarField, SmoothField};

/// A point `y = (p, q)` of phase space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl PhaseState {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self, ShnnError> {
        if p.len() != q.len() || p.is_empty() {
            return Err(ShnnError::InvalidArgument(format!(
                "phase state needs equal, non-zero p and q lengths (got {} and {})",
                p.len(),
                q.len()
            )));
        }
        if p.iter().chain(&q).any(|v| !v.is_finite()) {
            return Err(ShnnError::InvalidArgument(
                "phase state entries must be finite".into(),
            ));
        }
        Ok(Self { p, q })
    }

    /// Splits a flat `(p, q)` vector.
    pub fn from_flat(y: &[f64]) -> Result<Self, ShnnError> {
        if y.len() % 2 != 0 {
            return Err(ShnnError::InvalidArgument(format!(
                "phase-space vector has odd length {}",
                y.len()
            )));
        }
        let n = y.len() / 2;
        Self::new(y[..n].to_vec(), y[n..].to_vec())
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut y = self.p.clone();
        y.extend_from_slice(&self.q);
        y
    }
}

/// `(−∇_q F, ∇_p F)` from a gradient stored in `(p, q)` order.
pub fn symplectic_from_gradient(grad: &[f64]) -> Vec<f64> {
    let n = grad.len() / 2;
    let mut out = Vec::with_capacity(grad.len());
    out.extend(grad[n..].iter().map(|g| -g));
    out.extend_from_slice(&grad[..n]);
    out
}

/// Network shape: `n_dim` degrees of freedom, `depth` hidden layers of `width` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_dim: usize,
    pub depth: usize,
    pub width: usize,
}

impl Architecture {
    pub fn new(n_dim: usize, depth: usize, width: usize) -> Result<Self, ShnnError> {
        if n_dim == 0 || depth == 0 || width == 0 {
            return Err(ShnnError::InvalidArgument(format!(
                "network dimensions must be positive (n_dim={n_dim}, L={depth}, M={width})"
            )));
        }
        Ok(Self {
            n_dim,
            depth,
            width,
        })
    }

    pub fn input_dim(&self) -> usize {
        2 * self.n_dim
    }

    /// `(out, in)` of every weight matrix, input layer first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        dims.push((self.width, self.input_dim()));
        for _ in 1..self.depth {
            dims.push((self.width, self.width));
        }
        dims.push((1, self.width));
        dims
    }
}

impl Differentiable for Architecture {
    fn input_dim(&self) -> usize {
        Architecture::input_dim(self)
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.layer_dims()
            .into_iter()
            .flat_map(|(out, inp)| [(out, inp), (1, out)])
            .collect()
    }

    fn build(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, AdError> {
        let layers = self.depth + 1;
        let mut h = x;
        for l in 0..layers {
            let z = g.affine(h, params[2 * l], params[2 * l + 1])?;
            h = if l + 1 < layers { g.tanh(z)? } else { z };
        }
        Ok(h)
    }
}

/// Parameter initialization rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Weights `U(±√(6/(fan_in + fan_out)))`, zero biases.
    #[default]
    Glorot,
    /// Weights and biases `U(±1/√fan_in)`, the default of common deep-learning
    /// frameworks for linear layers.
    FanIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// (out × in)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights and biases of `Ĥ_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(seed: u64, arch: Architecture) -> Self {
        Self::init_with(seed, arch, Init::Glorot)
    }

    pub fn init_with(seed: u64, arch: Architecture, init: Init) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| match init {
                Init::Glorot => {
                    let limit = (6.0 / (out + inp) as f64).sqrt();
                    Layer {
                        weight: Array2::from_shape_simple_fn((out, inp), || {
                            rng.random_range(-limit..limit)
                        }),
                        bias: Array1::zeros(out),
                    }
                }
                Init::FanIn => {
                    let limit = 1.0 / (inp as f64).sqrt();
                    let weight = Array2::from_shape_simple_fn((out, inp), || {
                        rng.random_range(-limit..limit)
                    });
                    let bias = Array1::from_shape_simple_fn(out, || rng.random_range(-limit..limit));
                    Layer { weight, bias }
                }
            })
            .collect();
        Self { arch, layers }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| Layer {
                weight: Array2::zeros((out, inp)),
                bias: Array1::zeros(out),
            })
            .collect();
        Self { arch, layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weight (row-major), then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            flat.extend(l.weight.iter().copied());
            flat.extend(l.bias.iter().copied());
        }
        flat
    }

    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self, ShnnError> {
        let expected = arch.param_dim();
        if flat.len() != expected {
            return Err(ShnnError::InvalidArgument(format!(
                "expected {expected} parameters, got {}",
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(ShnnError::InvalidArgument(
                "parameters must be finite".into(),
            ));
        }
        let mut offset = 0;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| {
                let w = &flat[offset..offset + out * inp];
                offset += out * inp;
                let b = &flat[offset..offset + out];
                offset += out;
                Layer {
                    weight: Array2::from_shape_vec((out, inp), w.to_vec()).expect("weight shape"),
                    bias: Array1::from_vec(b.to_vec()),
                }
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// Little-endian `f64` blob of [`MlpParams::to_flat`].
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.to_flat().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(arch: Architecture, bytes: &[u8]) -> Result<Self, ShnnError> {
        if bytes.len() % 8 != 0 {
            return Err(ShnnError::Format(format!(
                "parameter blob length {} is not a multiple of 8",
                bytes.len()
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::from_flat(arch, &flat)
    }

    fn check_input<T>(&self, y: &[T]) -> Result<(), ShnnError> {
        let d = self.arch.input_dim();
        if y.len() != d {
            return Err(AdError::InputDimension {
                expected: d,
                got: y.len(),
            }
            .into());
        }
        Ok(())
    }

    /// `Ĥ(y)`.
    pub fn forward(&self, y: &[f64]) -> Result<f64, ShnnError> {
        self.check_input(y)?;
        let mut h: Vec<f64> = y.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = layer.weight.row(o);
                *zo += row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
            }
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = z;
        }
        Ok(h[0])
    }

    /// The forward pass on any [`Real`] scalar type.
    pub fn forward_generic<T: Real>(&self, y: &[T]) -> Result<T, ShnnError> {
        self.check_input(y)?;
        let zero = y[0].constant_like(0.0);
        let mut h: Vec<T> = y.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z: Vec<T> = (0..layer.weight.nrows())
                .map(|o| {
                    let row = layer.weight.row(o);
                    let acc = row
                        .iter()
                        .zip(&h)
                        .fold(zero.clone(), |acc, (w, x)| acc + x.scale(*w));
                    acc.offset(layer.bias[o])
                })
                .collect();
            h = if l < last {
                z.iter().map(|v| v.tanh()).collect()
            } else {
                z
            };
        }
        Ok(h.swap_remove(0))
    }

    /// `(Ĥ(y), ∇Ĥ(y))` through the differentiation engine.
    pub fn value_and_gradient(&self, y: &[f64]) -> Result<(f64, Vec<f64>), ShnnError> {
        Ok(diff_engine::value_and_input_gradient(
            &self.arch,
            &self.to_flat(),
            y,
        )?)
    }

    /// `J⁻¹∇Ĥ(y) = (−∇_qĤ, ∇_pĤ)`.
    pub fn symplectic_gradient(&self, y: &[f64]) -> Result<Vec<f64>, ShnnError> {
        let (_, grad) = self.value_and_gradient(y)?;
        Ok(symplectic_from_gradient(&grad))
    }
}

/// Single-point evaluation with a hand-written backward pass. The checked
/// entry points above route through the differentiation engine; this path
/// serves integrators and metrics that call the field many times.
impl ScalarField for MlpParams {
    fn dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn value(&self, y: &[f64]) -> f64 {
        self.forward(y).expect("input dimension matches the network")
    }

    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.arch.input_dim(), "input dimension");
        let last = self.layers.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut h: Vec<f64> = y.to_vec();
        for layer in &self.layers[..last] {
            let z: Vec<f64> = layer
                .weight
                .rows()
                .into_iter()
                .zip(&layer.bias)
                .map(|(row, b)| (b + row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>()).tanh())
                .collect();
            acts.push(z.clone());
            h = z;
        }
        let mut delta: Vec<f64> = self.layers[last].weight.row(0).to_vec();
        for (l, layer) in self.layers[..last].iter().enumerate().rev() {
            let t = &acts[l];
            let mut back = vec![0.0; layer.weight.ncols()];
            for (o, row) in layer.weight.rows().into_iter().enumerate() {
                let dz = delta[o] * (1.0 - t[o] * t[o]);
                back.iter_mut().zip(row).for_each(|(b, w)| *b += dz * w);
            }
            delta = back;
        }
        delta
    }
}

impl SmoothField for MlpParams {
    fn jet(&self, y: &[f64]) -> Jet {
        self.forward_generic(&Jet::seed_point(y))
            .expect("input dimension matches the network")
    }
}
