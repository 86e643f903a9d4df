//! Series relating the modified Hamiltonian learned with a symplectic scheme
//! to the true one: inverse series that correct a learned `Ĥ` back towards
//! `H`, and forward series that build `Ĥ` from a known `H`.
//!
//! For `n > 1` the bilinear terms of the symplectic Euler series pair the
//! `p`-index of a mixed second derivative with `∇_qF` and its `q`-index with
//! `∇_pF`:
//!
//! ```text
//! X = Σ_ij ∂²F/∂p_i∂q_j · ∂F/∂q_i · ∂F/∂p_j
//! ```
//!
//! This is what expanding `∂_t(tF) = H(p, q + t∇_pF)` produces; the two
//! pairings agree for `n = 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff_engine::{Dual, Jet, Real};
use crate::error::ShnnError;
use crate::field::{Derivs, ScalarField, SmoothField};
use crate::integrators::rk45_final;
use crate::systems::HamiltonianSystem;
use crate::training::Scheme;

/// Post-training correction applied to a learned Hamiltonian.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    #[default]
    None,
    SeOrder2,
    SeOrder3,
    MpOrder4,
}

impl Correction {
    pub fn id(self) -> &'static str {
        match self {
            Correction::None => "none",
            Correction::SeOrder2 => "se_order2",
            Correction::SeOrder3 => "se_order3",
            Correction::MpOrder4 => "mp_order4",
        }
    }

    /// The correction reaching accuracy `order` for the given training scheme.
    pub fn for_order(order: u32, scheme: Scheme) -> Result<Self, ShnnError> {
        let c = match order {
            2 => Correction::SeOrder2,
            3 => Correction::SeOrder3,
            4 => Correction::MpOrder4,
            other => {
                return Err(ShnnError::InvalidArgument(format!(
                    "no correction of order {other} (expected 2, 3 or 4)"
                )))
            }
        };
        c.check_scheme(scheme)?;
        Ok(c)
    }

    /// Accuracy order reached after correction: 2, 3 or 4.
    pub fn order(self) -> Option<u32> {
        match self {
            Correction::None => None,
            Correction::SeOrder2 => Some(2),
            Correction::SeOrder3 => Some(3),
            Correction::MpOrder4 => Some(4),
        }
    }

    pub fn check_scheme(self, scheme: Scheme) -> Result<(), ShnnError> {
        let ok = match self {
            Correction::None => true,
            Correction::SeOrder2 | Correction::SeOrder3 => scheme == Scheme::SymplecticEuler,
            Correction::MpOrder4 => scheme == Scheme::ImplicitMidpoint,
        };
        if ok {
            Ok(())
        } else {
            Err(ShnnError::Conflict(format!(
                "correction {} does not apply to a model trained with {scheme}",
                self.id()
            )))
        }
    }
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Correction {
    type Err = ShnnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Correction::None,
            Correction::SeOrder2,
            Correction::SeOrder3,
            Correction::MpOrder4,
        ]
        .into_iter()
        .find(|c| c.id() == s)
        .ok_or_else(|| ShnnError::InvalidArgument(format!("unknown correction `{s}`")))
    }
}

/// `∇_pF · ∇_qF`.
fn pq_product<T: Real>(d: &Derivs<T>) -> T {
    let n = d.n();
    (0..n).fold(d.value.constant_like(0.0), |acc, i| {
        acc + d.grad[i].clone() * d.grad[n + i].clone()
    })
}

/// `(∇_ppF(∇_qF, ∇_qF), ∇_qqF(∇_pF, ∇_pF), X)`.
fn second_order_terms<T: Real>(d: &Derivs<T>) -> (T, T, T) {
    let n = d.n();
    let zero = d.value.constant_like(0.0);
    let (mut a, mut b, mut x) = (zero.clone(), zero.clone(), zero);
    for i in 0..n {
        for j in 0..n {
            let (gpi, gpj) = (&d.grad[i], &d.grad[j]);
            let (gqi, gqj) = (&d.grad[n + i], &d.grad[n + j]);
            a = a + d.h(i, j).clone() * gqi.clone() * gqj.clone();
            b = b + d.h(n + i, n + j).clone() * gpi.clone() * gpj.clone();
            x = x + d.h(i, n + j).clone() * gqi.clone() * gpj.clone();
        }
    }
    (a, b, x)
}

/// `∇²F(J⁻¹∇F, J⁻¹∇F)`.
fn midpoint_quadratic<T: Real>(d: &Derivs<T>) -> T {
    let dim = d.dim();
    let n = d.n();
    let sg: Vec<T> = (0..dim)
        .map(|i| {
            if i < n {
                -d.grad[n + i].clone()
            } else {
                d.grad[i - n].clone()
            }
        })
        .collect();
    let mut acc = d.value.constant_like(0.0);
    for i in 0..dim {
        for j in 0..dim {
            acc = acc + d.h(i, j).clone() * sg[i].clone() * sg[j].clone();
        }
    }
    acc
}

/// `F − (h/2)∇_pF·∇_qF`.
pub fn se_order2<T: Real>(d: &Derivs<T>, h: f64) -> T {
    d.value.clone() - pq_product(d).scale(0.5 * h)
}

/// [`se_order2`] plus `(h²/12)(∇_ppF(∇_qF)² + 4X + ∇_qqF(∇_pF)²)`.
pub fn se_order3<T: Real>(d: &Derivs<T>, h: f64) -> T {
    let (a, b, x) = second_order_terms(d);
    se_order2(d, h) + (a + b + x.scale(4.0)).scale(h * h / 12.0)
}

/// `F − (h²/24)∇²F(J⁻¹∇F, J⁻¹∇F)`.
pub fn mp_order4<T: Real>(d: &Derivs<T>, h: f64) -> T {
    d.value.clone() - midpoint_quadratic(d).scale(h * h / 24.0)
}

/// Truncated series for `Ĥ` in terms of `H`.
///
/// Symplectic Euler: order 1 is `H + (h/2)∇_pH·∇_qH`, order 2 adds
/// `(h²/6)(∇_ppH(∇_qH)² + X + ∇_qqH(∇_pH)²)`. Implicit midpoint: order 2 is
/// `H + (h²/24)∇²H(J⁻¹∇H, J⁻¹∇H)`; the series is even in `h`, so this is
/// accurate through `h³`.
pub fn forward_series_terms<T: Real>(
    d: &Derivs<T>,
    scheme: Scheme,
    order: u32,
    h: f64,
) -> Result<T, ShnnError> {
    match (scheme, order) {
        (_, 0) => Ok(d.value.clone()),
        (Scheme::SymplecticEuler, 1) => Ok(d.value.clone() + pq_product(d).scale(0.5 * h)),
        (Scheme::SymplecticEuler, 2) => {
            let (a, b, x) = second_order_terms(d);
            Ok(d.value.clone() + pq_product(d).scale(0.5 * h) + (a + b + x).scale(h * h / 6.0))
        }
        (Scheme::ImplicitMidpoint, 1) => Ok(d.value.clone()),
        (Scheme::ImplicitMidpoint, 2) => {
            Ok(d.value.clone() + midpoint_quadratic(d).scale(h * h / 24.0))
        }
        (Scheme::ForwardEuler, _) => Err(ShnnError::Unsupported(
            "forward Euler has no modified Hamiltonian".into(),
        )),
        (_, o) => Err(ShnnError::Unsupported(format!(
            "forward series of order {o} (implemented: 0, 1, 2)"
        ))),
    }
}

/// Which series expression a [`SeriesField`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Series {
    Correct(Correction),
    Forward { scheme: Scheme, order: u32 },
}

impl Series {
    fn eval<T: Real>(&self, d: &Derivs<T>, h: f64) -> T {
        match *self {
            Series::Correct(Correction::None) => d.value.clone(),
            Series::Correct(Correction::SeOrder2) => se_order2(d, h),
            Series::Correct(Correction::SeOrder3) => se_order3(d, h),
            Series::Correct(Correction::MpOrder4) => mp_order4(d, h),
            Series::Forward { scheme, order } => {
                forward_series_terms(d, scheme, order, h).expect("validated at construction")
            }
        }
    }
}

/// A field transformed by a series in `h`, with exact value and gradient.
pub struct SeriesField<'a, F: ?Sized> {
    base: &'a F,
    series: Series,
    h: f64,
}

impl<'a, F: SmoothField + ?Sized> SeriesField<'a, F> {
    pub fn new(base: &'a F, series: Series, h: f64) -> Result<Self, ShnnError> {
        if let Series::Forward { scheme, order } = series {
            let probe = Derivs {
                value: 0.0,
                grad: vec![0.0; 2],
                hess: vec![0.0; 4],
            };
            forward_series_terms(&probe, scheme, order, h)?;
        }
        Ok(Self { base, series, h })
    }

    pub fn correction(base: &'a F, c: Correction, h: f64) -> Self {
        Self {
            base,
            series: Series::Correct(c),
            h,
        }
    }

    pub fn forward(base: &'a F, scheme: Scheme, order: u32, h: f64) -> Result<Self, ShnnError> {
        Self::new(base, Series::Forward { scheme, order }, h)
    }
}

impl<F: SmoothField + ?Sized> ScalarField for SeriesField<'_, F> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value(&self, y: &[f64]) -> f64 {
        if self.series == Series::Correct(Correction::None) {
            return self.base.value(y);
        }
        self.series.eval(&Derivs::from_jet(&self.base.jet(y)), self.h)
    }

    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        if self.series == Series::Correct(Correction::None) {
            return self.base.gradient(y);
        }
        let lifted: Derivs<Dual> = Derivs::lifted(&self.base.jet(y));
        self.series.eval(&lifted, self.h).g
    }
}

fn derivs(f: &(impl SmoothField + ?Sized), y: &[f64]) -> Derivs<f64> {
    Derivs::from_jet(&f.jet(y))
}

pub fn correct_se_order2(f: &(impl SmoothField + ?Sized), y: &[f64], h: f64) -> f64 {
    se_order2(&derivs(f, y), h)
}

pub fn correct_se_order3(f: &(impl SmoothField + ?Sized), y: &[f64], h: f64) -> f64 {
    se_order3(&derivs(f, y), h)
}

pub fn correct_mp_order4(f: &(impl SmoothField + ?Sized), y: &[f64], h: f64) -> f64 {
    mp_order4(&derivs(f, y), h)
}

pub fn forward_series(
    f: &(impl SmoothField + ?Sized),
    scheme: Scheme,
    order: u32,
    y: &[f64],
    h: f64,
) -> Result<f64, ShnnError> {
    forward_series_terms(&derivs(f, y), scheme, order, h)
}

/// `−∂²H/∂p² · ∂²H/∂q² + ∂²H/∂q∂p · ∂²H/∂p∂q` for one degree of freedom.
/// Times `h`, this is the leading divergence of the forward Euler target
/// field `(φ_h(y) − y)/h`, which no Hamiltonian field can match.
pub fn mixed_derivative_mismatch(f: &(impl SmoothField + ?Sized), y: &[f64]) -> Result<f64, ShnnError> {
    if y.len() != 2 || f.dim() != 2 {
        return Err(ShnnError::InvalidArgument(format!(
            "mixed-derivative mismatch is defined for one degree of freedom, got dimension {}",
            y.len()
        )));
    }
    let j: Jet = f.jet(y);
    Ok(-j.hess(0, 0) * j.hess(1, 1) + j.hess(1, 0) * j.hess(0, 1))
}

/// Root mean square over `starts` of `‖J⁻¹∇Ĥ(s(y₀, y₁)) − (y₁ − y₀)/h‖`,
/// where `Ĥ` is the forward series of `system` and `y₁` its exact flow.
pub fn series_residual(
    system: &HamiltonianSystem,
    scheme: Scheme,
    order: u32,
    starts: &[Vec<f64>],
    h: f64,
) -> Result<f64, ShnnError> {
    if starts.is_empty() {
        return Err(ShnnError::InvalidArgument("no start points".into()));
    }
    let series = SeriesField::forward(system, scheme, order, h)?;
    let flow = |y: &[f64]| system.vector_field(y);
    let mut sum = 0.0;
    for y0 in starts {
        let y1 = rk45_final(&flow, y0, h, 1e-12, 1e-12)?;
        let g = series.symplectic_gradient(&scheme.point(y0, &y1));
        sum += g
            .iter()
            .zip(y0.iter().zip(&y1))
            .map(|(gi, (a, b))| (gi - (b - a) / h).powi(2))
            .sum::<f64>();
    }
    Ok((sum / starts.len() as f64).sqrt())
}
