//! Ground-truth Hamiltonians and their data regions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff_engine::{Jet, Real};
use crate::error::ShnnError;
use crate::field::{ScalarField, SmoothField};
use crate::mlp::PhaseState;

/// Axis-aligned box in phase space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self { lower, upper }
    }

    pub fn cube(dim: usize, half_width: f64) -> Self {
        Self::new(vec![-half_width; dim], vec![half_width; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn sides(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| b - a).collect()
    }

    pub fn volume(&self) -> f64 {
        self.sides().iter().product()
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Same center, every side scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.center();
        let half: Vec<f64> = self.sides().iter().map(|s| 0.5 * s * factor).collect();
        Self::new(
            c.iter().zip(&half).map(|(c, h)| c - h).collect(),
            c.iter().zip(&half).map(|(c, h)| c + h).collect(),
        )
    }

    /// Per-coordinate uniform sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| a + (b - a) * rng.random::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Spring,
    Pendulum,
    DoublePendulum,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [
        SystemKind::Spring,
        SystemKind::Pendulum,
        SystemKind::DoublePendulum,
    ];

    pub fn id(self) -> &'static str {
        match self {
            SystemKind::Spring => "spring",
            SystemKind::Pendulum => "pendulum",
            SystemKind::DoublePendulum => "double_pendulum",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for SystemKind {
    type Err = ShnnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spring" => Ok(SystemKind::Spring),
            "pendulum" => Ok(SystemKind::Pendulum),
            "double_pendulum" | "double-pendulum" => Ok(SystemKind::DoublePendulum),
            other => Err(ShnnError::InvalidArgument(format!(
                "unknown system `{other}` (expected spring | pendulum | double_pendulum)"
            ))),
        }
    }
}

/// A Hamiltonian, its gradient and its data region `Ω_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianSystem {
    pub kind: SystemKind,
    pub domain: BoxRegion,
}

impl HamiltonianSystem {
    /// `H = ½p² + ½q²` on `[−1, 1]²`.
    pub fn spring() -> Self {
        Self {
            kind: SystemKind::Spring,
            domain: BoxRegion::cube(2, 1.0),
        }
    }

    /// `H = ½p² + (1 − cos q)` on `[−π, π]²`.
    pub fn pendulum() -> Self {
        Self {
            kind: SystemKind::Pendulum,
            domain: BoxRegion::cube(2, PI),
        }
    }

    /// Two equal masses on rods of equal length, on `[−π, π]⁴`
    /// (coordinates ordered `p₁, p₂, q₁, q₂`).
    pub fn double_pendulum() -> Self {
        Self {
            kind: SystemKind::DoublePendulum,
            domain: BoxRegion::cube(4, PI),
        }
    }

    pub fn from_kind(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Spring => Self::spring(),
            SystemKind::Pendulum => Self::pendulum(),
            SystemKind::DoublePendulum => Self::double_pendulum(),
        }
    }

    pub fn by_id(id: &str) -> Result<Self, ShnnError> {
        Ok(Self::from_kind(id.parse()?))
    }

    pub fn name(&self) -> &'static str {
        self.kind.id()
    }

    /// Degrees of freedom.
    pub fn n(&self) -> usize {
        self.domain.dim() / 2
    }

    /// `H(y)` on any scalar type.
    pub fn energy<T: Real>(&self, y: &[T]) -> T {
        match self.kind {
            SystemKind::Spring => {
                let (p, q) = (&y[0], &y[1]);
                (p.clone() * p.clone() + q.clone() * q.clone()).scale(0.5)
            }
            SystemKind::Pendulum => {
                let (p, q) = (&y[0], &y[1]);
                (p.clone() * p.clone()).scale(0.5) - q.cos().offset(-1.0)
            }
            SystemKind::DoublePendulum => {
                let (p1, p2, q1, q2) = (&y[0], &y[1], &y[2], &y[3]);
                let delta = q1.clone() - q2.clone();
                let s = delta.sin();
                let num = (p1.clone() * p1.clone()).scale(0.5) + p2.clone() * p2.clone()
                    - p1.clone() * p2.clone() * delta.cos();
                let den = (s.clone() * s).offset(1.0);
                num / den - q1.cos().scale(2.0) - q2.cos()
            }
        }
    }

    /// `∇H(y)` in closed form.
    pub fn grad(&self, y: &[f64]) -> Vec<f64> {
        match self.kind {
            SystemKind::Spring => vec![y[0], y[1]],
            SystemKind::Pendulum => vec![y[0], y[1].sin()],
            SystemKind::DoublePendulum => {
                let (p1, p2, q1, q2) = (y[0], y[1], y[2], y[3]);
                let (s, c) = (q1 - q2).sin_cos();
                let den = 1.0 + s * s;
                let num = 0.5 * p1 * p1 + p2 * p2 - p1 * p2 * c;
                let d_delta = (p1 * p2 * s * den - num * 2.0 * s * c) / (den * den);
                vec![
                    (p1 - p2 * c) / den,
                    (2.0 * p2 - p1 * c) / den,
                    d_delta + 2.0 * q1.sin(),
                    -d_delta + q2.sin(),
                ]
            }
        }
    }

    /// `J⁻¹∇H(y)`.
    pub fn vector_field(&self, y: &[f64]) -> Vec<f64> {
        crate::mlp::symplectic_from_gradient(&self.grad(y))
    }
}

impl ScalarField for HamiltonianSystem {
    fn dim(&self) -> usize {
        self.domain.dim()
    }
    fn value(&self, y: &[f64]) -> f64 {
        self.energy(y)
    }
    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        self.grad(y)
    }
}

impl SmoothField for HamiltonianSystem {
    fn jet(&self, y: &[f64]) -> Jet {
        self.energy(&Jet::seed_point(y))
    }
}

/// Exact harmonic-oscillator flow: rotation of `(p, q)` by angle `t`.
pub fn exact_flow_spring(y0: &PhaseState, t: f64) -> PhaseState {
    let (s, c) = t.sin_cos();
    let p: Vec<f64> = y0
        .p
        .iter()
        .zip(&y0.q)
        .map(|(p, q)| p * c - q * s)
        .collect();
    let q: Vec<f64> = y0
        .p
        .iter()
        .zip(&y0.q)
        .map(|(p, q)| q * c + p * s)
        .collect();
    PhaseState { p, q }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(sys: &HamiltonianSystem, y: &[f64]) -> Vec<f64> {
        let e = 1e-6;
        (0..y.len())
            .map(|i| {
                let mut a = y.to_vec();
                let mut b = y.to_vec();
                a[i] += e;
                b[i] -= e;
                (sys.energy(&a) - sys.energy(&b)) / (2.0 * e)
            })
            .collect()
    }

    #[test]
    fn spring_values() {
        let s = HamiltonianSystem::spring();
        assert_eq!(s.energy(&[0.0, 0.0]), 0.0);
        assert_eq!(s.energy(&[1.0, 0.0]), 0.5);
        assert_eq!(s.grad(&[1.0, 2.0]), vec![1.0, 2.0]);
        assert_eq!(s.n(), 1);
        assert_eq!(s.domain, BoxRegion::cube(2, 1.0));
    }

    #[test]
    fn pendulum_values() {
        let s = HamiltonianSystem::pendulum();
        assert_eq!(s.energy(&[0.0, 0.0]), 0.0);
        assert!((s.energy(&[0.0, PI]) - 2.0).abs() < 1e-15);
        let g = s.grad(&[1.0, PI / 2.0]);
        assert_eq!(g[0], 1.0);
        assert!((g[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn double_pendulum_values() {
        let s = HamiltonianSystem::double_pendulum();
        assert_eq!(s.energy(&[0.0, 0.0, 0.0, 0.0]), -3.0);
        assert!((s.energy(&[0.0, 0.0, PI, PI]) - 3.0).abs() < 1e-14);
        assert_eq!(s.n(), 2);
        let y = [0.3, -0.2, 0.5, 0.1];
        let fd = fd_grad(&s, &y);
        for (a, b) in s.grad(&y).iter().zip(&fd) {
            assert!((a - b).abs() / b.abs().max(1e-3) <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences_on_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in SystemKind::ALL {
            let s = HamiltonianSystem::from_kind(kind);
            for _ in 0..100 {
                let y = s.domain.sample(&mut rng);
                let fd = fd_grad(&s, &y);
                let g = s.grad(&y);
                let scale = g.iter().fold(1e-2f64, |m, v| m.max(v.abs()));
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() / scale <= 1e-6, "{kind}: {a} vs {b}");
                }
                let jet = s.jet(&y);
                for (a, b) in g.iter().zip(&jet.g) {
                    assert!((a - b).abs() <= 1e-12 * scale.max(1.0));
                }
            }
        }
    }

    #[test]
    fn symmetries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pend = HamiltonianSystem::pendulum();
        let dp = HamiltonianSystem::double_pendulum();
        for _ in 0..50 {
            let y = pend.domain.sample(&mut rng);
            let h = pend.energy(&y);
            assert_eq!(h, pend.energy(&[-y[0], y[1]]));
            assert_eq!(h, pend.energy(&[y[0], -y[1]]));
            let z = dp.domain.sample(&mut rng);
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            assert!((dp.energy(&z) - dp.energy(&neg)).abs() <= 1e-14);
        }
    }

    #[test]
    fn ids_round_trip() {
        for kind in SystemKind::ALL {
            assert_eq!(kind.id().parse::<SystemKind>().unwrap(), kind);
        }
        assert!("two_body".parse::<SystemKind>().is_err());
    }

    #[test]
    fn spring_flow() {
        let y0 = PhaseState::new(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(exact_flow_spring(&y0, 0.0), y0);
        let y = exact_flow_spring(&y0, PI / 2.0);
        assert!((y.p[0] + 1.0).abs() < 1e-15 && y.q[0].abs() < 1e-15);

        let s = HamiltonianSystem::spring();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let y0 = PhaseState::from_flat(&s.domain.sample(&mut rng)).unwrap();
            let t = rng.random_range(-20.0..20.0);
            let y = exact_flow_spring(&y0, t);
            let (h0, h1) = (s.energy(&y0.to_flat()), s.energy(&y.to_flat()));
            assert!((h0 - h1).abs() <= 1e-14);
        }
    }
}
