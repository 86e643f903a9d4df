//! One-step maps and adaptive integration.
//!
//! All states are flat `(p, q)` slices. Vector fields return `ẏ`; the
//! symplectic Euler step instead takes the gradient `∇H` because it needs
//! the `p` and `q` blocks separately.

use std::io::Write;

use crate::error::ShnnError;
use crate::mlp::PhaseState;

/// `y ↦ ẏ`.
pub trait VectorField {
    fn eval(&self, y: &[f64]) -> Vec<f64>;
}

impl<F> VectorField for F
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    fn eval(&self, y: &[f64]) -> Vec<f64> {
        self(y)
    }
}

/// Default fixed-point tolerance for implicit steps.
pub const IMPLICIT_TOL: f64 = 1e-12;
/// Default iteration cap for implicit steps.
pub const IMPLICIT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub y_next: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Last fixed-point increment (max norm); zero for explicit steps.
    pub residual: f64,
}

impl StepResult {
    pub fn state(&self) -> PhaseState {
        PhaseState::from_flat(&self.y_next).expect("step keeps the phase-space layout")
    }
}

fn check_step(h: f64) -> Result<(), ShnnError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(ShnnError::InvalidArgument(format!(
            "time step must be positive, got {h}"
        )));
    }
    Ok(())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// `y + h f(y)`.
pub fn forward_euler_step<F: VectorField + ?Sized>(
    f: &F,
    y: &[f64],
    h: f64,
) -> Result<StepResult, ShnnError> {
    check_step(h)?;
    let k = f.eval(y);
    Ok(StepResult {
        y_next: y.iter().zip(&k).map(|(y, k)| y + h * k).collect(),
        iterations: 0,
        converged: true,
        residual: 0.0,
    })
}

/// Solves `x = Φ(x)` by fixed-point iteration from `x0`, switching to a
/// damped update `x ← x + ½(Φ(x) − x)` if the increments stop shrinking.
fn fixed_point(
    phi: impl Fn(&[f64]) -> Vec<f64>,
    x0: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, usize, bool, f64) {
    let mut x = phi(&x0);
    let mut iterations = 1;
    let mut damping = 1.0;
    let mut last = f64::INFINITY;
    let mut growth = 0;
    let mut best = (x.clone(), f64::INFINITY);
    loop {
        let next = phi(&x);
        let r = max_abs_diff(&next, &x);
        if r < best.1 {
            best = (x.clone(), r);
        }
        if r <= tol {
            return (x, iterations, true, r);
        }
        if iterations >= max_iter || !r.is_finite() {
            return (best.0, iterations, false, best.1);
        }
        if r >= last {
            growth += 1;
            if growth >= 3 && damping == 1.0 {
                damping = 0.5;
            }
        } else {
            growth = 0;
        }
        last = r;
        x = x
            .iter()
            .zip(&next)
            .map(|(x, n)| x + damping * (n - x))
            .collect();
        iterations += 1;
    }
}

/// `p₁ = p₀ − h∇_qH(p₁, q₀)`, then `q₁ = q₀ + h∇_pH(p₁, q₀)`.
pub fn symplectic_euler_step<G>(
    grad_h: &G,
    y: &[f64],
    h: f64,
    tol: f64,
    max_iter: usize,
) -> Result<StepResult, ShnnError>
where
    G: Fn(&[f64]) -> Vec<f64> + ?Sized,
{
    check_step(h)?;
    if !(tol > 0.0) {
        return Err(ShnnError::InvalidArgument("tolerance must be positive".into()));
    }
    let n = y.len() / 2;
    let (p0, q0) = y.split_at(n);
    let eval_at = |p: &[f64]| {
        let mut z = p.to_vec();
        z.extend_from_slice(q0);
        grad_h(&z)
    };
    let phi = |p: &[f64]| -> Vec<f64> {
        let g = eval_at(p);
        p0.iter().zip(&g[n..]).map(|(p0, gq)| p0 - h * gq).collect()
    };
    let (p1, iterations, converged, residual) = fixed_point(phi, p0.to_vec(), tol, max_iter);
    let g = eval_at(&p1);
    let mut y_next = p1;
    y_next.extend(q0.iter().zip(&g[..n]).map(|(q0, gp)| q0 + h * gp));
    Ok(StepResult {
        y_next,
        iterations,
        converged,
        residual,
    })
}

/// `y₁ = y₀ + h f((y₀ + y₁)/2)`.
pub fn implicit_midpoint_step<F: VectorField + ?Sized>(
    f: &F,
    y: &[f64],
    h: f64,
    tol: f64,
    max_iter: usize,
) -> Result<StepResult, ShnnError> {
    check_step(h)?;
    if !(tol > 0.0) {
        return Err(ShnnError::InvalidArgument("tolerance must be positive".into()));
    }
    let phi = |y1: &[f64]| -> Vec<f64> {
        let mid: Vec<f64> = y.iter().zip(y1).map(|(a, b)| 0.5 * (a + b)).collect();
        let k = f.eval(&mid);
        y.iter().zip(&k).map(|(y, k)| y + h * k).collect()
    };
    let (y_next, iterations, converged, residual) = fixed_point(phi, y.to_vec(), tol, max_iter);
    Ok(StepResult {
        y_next,
        iterations,
        converged,
        residual,
    })
}

// Dormand–Prince 5(4) tableau. Fields are autonomous, so the nodes are unused.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const MIN_STEP: f64 = 1e-14;
const MAX_STEPS: usize = 50_000_000;

/// Ground-truth data tolerance.
pub const DATA_TOL: f64 = 1e-10;
/// Rollout tolerance for learned models.
pub const ROLLOUT_TOL: f64 = 1e-9;

/// States sampled at requested times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// CSV with columns `t, p_1..p_n, q_1..q_n`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ShnnError> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.states.first().map_or(0, |s| s.len());
        let n = d / 2;
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("p_{i}")));
        header.extend((1..=n).map(|i| format!("q_{i}")));
        w.write_record(&header)?;
        for (t, y) in self.times.iter().zip(&self.states) {
            let mut row = vec![t.to_string()];
            row.extend(y.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn error_norm(err: &[f64], y: &[f64], y_new: &[f64], rtol: f64, atol: f64) -> f64 {
    let sum: f64 = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(e, (a, b))| {
            let scale = atol + rtol * a.abs().max(b.abs());
            (e / scale).powi(2)
        })
        .sum();
    (sum / err.len() as f64).sqrt()
}

fn rms(v: &[f64], scale: &[f64]) -> f64 {
    (v.iter()
        .zip(scale)
        .map(|(a, s)| (a / s).powi(2))
        .sum::<f64>()
        / v.len() as f64)
        .sqrt()
}

/// Starting step from the usual two-evaluation estimate.
fn initial_step<F: VectorField + ?Sized>(
    f: &F,
    y0: &[f64],
    f0: &[f64],
    rtol: f64,
    atol: f64,
    span: f64,
) -> f64 {
    let scale: Vec<f64> = y0.iter().map(|y| atol + y.abs() * rtol).collect();
    let d0 = rms(y0, &scale);
    let d1 = rms(f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(span);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, k)| y + h0 * k).collect();
    let f1 = f.eval(&y1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff, &scale) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Adaptive Dormand–Prince 5(4) integration from `t = 0`, sampled at `times`
/// (non-decreasing, non-negative). Steps are shortened to land exactly on
/// each sample time.
pub fn rk45_integrate<F: VectorField + ?Sized>(
    f: &F,
    y0: &[f64],
    times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Trajectory, ShnnError> {
    if times.is_empty() {
        return Err(ShnnError::InvalidArgument("no sample times requested".into()));
    }
    if times[0] < 0.0 || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(ShnnError::InvalidArgument(
            "sample times must be non-negative and non-decreasing".into(),
        ));
    }
    if !(rtol > 0.0) || !(atol > 0.0) {
        return Err(ShnnError::InvalidArgument("tolerances must be positive".into()));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(ShnnError::Integration("non-finite initial state".into()));
    }

    let dim = y0.len();
    let mut t = 0.0f64;
    let mut y = y0.to_vec();
    let mut k: [Vec<f64>; 7] = Default::default();
    k[0] = f.eval(&y);
    let t_end = *times.last().expect("non-empty");
    let mut h = if t_end > 0.0 {
        initial_step(f, &y, &k[0], rtol, atol, t_end)
    } else {
        0.0
    };

    let mut out = Trajectory {
        times: Vec::with_capacity(times.len()),
        states: Vec::with_capacity(times.len()),
    };
    let mut stage = vec![0.0; dim];
    let mut steps = 0usize;

    for &target in times {
        while t < target {
            let remaining = target - t;
            let truncated = h >= remaining;
            let h_try = if truncated { remaining } else { h };
            if h_try < MIN_STEP && !truncated {
                return Err(ShnnError::Integration(format!(
                    "step size underflow ({h_try:e}) at t = {t}"
                )));
            }
            steps += 1;
            if steps > MAX_STEPS {
                return Err(ShnnError::Integration(format!("too many steps at t = {t}")));
            }

            for s in 1..7 {
                for i in 0..dim {
                    let mut acc = y[i];
                    for (j, a) in A[s].iter().enumerate().take(s) {
                        acc += h_try * a * k[j][i];
                    }
                    stage[i] = acc;
                }
                k[s] = f.eval(&stage);
            }
            // Stage 7 is evaluated at the fifth-order solution.
            let y_new = stage.clone();
            let err: Vec<f64> = (0..dim)
                .map(|i| h_try * (0..7).map(|s| E[s] * k[s][i]).sum::<f64>())
                .collect();
            let en = error_norm(&err, &y, &y_new, rtol, atol);
            if !en.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                h = 0.25 * h_try;
                if h < MIN_STEP {
                    return Err(ShnnError::Integration(format!(
                        "non-finite state near t = {t}"
                    )));
                }
                continue;
            }
            if en <= 1.0 {
                t = if truncated { target } else { t + h_try };
                y = y_new;
                k[0] = std::mem::take(&mut k[6]);
                let factor = if en == 0.0 {
                    MAX_FACTOR
                } else {
                    (SAFETY * en.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
                };
                let proposed = h_try * factor;
                h = if truncated { proposed.max(h) } else { proposed };
            } else {
                let factor = (SAFETY * en.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
                h = h_try * factor;
                if h < MIN_STEP {
                    return Err(ShnnError::Integration(format!(
                        "step size underflow ({h:e}) at t = {t}"
                    )));
                }
            }
        }
        out.times.push(target);
        out.states.push(y.clone());
    }
    Ok(out)
}

/// State at `t_final > 0`.
pub fn rk45_final<F: VectorField + ?Sized>(
    f: &F,
    y0: &[f64],
    t_final: f64,
    rtol: f64,
    atol: f64,
) -> Result<Vec<f64>, ShnnError> {
    if !(t_final > 0.0) {
        return Err(ShnnError::InvalidArgument(format!(
            "final time must be positive, got {t_final}"
        )));
    }
    let mut traj = rk45_integrate(f, y0, &[t_final], rtol, atol)?;
    Ok(traj.states.pop().expect("one sample"))
}

/// Jacobian of a map `R^d → R^d` by central differences.
pub fn fd_jacobian(map: impl Fn(&[f64]) -> Vec<f64>, y: &[f64], step: f64) -> Vec<Vec<f64>> {
    let d = y.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut a = y.to_vec();
        let mut b = y.to_vec();
        a[j] += step;
        b[j] -= step;
        let (fa, fb) = (map(&a), map(&b));
        for i in 0..d {
            jac[i][j] = (fa[i] - fb[i]) / (2.0 * step);
        }
    }
    jac
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .expect("non-empty");
        if a[piv][c] == 0.0 {
            return 0.0;
        }
        if piv != c {
            a.swap(piv, c);
            det = -det;
        }
        det *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{exact_flow_spring, HamiltonianSystem};
    use std::f64::consts::PI;

    fn spring_field(y: &[f64]) -> Vec<f64> {
        vec![-y[1], y[0]]
    }

    fn zero_field(y: &[f64]) -> Vec<f64> {
        vec![0.0; y.len()]
    }

    fn exact(y: &[f64], t: f64) -> Vec<f64> {
        exact_flow_spring(&PhaseState::from_flat(y).unwrap(), t).to_flat()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn forward_euler_hand_values() {
        let r = forward_euler_step(&spring_field, &[0.0, 1.0], 0.1).unwrap();
        assert_eq!(r.y_next, vec![-0.1, 1.0]);
        assert_eq!(r.iterations, 0);
        let r = forward_euler_step(&zero_field, &[0.4, -0.3], 0.5).unwrap();
        assert_eq!(r.y_next, vec![0.4, -0.3]);
        assert!(forward_euler_step(&zero_field, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn forward_euler_local_error_is_second_order() {
        let y = [0.3, 0.8];
        let err = |h: f64| {
            dist(
                &forward_euler_step(&spring_field, &y, h).unwrap().y_next,
                &exact(&y, h),
            )
        };
        let ratio = err(0.1) / err(0.05);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn symplectic_euler_hand_values() {
        let sys = HamiltonianSystem::spring();
        let g = |y: &[f64]| sys.grad(y);
        let r = symplectic_euler_step(&g, &[0.0, 1.0], 0.1, 1e-12, 100).unwrap();
        assert!((r.y_next[0] + 0.1).abs() < 1e-15);
        assert!((r.y_next[1] - 0.99).abs() < 1e-15);
        // Separable: ∇_qH does not depend on p, so the first update is exact.
        assert_eq!(r.iterations, 1);
        assert_eq!(r.residual, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn symplectic_euler_step_map_preserves_area() {
        let sys = HamiltonianSystem::pendulum();
        let g = |y: &[f64]| sys.grad(y);
        let map = |y: &[f64]| symplectic_euler_step(&g, y, 0.2, 1e-14, 200).unwrap().y_next;
        let det = determinant(&fd_jacobian(map, &[0.5, 1.0], 1e-5));
        assert!((det - 1.0).abs() <= 1e-8, "det {det}");
    }

    #[test]
    fn non_separable_symplectic_euler_converges() {
        let sys = HamiltonianSystem::double_pendulum();
        let g = |y: &[f64]| sys.grad(y);
        let r = symplectic_euler_step(&g, &[0.5, -0.3, 1.0, 0.2], 0.1, 1e-12, 100).unwrap();
        assert!(r.converged);
        assert!(r.iterations > 1);
        let mut z = r.y_next[..2].to_vec();
        z.extend_from_slice(&[1.0, 0.2]);
        let gz = sys.grad(&z);
        assert!((r.y_next[0] - (0.5 - 0.1 * gz[2])).abs() < 1e-11);
    }

    #[test]
    fn non_convergence_is_flagged() {
        // p ↦ p₀ − 2.7p diverges without damping.
        let g = |y: &[f64]| vec![0.0, 3.0 * y[0]];
        let r = symplectic_euler_step(&g, &[3.0, 1.0], 0.9, 1e-12, 5).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 5);
    }

    #[test]
    fn midpoint_properties() {
        let r = implicit_midpoint_step(&zero_field, &[0.2, 0.7], 0.3, 1e-12, 100).unwrap();
        assert_eq!(r.y_next, vec![0.2, 0.7]);
        let sys = HamiltonianSystem::spring();
        let y0 = [0.6, -0.45];
        for h in [0.05, 0.2, 0.8] {
            let r = implicit_midpoint_step(&spring_field, &y0, h, 1e-14, 200).unwrap();
            assert!(r.converged);
            assert!((sys.energy(&r.y_next) - sys.energy(&y0)).abs() <= 1e-10);
        }
    }

    #[test]
    fn midpoint_local_error_is_third_order_on_pendulum() {
        let sys = HamiltonianSystem::pendulum();
        let f = |y: &[f64]| sys.vector_field(y);
        let y0 = [0.5, 1.0];
        let err = |h: f64| {
            let r = implicit_midpoint_step(&f, &y0, h, 1e-14, 200).unwrap();
            let truth = rk45_final(&f, &y0, h, 1e-13, 1e-13).unwrap();
            dist(&r.y_next, &truth)
        };
        let ratio = err(0.2) / err(0.1);
        assert!((7.0..=9.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rk45_quarter_rotation() {
        let y = rk45_final(&spring_field, &[0.0, 1.0], PI / 2.0, 1e-10, 1e-10).unwrap();
        assert!(dist(&y, &[-1.0, 0.0]) <= 1e-8);
    }

    #[test]
    fn rk45_zero_field_and_sampling() {
        let traj = rk45_integrate(&zero_field, &[1.0, 2.0], &[0.0, 0.5, 3.0], 1e-9, 1e-9).unwrap();
        assert_eq!(traj.times, vec![0.0, 0.5, 3.0]);
        assert!(traj.states.iter().all(|s| s == &vec![1.0, 2.0]));
        assert!(rk45_integrate(&zero_field, &[1.0], &[1.0, 0.5], 1e-9, 1e-9).is_err());
        assert!(rk45_final(&zero_field, &[1.0, 2.0], 0.0, 1e-9, 1e-9).is_err());
    }

    #[test]
    fn rk45_pendulum_conserves_energy() {
        let sys = HamiltonianSystem::pendulum();
        let f = |y: &[f64]| sys.vector_field(y);
        let y0 = [0.3, 2.0];
        let y = rk45_final(&f, &y0, 10.0, 1e-10, 1e-10).unwrap();
        assert!((sys.energy(&y) - sys.energy(&y0)).abs() <= 1e-7);
    }

    #[test]
    fn rk45_reports_blow_up() {
        // ẏ = y² explodes at t = 1.
        let f = |y: &[f64]| vec![y[0] * y[0], 0.0];
        assert!(matches!(
            rk45_final(&f, &[1.0, 0.0], 2.0, 1e-8, 1e-8),
            Err(ShnnError::Integration(_))
        ));
    }

    #[test]
    fn determinant_small_cases() {
        assert_eq!(determinant(&[vec![2.0, 1.0], vec![1.0, 3.0]]), 5.0);
        let m = vec![
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 4.0],
        ];
        assert_eq!(determinant(&m), -4.0);
    }

    #[test]
    fn trajectory_csv_columns() {
        let traj = Trajectory {
            times: vec![0.0, 0.1],
            states: vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.25, 0.125, 1.0]],
        };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,p_1,p_2,q_1,q_2");
        assert_eq!(text.lines().nth(2).unwrap(), "0.1,0.5,0.25,0.125,1");
    }
}
