//! Metrics: Hamiltonian error on the measuring region, rollout MSE, and
//! log-log order fits.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ShnnError;
use crate::field::ScalarField;
use crate::integrators::{rk45_integrate, ROLLOUT_TOL};
use crate::systems::{BoxRegion, HamiltonianSystem};
use crate::training::TrainReport;

/// `Ω_m`: the box with the same center as `Ω_d` and sides divided by `√2`.
pub fn measure_region(system: &HamiltonianSystem) -> BoxRegion {
    system.domain.scaled(std::f64::consts::FRAC_1_SQRT_2)
}

/// Summary statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    /// Standard error of the mean.
    pub sem: f64,
    pub n: usize,
}

/// Quantile by linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    assert!(n > 0, "summary of an empty sample");
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Summary {
        mean,
        q25: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q75: quantile(&sorted, 0.75),
        sem,
        n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `ε_H` and the distribution of `|d_i − mean(d)|`.
    pub epsilon_h: Summary,
    /// `mean(d)`: the constant offset removed.
    pub offset: f64,
    pub seed: u64,
    pub system: String,
    pub model: String,
}

/// `ε_H = mean |d_i − mean(d)|` with `d_i = F(y_i) − H(y_i)` over `n` uniform
/// samples from `Ω_m`.
pub fn epsilon_h(
    f: &(impl ScalarField + ?Sized),
    system: &HamiltonianSystem,
    n: usize,
    seed: u64,
) -> Result<EvalReport, ShnnError> {
    if n < 10 {
        return Err(ShnnError::InvalidArgument(format!(
            "ε_H needs at least 10 samples, got {n}"
        )));
    }
    if f.dim() != system.domain.dim() {
        return Err(ShnnError::InvalidArgument(format!(
            "field dimension {} does not match system dimension {}",
            f.dim(),
            system.domain.dim()
        )));
    }
    let region = measure_region(system);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..n).map(|_| region.sample(&mut rng)).collect();
    let diffs: Vec<f64> = points
        .iter()
        .map(|y| f.value(y) - system.energy(y))
        .collect();
    let offset = diffs.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = diffs.iter().map(|d| (d - offset).abs()).collect();
    Ok(EvalReport {
        epsilon_h: summarize(&dev),
        offset,
        seed,
        system: system.name().to_string(),
        model: String::new(),
    })
}

/// Lowest energy on the boundary of `Ω_d`, by grid search over its faces.
///
/// With one degree of freedom every edge gets 5001 points (about 10⁴ per
/// pair of opposite edges, including the edge midpoints); otherwise each face is covered by a grid of 32 points
/// per axis.
pub fn energy_threshold(system: &HamiltonianSystem) -> f64 {
    let dom = &system.domain;
    let d = dom.dim();
    let per_axis: usize = if d == 2 { 5001 } else { 32 };
    let grid = |k: usize, i: usize| {
        let t = i as f64 / (per_axis - 1) as f64;
        dom.lower[k] + t * (dom.upper[k] - dom.lower[k])
    };
    let free = d - 1;
    let total = per_axis.pow(free as u32);
    let mut best = f64::INFINITY;
    let mut y = vec![0.0; d];
    for fixed in 0..d {
        for side in [dom.lower[fixed], dom.upper[fixed]] {
            for idx in 0..total {
                let mut rest = idx;
                for k in (0..d).filter(|&k| k != fixed) {
                    y[k] = grid(k, rest % per_axis);
                    rest /= per_axis;
                }
                y[fixed] = side;
                best = best.min(system.energy(&y));
            }
        }
    }
    best
}

/// Mean squared state error against the true flow, sampled at `times`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub times: Vec<f64>,
    pub mse: Vec<f64>,
    pub sem: Vec<f64>,
    pub initial_states: Vec<Vec<f64>>,
    pub threshold: f64,
    pub rejected: usize,
    /// Model trajectories, one per initial state, aligned with `times`.
    #[serde(skip)]
    pub model_states: Vec<Vec<Vec<f64>>>,
    #[serde(skip)]
    pub true_states: Vec<Vec<Vec<f64>>>,
}

impl RolloutReport {
    /// CSV with columns `t, mse, sem`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ShnnError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mse", "sem"])?;
        for i in 0..self.times.len() {
            w.write_record([
                format!("{:?}", self.times[i]),
                format!("{:?}", self.mse[i]),
                format!("{:?}", self.sem[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-coordinate trajectories as CSV: `trajectory, t, p_*, q_*` for the
    /// model, then `p_*_true, q_*_true`.
    pub fn write_trajectories_csv<W: Write>(&self, out: W) -> Result<(), ShnnError> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.initial_states.first().map_or(0, Vec::len);
        let n = d / 2;
        let mut head = vec!["trajectory".to_string(), "t".to_string()];
        for suffix in ["", "_true"] {
            head.extend((1..=n).map(|i| format!("p_{i}{suffix}")));
            head.extend((1..=n).map(|i| format!("q_{i}{suffix}")));
        }
        w.write_record(&head)?;
        for (k, (model, truth)) in self.model_states.iter().zip(&self.true_states).enumerate() {
            for (i, t) in self.times.iter().enumerate() {
                let mut row = vec![k.to_string(), format!("{t:?}")];
                row.extend(model[i].iter().chain(&truth[i]).map(|v| format!("{v:?}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Uniform sample times `0, Δt, …` up to and including `t_final`.
pub fn sample_times(t_final: f64, dt: f64) -> Vec<f64> {
    if t_final <= 0.0 {
        return vec![0.0];
    }
    let steps = (t_final / dt).round() as usize;
    (0..=steps).map(|i| (i as f64 * dt).min(t_final)).collect()
}

/// Rolls out `J⁻¹∇F` and the true field from `n_traj` initial states drawn
/// from `Ω_m` with energy below [`energy_threshold`].
pub fn rollout_mse(
    model: &(impl ScalarField + ?Sized),
    system: &HamiltonianSystem,
    times: &[f64],
    n_traj: usize,
    seed: u64,
) -> Result<RolloutReport, ShnnError> {
    if model.dim() != system.domain.dim() {
        return Err(ShnnError::InvalidArgument(format!(
            "model dimension {} does not match system dimension {}",
            model.dim(),
            system.domain.dim()
        )));
    }
    if n_traj == 0 || times.is_empty() {
        return Err(ShnnError::InvalidArgument(
            "rollouts need at least one trajectory and one sample time".into(),
        ));
    }
    let threshold = energy_threshold(system);
    let region = measure_region(system);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut initial = Vec::with_capacity(n_traj);
    let mut rejected = 0usize;
    while initial.len() < n_traj {
        let y = region.sample(&mut rng);
        if system.energy(&y) < threshold {
            initial.push(y);
        } else {
            rejected += 1;
            let drawn = initial.len() + rejected;
            if drawn >= 100 && rejected * 10 > drawn * 9 {
                return Err(ShnnError::InvalidArgument(format!(
                    "{rejected} of {drawn} initial states exceed the boundary energy {threshold}"
                )));
            }
        }
    }

    let model_field = |y: &[f64]| model.symplectic_gradient(y);
    let true_field = |y: &[f64]| system.vector_field(y);
    let run = |y0: &Vec<f64>| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ShnnError> {
        let a = rk45_integrate(&model_field, y0, times, ROLLOUT_TOL, ROLLOUT_TOL)?;
        let b = rk45_integrate(&true_field, y0, times, ROLLOUT_TOL, ROLLOUT_TOL)?;
        Ok((a.states, b.states))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        initial.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = initial.iter().map(run).collect();

    let mut model_states = Vec::with_capacity(n_traj);
    let mut true_states = Vec::with_capacity(n_traj);
    for r in results {
        let (a, b) = r?;
        model_states.push(a);
        true_states.push(b);
    }
    let mut mse = Vec::with_capacity(times.len());
    let mut sem = Vec::with_capacity(times.len());
    for i in 0..times.len() {
        let errs: Vec<f64> = model_states
            .iter()
            .zip(&true_states)
            .map(|(a, b)| a[i].iter().zip(&b[i]).map(|(x, y)| (x - y).powi(2)).sum())
            .collect();
        let s = summarize(&errs);
        mse.push(s.mean);
        sem.push(s.sem);
    }
    Ok(RolloutReport {
        times: times.to_vec(),
        mse,
        sem,
        initial_states: initial,
        threshold,
        rejected,
        model_states,
        true_states,
    })
}

/// Least-squares line through `(log h, log ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn order_fit(h: &[f64], eps: &[f64]) -> Result<OrderFit, ShnnError> {
    if h.len() != eps.len() || h.len() < 3 {
        return Err(ShnnError::InvalidArgument(format!(
            "order fit needs at least 3 matching points, got {} and {}",
            h.len(),
            eps.len()
        )));
    }
    if h.iter().chain(eps).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(ShnnError::InvalidArgument(
            "order fit needs strictly positive, finite values".into(),
        ));
    }
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = eps.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(ShnnError::InvalidArgument("order fit needs distinct h values".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(OrderFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Log-log slope of the best test loss against `h`.
pub fn plateau_check(h: &[f64], reports: &[TrainReport]) -> Result<OrderFit, ShnnError> {
    let losses: Vec<f64> = reports.iter().map(TrainReport::best_test_loss).collect();
    if losses.iter().any(|l| *l <= 0.0) {
        return Err(ShnnError::InvalidArgument(
            "plateau check needs non-zero losses".into(),
        ));
    }
    order_fit(h, &losses)
}

/// `(p, q, F − H − offset)` on a `resolution × resolution` grid over `Ω_d`
/// for one degree of freedom, with the offset taken as the grid mean.
pub fn error_grid(
    f: &(impl ScalarField + ?Sized),
    system: &HamiltonianSystem,
    resolution: usize,
) -> Result<Vec<[f64; 3]>, ShnnError> {
    if system.n() != 1 || resolution < 2 {
        return Err(ShnnError::InvalidArgument(
            "error grids need one degree of freedom and resolution ≥ 2".into(),
        ));
    }
    let dom = &system.domain;
    let at = |k: usize, i: usize| {
        dom.lower[k] + (dom.upper[k] - dom.lower[k]) * i as f64 / (resolution - 1) as f64
    };
    let mut cells = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let y = [at(0, i), at(1, j)];
            cells.push([y[0], y[1], f.value(&y) - system.energy(&y)]);
        }
    }
    let offset = cells.iter().map(|c| c[2]).sum::<f64>() / cells.len() as f64;
    cells.iter_mut().for_each(|c| c[2] -= offset);
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;
    use crate::systems::SystemKind;

    #[test]
    fn summary_quantiles() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((s.q25, s.median, s.q75, s.mean), (2.0, 3.0, 4.0, 3.0));
        assert!((s.sem - (2.5f64 / 5.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn epsilon_of_exact_and_shifted_fields_is_zero() {
        for kind in SystemKind::ALL {
            let sys = HamiltonianSystem::from_kind(kind);
            let r = epsilon_h(&sys, &sys, 200, 1).unwrap();
            assert_eq!(r.epsilon_h.mean, 0.0);
            let shifted = FnField {
                dim: sys.domain.dim(),
                value: |y: &[f64]| sys.energy(y) + 7.5,
                gradient: |y: &[f64]| sys.grad(y),
            };
            let r = epsilon_h(&shifted, &sys, 200, 1).unwrap();
            assert!(r.epsilon_h.mean < 1e-13);
            assert!((r.offset - 7.5).abs() < 1e-13);
        }
    }

    #[test]
    fn epsilon_rejects_small_samples() {
        let sys = HamiltonianSystem::spring();
        assert!(epsilon_h(&sys, &sys, 9, 0).is_err());
    }

    #[test]
    fn measure_region_volume() {
        for kind in SystemKind::ALL {
            let sys = HamiltonianSystem::from_kind(kind);
            let m = measure_region(&sys);
            let ratio = sys.domain.volume() / m.volume();
            assert!((ratio - 2f64.powi(sys.n() as i32)).abs() < 1e-12);
            assert_eq!(m.center(), sys.domain.center());
        }
    }

    #[test]
    fn thresholds() {
        assert!((energy_threshold(&HamiltonianSystem::spring()) - 0.5).abs() < 1e-12);
        assert!((energy_threshold(&HamiltonianSystem::pendulum()) - 2.0).abs() < 1e-12);
        let p = HamiltonianSystem::pendulum();
        assert!(p.energy(&[0.0, 2.5]) < energy_threshold(&p));
    }

    #[test]
    fn order_fits() {
        let h = [0.1, 0.2, 0.4];
        let lin: Vec<f64> = h.to_vec();
        let quad: Vec<f64> = h.iter().map(|v| v * v).collect();
        assert!((order_fit(&h, &lin).unwrap().slope - 1.0).abs() < 1e-12);
        assert!((order_fit(&h, &quad).unwrap().slope - 2.0).abs() < 1e-12);
        assert!(order_fit(&h, &[1.0, 0.0, 2.0]).is_err());
        assert!(order_fit(&h[..2], &lin[..2]).is_err());
    }

    #[test]
    fn sample_time_grid() {
        assert_eq!(sample_times(0.0, 0.1), vec![0.0]);
        let t = sample_times(1.0, 0.25);
        assert_eq!(t, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn true_field_rollout_has_no_error() {
        let sys = HamiltonianSystem::pendulum();
        let r = rollout_mse(&sys, &sys, &sample_times(5.0, 0.5), 3, 2).unwrap();
        assert!(r.mse.iter().all(|m| *m <= 1e-24));
        let r0 = rollout_mse(&sys, &sys, &[0.0], 1, 0).unwrap();
        assert_eq!(r0.mse, vec![0.0]);
    }

    #[test]
    fn error_grid_is_centered() {
        let sys = HamiltonianSystem::spring();
        let g = error_grid(&sys, &sys, 5).unwrap();
        assert_eq!(g.len(), 25);
        assert!(g.iter().all(|c| c[2] == 0.0));
        assert!(error_grid(&sys, &HamiltonianSystem::double_pendulum(), 5).is_err());
    }
}
