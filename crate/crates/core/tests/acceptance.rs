//! Acceptance suite at desk scale. Prints one PASS/FAIL line per criterion
//! and always exits successfully; the verdicts are the output.
//!
//! Desk scale: spring and pendulum with L=1, M=64, K=512, 2000 epochs.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shnn::correction::{mixed_derivative_mismatch, series_residual, Correction, SeriesField};
use shnn::dataset::Dataset;
use shnn::evaluation::{epsilon_h, measure_region, order_fit};
use shnn::field::{ScalarField, SmoothField};
use shnn::integrators::{
    determinant, fd_jacobian, forward_euler_step, implicit_midpoint_step, rk45_final,
    symplectic_euler_step, IMPLICIT_MAX_ITER, IMPLICIT_TOL,
};
use shnn::mlp::{Architecture, MlpParams};
use shnn::model::LearnedHamiltonian;
use shnn::systems::HamiltonianSystem;
use shnn::training::{batch_loss, loss_and_gradient, train, LossBatch, Scheme, TrainConfig};
use shnn::Result;

const SEED: u64 = 0;
const DESK_K: usize = 512;
const DESK_DEPTH: usize = 1;
const DESK_WIDTH: usize = 64;
const DESK_EPOCHS: usize = 2000;
const EVAL_SAMPLES: usize = 2000;

const C1_SLOPE: (f64, f64) = (1.5, 2.5);
const C2_LOSS_MAX: f64 = 1e-6;
const C2_RATIO_MAX: f64 = 10.0;
const C3_SE: (f64, f64) = (1.0, 0.35);
const C3_MP: (f64, f64) = (2.0, 0.45);
const C3_SE_CORR: (f64, f64) = (2.0, 0.45);
const C4_REL: f64 = 0.25;
const C4_H: f64 = 0.2;
const C5_H: f64 = 0.01;
const C5_REL: f64 = 0.10;
const C5_POINTS: usize = 20;
const C6_H: f64 = 0.2;
const C6_FACTOR: f64 = 10.0;
const C7_SYMPLECTIC: f64 = 1e-6;
const C7_EULER: f64 = 1e-8;
const C8_REL: f64 = 1e-4;
const C9_H: f64 = 0.1;
const C9_K: usize = 10_000;
const C9_DEPTH: usize = 2;
const C9_WIDTH: usize = 128;
const C9_LOSS_MAX: f64 = 1e-4;

struct Verdict {
    pass: bool,
    detail: String,
}

struct Run {
    model: LearnedHamiltonian,
    best_train: f64,
    best_test: f64,
    data: Dataset,
}

/// Trained models shared between criteria, keyed by system, scheme and h.
#[derive(Default)]
struct Runs(BTreeMap<(String, String, u64), Run>);

impl Runs {
    fn get(&mut self, sys: &HamiltonianSystem, scheme: Scheme, h: f64) -> Result<&Run> {
        let key = (sys.name().to_string(), scheme.to_string(), h.to_bits());
        if !self.0.contains_key(&key) {
            let data = Dataset::generate(sys, h, DESK_K, SEED)?;
            let run = fit(&data, scheme, DESK_DEPTH, DESK_WIDTH, DESK_EPOCHS)?;
            self.0.insert(key.clone(), run);
        }
        Ok(&self.0[&key])
    }
}

fn fit(data: &Dataset, scheme: Scheme, depth: usize, width: usize, epochs: usize) -> Result<Run> {
    let t = Instant::now();
    let mut cfg = TrainConfig::new(scheme, depth, width);
    cfg.epochs = epochs;
    cfg.seed = SEED;
    let out = train(data, &cfg)?;
    eprintln!(
        "  trained {} {scheme} h={} K={} L={depth} M={width}: best test {:.3e} ({:.1}s)",
        data.system,
        data.h,
        data.k(),
        out.report.best_test_loss(),
        t.elapsed().as_secs_f64()
    );
    Ok(Run {
        model: LearnedHamiltonian::new(out.params, scheme, data.h),
        best_train: out.report.best_train_loss(),
        best_test: out.report.best_test_loss(),
        data: data.clone(),
    })
}

fn eps(model: &LearnedHamiltonian, sys: &HamiltonianSystem) -> Result<f64> {
    Ok(epsilon_h(model, sys, EVAL_SAMPLES, SEED)?.epsilon_h.mean)
}

fn within(x: f64, (centre, tol): (f64, f64)) -> bool {
    (x - centre).abs() <= tol
}

fn c1(runs: &mut Runs) -> Result<Verdict> {
    let sys = HamiltonianSystem::spring();
    let hs = [0.1, 0.2, 0.4];
    let mut losses = Vec::new();
    for &h in &hs {
        losses.push(runs.get(&sys, Scheme::ForwardEuler, h)?.best_test);
    }
    let slope = order_fit(&hs, &losses)?.slope;
    Ok(Verdict {
        pass: (C1_SLOPE.0..=C1_SLOPE.1).contains(&slope),
        detail: format!(
            "forward-Euler loss slope {slope:.3} in [{}, {}]; losses {}",
            C1_SLOPE.0,
            C1_SLOPE.1,
            sci(&losses)
        ),
    })
}

fn c2(runs: &mut Runs) -> Result<Verdict> {
    let sys = HamiltonianSystem::spring();
    let mut pass = true;
    let mut parts = Vec::new();
    for scheme in [Scheme::SymplecticEuler, Scheme::ImplicitMidpoint] {
        let a = runs.get(&sys, scheme, 0.1)?.best_test;
        let b = runs.get(&sys, scheme, 0.4)?.best_test;
        let ratio = a.max(b) / a.min(b);
        pass &= a <= C2_LOSS_MAX && b <= C2_LOSS_MAX && ratio <= C2_RATIO_MAX;
        parts.push(format!("{scheme}: {a:.2e} (h=0.1), {b:.2e} (h=0.4), ratio {ratio:.1}"));
    }
    Ok(Verdict {
        pass,
        detail: format!(
            "best test loss <= {C2_LOSS_MAX:e}, ratio <= {C2_RATIO_MAX}; {}",
            parts.join("; ")
        ),
    })
}

fn c3(runs: &mut Runs) -> Result<Verdict> {
    let hs = [0.1, 0.2, 0.4, 0.8];
    let mut pass = true;
    let mut parts = Vec::new();
    for sys in [HamiltonianSystem::spring(), HamiltonianSystem::pendulum()] {
        let (mut se, mut mp, mut corr) = (Vec::new(), Vec::new(), Vec::new());
        for &h in &hs {
            let m = runs.get(&sys, Scheme::SymplecticEuler, h)?.model.clone();
            se.push(eps(&m, &sys)?);
            corr.push(eps(&m.with_correction(Correction::SeOrder2)?, &sys)?);
            mp.push(eps(&runs.get(&sys, Scheme::ImplicitMidpoint, h)?.model, &sys)?);
        }
        for (name, values, target) in [("se", &se, C3_SE), ("mp", &mp, C3_MP), ("se+corr", &corr, C3_SE_CORR)] {
            let slope = order_fit(&hs, values)?.slope;
            let ok = within(slope, target);
            pass &= ok;
            parts.push(format!(
                "{} {name} {slope:.2} ({}{}±{})",
                sys.name(),
                if ok { "" } else { "want " },
                target.0,
                target.1
            ));
        }
    }
    Ok(Verdict {
        pass,
        detail: format!("ε_H slopes: {}", parts.join(", ")),
    })
}

fn c4() -> Result<Verdict> {
    let mut pass = true;
    let mut parts = Vec::new();
    for sys in [HamiltonianSystem::spring(), HamiltonianSystem::pendulum()] {
        let region = measure_region(&sys);
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let starts: Vec<Vec<f64>> = (0..32).map(|_| region.sample(&mut rng)).collect();
        // symplectic Euler: residual O(h^(k+1)); midpoint: the series is even in h,
        // so the order-k truncation leaves O(h^(k+2))
        for (scheme, order, expect) in [
            (Scheme::SymplecticEuler, 0, 2.0),
            (Scheme::SymplecticEuler, 1, 4.0),
            (Scheme::SymplecticEuler, 2, 8.0),
            (Scheme::ImplicitMidpoint, 0, 4.0),
            (Scheme::ImplicitMidpoint, 2, 16.0),
        ] {
            let r = series_residual(&sys, scheme, order, &starts, C4_H)?
                / series_residual(&sys, scheme, order, &starts, C4_H / 2.0)?;
            let ok = (r / expect - 1.0).abs() <= C4_REL;
            pass &= ok;
            let tag = if scheme == Scheme::SymplecticEuler { "se" } else { "mp" };
            parts.push(format!("{} {tag}{order} {r:.2}/{expect}", sys.name()));
        }
    }
    Ok(Verdict {
        pass,
        detail: format!(
            "r(h)/r(h/2) at h={C4_H} within ±{:.0}%: {}",
            C4_REL * 100.0,
            parts.join(", ")
        ),
    })
}

fn c5() -> Result<Verdict> {
    let sys = HamiltonianSystem::pendulum();
    let h = C5_H;
    let flow = |y: &[f64]| sys.vector_field(y);
    let target = |y: &[f64]| -> Result<Vec<f64>> {
        let y1 = rk45_final(&flow, y, h, 1e-13, 1e-13)?;
        Ok(y1.iter().zip(y).map(|(a, b)| (a - b) / h).collect())
    };
    let step = 1e-4;
    let region = measure_region(&sys);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut num, mut den, mut worst) = (0.0, 0.0, 0.0f64);
    for _ in 0..C5_POINTS {
        let y = region.sample(&mut rng);
        let mut div = 0.0;
        for i in 0..2 {
            let mut a = y.clone();
            let mut b = y.clone();
            a[i] += step;
            b[i] -= step;
            div += (target(&a)?[i] - target(&b)?[i]) / (2.0 * step);
        }
        let predicted = h * mixed_derivative_mismatch(&sys, &y)?;
        num += (div - predicted).powi(2);
        den += predicted.powi(2);
        worst = worst.max((div - predicted).abs());
    }
    let rel = (num / den).sqrt();
    Ok(Verdict {
        pass: rel <= C5_REL,
        detail: format!(
            "FD divergence of forward-Euler target vs h·mismatch at h={h}, {C5_POINTS} points: \
             L2 relative error {rel:.4} <= {C5_REL} (max abs gap {worst:.2e})"
        ),
    })
}

fn c6(runs: &mut Runs) -> Result<Verdict> {
    let sys = HamiltonianSystem::spring();
    let run = runs.get(&sys, Scheme::SymplecticEuler, C6_H)?;
    let grad = |y: &[f64]| run.model.gradient(y);
    let pairs = run.data.train_pairs();
    let mut total = 0.0;
    for p in &pairs {
        let step = symplectic_euler_step(&grad, &p.y0, C6_H, IMPLICIT_TOL, IMPLICIT_MAX_ITER)?;
        total += step
            .y_next
            .iter()
            .zip(&p.y1)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    let mse = total / pairs.len() as f64;
    let bound = C6_FACTOR * run.best_train * C6_H * C6_H;
    Ok(Verdict {
        pass: mse <= bound,
        detail: format!(
            "one-step MSE {mse:.3e} <= {C6_FACTOR}·train loss·h² = {bound:.3e} (train loss {:.3e})",
            run.best_train
        ),
    })
}

fn c7() -> Result<Verdict> {
    let pend = HamiltonianSystem::pendulum();
    let spring = HamiltonianSystem::spring();
    let points = [[0.5, 1.0], [-1.2, 0.3], [0.0, -2.0], [1.5, 2.5]];
    let mut worst_symplectic = 0.0f64;
    let mut worst_euler = 0.0f64;
    for h in [0.05, 0.2, 0.8] {
        let grad = |y: &[f64]| pend.grad(y);
        let field = |y: &[f64]| pend.vector_field(y);
        let se = |y: &[f64]| {
            symplectic_euler_step(&grad, y, h, 1e-14, 500)
                .expect("symplectic Euler step")
                .y_next
        };
        let mp = |y: &[f64]| {
            implicit_midpoint_step(&field, y, h, 1e-14, 500)
                .expect("midpoint step")
                .y_next
        };
        let sf = |y: &[f64]| spring.vector_field(y);
        let fe = |y: &[f64]| forward_euler_step(&sf, y, h).expect("Euler step").y_next;
        for y in &points {
            worst_symplectic = worst_symplectic
                .max((determinant(&fd_jacobian(se, y, 1e-5)) - 1.0).abs())
                .max((determinant(&fd_jacobian(mp, y, 1e-5)) - 1.0).abs());
            worst_euler = worst_euler.max((determinant(&fd_jacobian(fe, y, 1e-3)) - (1.0 + h * h)).abs());
        }
    }
    Ok(Verdict {
        pass: worst_symplectic <= C7_SYMPLECTIC && worst_euler <= C7_EULER,
        detail: format!(
            "max |det − 1| {worst_symplectic:.2e} <= {C7_SYMPLECTIC:e} (SE, MP on pendulum); \
             max |det − (1+h²)| {worst_euler:.2e} <= {C7_EULER:e} (FE on spring)"
        ),
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

fn central(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += step;
            b[i] -= step;
            (f(&a) - f(&b)) / (2.0 * step)
        })
        .collect()
}

fn c8() -> Result<Verdict> {
    let arch = Architecture::new(1, 1, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for trial in 0..20u64 {
        let net = MlpParams::init(trial, arch);
        let theta = net.to_flat();
        let y: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        note("input gradient", rel_err(&net.gradient(&y), &central(|x| net.value(x), &y, 1e-5)));
        let hess = net.hessian(&y);
        for i in 0..2 {
            note("input hessian", rel_err(&hess[i], &central(|x| net.gradient(x)[i], &y, 1e-5)));
        }
        for c in [Correction::SeOrder2, Correction::SeOrder3, Correction::MpOrder4] {
            let f = SeriesField::correction(&net, c, 0.3);
            note("corrected field", rel_err(&f.gradient(&y), &central(|x| f.value(x), &y, 1e-5)));
        }
        let pairs: Vec<_> = (0..6)
            .map(|_| shnn::dataset::DataPair {
                y0: (0..2).map(|_| rng.random_range(-1.5..1.5)).collect(),
                y1: (0..2).map(|_| rng.random_range(-1.5..1.5)).collect(),
            })
            .collect();
        for scheme in Scheme::ALL {
            let batch = LossBatch::new(&pairs, scheme, 0.2)?;
            let (_, g) = loss_and_gradient(&arch, &theta, &batch)?;
            let fd = central(|t| batch_loss(&arch, t, &batch).expect("loss"), &theta, 1e-6);
            note("loss parameter gradient", rel_err(&g, &fd));
        }
    }
    let pass = worst.values().all(|e| *e <= C8_REL);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(Verdict {
        pass,
        detail: format!("max relative error vs central FD <= {C8_REL:e}: {}", parts.join(", ")),
    })
}

fn c9() -> Result<Verdict> {
    let sys = HamiltonianSystem::double_pendulum();
    let data = Dataset::generate(&sys, C9_H, C9_K, SEED)?;
    let mp = fit(&data, Scheme::ImplicitMidpoint, C9_DEPTH, C9_WIDTH, DESK_EPOCHS)?;
    let fe = fit(&data, Scheme::ForwardEuler, C9_DEPTH, C9_WIDTH, DESK_EPOCHS)?;
    let (e_mp, e_fe) = (eps(&mp.model, &sys)?, eps(&fe.model, &sys)?);
    Ok(Verdict {
        pass: mp.best_test <= C9_LOSS_MAX && e_mp < e_fe,
        detail: format!(
            "midpoint best test loss {:.3e} <= {C9_LOSS_MAX:e}; ε_H midpoint {e_mp:.3e} < forward Euler {e_fe:.3e}",
            mp.best_test
        ),
    })
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(", ")
}

fn main() {
    // `cargo test -- --list` and filters: this target has no sub-tests
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut runs = Runs::default();
    let criteria: Vec<(&str, Box<dyn FnMut(&mut Runs) -> Result<Verdict>>)> = vec![
        ("forward-Euler loss floor ∝ h²", Box::new(c1)),
        ("SHNN loss collapse", Box::new(c2)),
        ("ε_H order", Box::new(c3)),
        ("series residual order", Box::new(|_| c4())),
        ("forward-Euler mismatch formula", Box::new(|_| c5())),
        ("one-step round trip", Box::new(c6)),
        ("integrator symplecticity", Box::new(|_| c7())),
        ("gradient correctness", Box::new(|_| c8())),
        ("double pendulum sanity", Box::new(|_| c9())),
    ];
    // SHNN_ACCEPTANCE=1,3,6 runs a subset
    let only: Option<Vec<usize>> = std::env::var("SHNN_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut passed = 0;
    let mut total = 0;
    for (i, (name, mut run)) in criteria.into_iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        total += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut runs)));
        let (pass, detail) = match outcome {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        passed += pass as usize;
        println!(
            "{} criterion {}: {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{total} criteria pass");
}
