//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A [`Demo`] holds one dataset and one network. The page drives three
//! operations: train for some epochs, measure ε_H with each applicable
//! correction, and roll out the learned flow next to the true one.

use shnn::correction::Correction;
use shnn::dataset::Dataset;
use shnn::evaluation::epsilon_h;
use shnn::field::ScalarField;
use shnn::integrators::{rk45_integrate, ROLLOUT_TOL};
use shnn::mlp::{Architecture, MlpParams};
use shnn::model::LearnedHamiltonian;
use shnn::systems::{HamiltonianSystem, SystemKind};
use shnn::training::{adamw_step, batch_loss, loss_and_gradient, AdamWConfig, AdamWState, LossBatch, Scheme};
use wasm_bindgen::prelude::*;

pub struct Trainer {
    system: HamiltonianSystem,
    scheme: Scheme,
    h: f64,
    arch: Architecture,
    theta: Vec<f64>,
    state: AdamWState,
    opt: AdamWConfig,
    train: LossBatch,
    test: LossBatch,
    best: Option<(f64, Vec<f64>)>,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl Trainer {
    pub fn new(
        system: &str,
        scheme: &str,
        h: f64,
        k: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self, String> {
        let kind: SystemKind = system.parse().map_err(err)?;
        let scheme: Scheme = scheme.parse().map_err(err)?;
        let system = HamiltonianSystem::from_kind(kind);
        let ds = Dataset::generate(&system, h, k, seed).map_err(err)?;
        let arch = Architecture::new(ds.n(), 1, width).map_err(err)?;
        let theta = MlpParams::init(seed, arch).to_flat();
        Ok(Self {
            train: LossBatch::new(&ds.train_pairs(), scheme, h).map_err(err)?,
            test: LossBatch::new(&ds.test_pairs(), scheme, h).map_err(err)?,
            state: AdamWState::new(theta.len()),
            opt: AdamWConfig::default(),
            system,
            scheme,
            h,
            arch,
            theta,
            best: None,
            train_loss: Vec::new(),
            test_loss: Vec::new(),
        })
    }

    /// Runs `epochs` AdamW steps and returns the latest test loss.
    pub fn step(&mut self, epochs: usize) -> Result<f64, String> {
        for _ in 0..epochs {
            let (_, g) = loss_and_gradient(&self.arch, &self.theta, &self.train).map_err(err)?;
            adamw_step(&mut self.theta, &g, &mut self.state, &self.opt);
            let tr = batch_loss(&self.arch, &self.theta, &self.train).map_err(err)?;
            let te = batch_loss(&self.arch, &self.theta, &self.test).map_err(err)?;
            if !tr.is_finite() || !te.is_finite() {
                return Err(format!("training diverged at epoch {}", self.test_loss.len() + 1));
            }
            self.train_loss.push(tr);
            self.test_loss.push(te);
            if self.best.as_ref().is_none_or(|b| te < b.0) {
                self.best = Some((te, self.theta.clone()));
            }
        }
        Ok(self.test_loss.last().copied().unwrap_or(f64::NAN))
    }

    /// The best checkpoint so far, with a correction applied.
    pub fn model(&self, correction: Correction) -> Result<LearnedHamiltonian, String> {
        let flat = self.best.as_ref().map_or(&self.theta, |b| &b.1);
        let params = MlpParams::from_flat(self.arch, flat).map_err(err)?;
        LearnedHamiltonian::new(params, self.scheme, self.h)
            .with_correction(correction)
            .map_err(err)
    }

    /// Corrections that apply to the training scheme, starting with `none`.
    pub fn corrections(&self) -> Vec<Correction> {
        [Correction::None, Correction::SeOrder2, Correction::SeOrder3, Correction::MpOrder4]
            .into_iter()
            .filter(|c| c.check_scheme(self.scheme).is_ok())
            .collect()
    }

    /// Mean ε_H for every applicable correction, in the order of [`Self::corrections`].
    pub fn errors(&self, n: usize, seed: u64) -> Result<Vec<f64>, String> {
        self.corrections()
            .into_iter()
            .map(|c| {
                let m = self.model(c)?;
                Ok(epsilon_h(&m, &self.system, n, seed).map_err(err)?.epsilon_h.mean)
            })
            .collect()
    }

    /// Rows `t, p, q (model), p, q (true)` flattened, for one degree of freedom.
    pub fn rollout(&self, p0: f64, q0: f64, t_final: f64, correction: Correction) -> Result<Vec<f64>, String> {
        if self.system.n() != 1 {
            return Err("rollout plot supports one degree of freedom".into());
        }
        let m = self.model(correction)?;
        let steps = ((t_final / 0.05).round() as usize).max(1);
        let times: Vec<f64> = (0..=steps).map(|i| i as f64 * t_final / steps as f64).collect();
        let mf = |y: &[f64]| m.symplectic_gradient(y);
        let tf = |y: &[f64]| self.system.vector_field(y);
        let a = rk45_integrate(&mf, &[p0, q0], &times, ROLLOUT_TOL, ROLLOUT_TOL).map_err(err)?;
        let b = rk45_integrate(&tf, &[p0, q0], &times, ROLLOUT_TOL, ROLLOUT_TOL).map_err(err)?;
        Ok(times
            .iter()
            .zip(a.states.iter().zip(&b.states))
            .flat_map(|(t, (x, y))| [*t, x[0], x[1], y[0], y[1]])
            .collect())
    }
}

#[wasm_bindgen]
pub struct Demo(Trainer);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(system: &str, scheme: &str, h: f64, k: usize, width: usize, seed: u32) -> Result<Demo, JsError> {
        Trainer::new(system, scheme, h, k, width, seed as u64)
            .map(Demo)
            .map_err(|e| JsError::new(&e))
    }

    pub fn train(&mut self, epochs: usize) -> Result<f64, JsError> {
        self.0.step(epochs).map_err(|e| JsError::new(&e))
    }

    pub fn epochs(&self) -> usize {
        self.0.test_loss.len()
    }

    #[wasm_bindgen(js_name = trainLoss)]
    pub fn train_loss(&self) -> Vec<f64> {
        self.0.train_loss.clone()
    }

    #[wasm_bindgen(js_name = testLoss)]
    pub fn test_loss(&self) -> Vec<f64> {
        self.0.test_loss.clone()
    }

    pub fn corrections(&self) -> Vec<String> {
        self.0.corrections().iter().map(|c| c.to_string()).collect()
    }

    pub fn errors(&self, n: usize) -> Result<Vec<f64>, JsError> {
        self.0.errors(n, 0).map_err(|e| JsError::new(&e))
    }

    pub fn rollout(&self, p0: f64, q0: f64, t_final: f64, correction: &str) -> Result<Vec<f64>, JsError> {
        let c: Correction = correction.parse().map_err(|e: shnn::ShnnError| JsError::new(&e.to_string()))?;
        self.0
            .rollout(p0, q0, t_final, c)
            .map_err(|e| JsError::new(&e))
    }
}
