//! Scheme-dependent (S)HNN losses, AdamW, and the full-batch training loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataPair, Dataset};
use crate::diff_engine::{self, AdError, Differentiable, Graph, Objective, Var};
use crate::error::ShnnError;
use crate::mlp::{Architecture, Init, MlpParams};

/// Where the learned vector field is evaluated inside the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ForwardEuler,
    SymplecticEuler,
    ImplicitMidpoint,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [
        Scheme::ForwardEuler,
        Scheme::SymplecticEuler,
        Scheme::ImplicitMidpoint,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Scheme::ForwardEuler => "forward-euler",
            Scheme::SymplecticEuler => "symplectic-euler",
            Scheme::ImplicitMidpoint => "implicit-midpoint",
        }
    }

    /// `s(y₀, y₁)` on flat `(p, q)` vectors.
    pub fn point(self, y0: &[f64], y1: &[f64]) -> Vec<f64> {
        let n = y0.len() / 2;
        match self {
            Scheme::ForwardEuler => y0.to_vec(),
            Scheme::SymplecticEuler => {
                let mut s = y1[..n].to_vec();
                s.extend_from_slice(&y0[n..]);
                s
            }
            Scheme::ImplicitMidpoint => y0.iter().zip(y1).map(|(a, b)| 0.5 * (a + b)).collect(),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scheme {
    type Err = ShnnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| {
                ShnnError::InvalidArgument(format!(
                    "unknown scheme `{s}` (expected forward-euler, symplectic-euler or implicit-midpoint)"
                ))
            })
    }
}

pub fn scheme_point(scheme: Scheme, pair: &DataPair) -> Vec<f64> {
    scheme.point(&pair.y0, &pair.y1)
}

/// Evaluation points and finite-difference targets `(y₁ − y₀)/h`, one row per pair.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub points: Array2<f64>,
    pub targets: Array2<f64>,
}

impl LossBatch {
    pub fn new(pairs: &[DataPair], scheme: Scheme, h: f64) -> Result<Self, ShnnError> {
        if pairs.is_empty() {
            return Err(ShnnError::InvalidArgument("loss of an empty pair list".into()));
        }
        let d = pairs[0].y0.len();
        let mut points = Array2::zeros((pairs.len(), d));
        let mut targets = Array2::zeros((pairs.len(), d));
        for (i, pair) in pairs.iter().enumerate() {
            if pair.y0.len() != d || pair.y1.len() != d {
                return Err(ShnnError::InvalidArgument(
                    "pairs have inconsistent dimensions".into(),
                ));
            }
            for (j, v) in scheme_point(scheme, pair).into_iter().enumerate() {
                points[[i, j]] = v;
                targets[[i, j]] = (pair.y1[j] - pair.y0[j]) / h;
            }
        }
        Ok(Self { points, targets })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, start: usize, end: usize) -> LossBatch {
        LossBatch {
            points: self.points.slice(ndarray::s![start..end, ..]).to_owned(),
            targets: self.targets.slice(ndarray::s![start..end, ..]).to_owned(),
        }
    }
}

/// `(1/B) Σ ‖target − J⁻¹∇F(point)‖²` for a network architecture, with the
/// sum scaled by `weight` instead of `1/B` when the batch is a chunk of a
/// larger one.
pub struct ShnnObjective<'a, F: Differentiable> {
    pub field: &'a F,
    pub batch: &'a LossBatch,
    pub weight: f64,
}

/// The matrix `P` with `∇F · P = J⁻¹∇F` for row gradients.
fn symplectic_matrix(d: usize) -> Array2<f64> {
    let n = d / 2;
    let mut m = Array2::zeros((d, d));
    for i in 0..n {
        m[[n + i, i]] = -1.0;
        m[[i, n + i]] = 1.0;
    }
    m
}

impl<F: Differentiable> Objective for ShnnObjective<'_, F> {
    fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.field.param_shapes()
    }

    fn build(&self, g: &mut Graph, params: &[Var]) -> Result<Var, AdError> {
        let d = self.field.input_dim();
        if self.batch.points.ncols() != d {
            return Err(AdError::InputDimension {
                expected: d,
                got: self.batch.points.ncols(),
            });
        }
        let x = g.variable(self.batch.points.clone())?;
        let out = self.field.build(g, params, x)?;
        let total = g.sum_all(out)?;
        let grad = g.grad_graph(total, &[x])?[0];
        let perm = g.constant(symplectic_matrix(d))?;
        let sg = g.matmul(grad, perm)?;
        let target = g.constant(self.batch.targets.clone())?;
        let resid = g.sub(target, sg)?;
        let sq = g.norm_sq(resid)?;
        g.scale(sq, self.weight)
    }
}

/// Rows per chunk when a batch is split for evaluation. Fixed, so results do
/// not depend on the number of threads.
const CHUNK_ROWS: usize = 512;

fn chunks(batch: &LossBatch) -> Vec<LossBatch> {
    let b = batch.len();
    (0..b)
        .step_by(CHUNK_ROWS)
        .map(|s| batch.rows(s, (s + CHUNK_ROWS).min(b)))
        .collect()
}

fn map_chunks<T: Send>(parts: &[LossBatch], f: impl Fn(&LossBatch) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        parts.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        parts.iter().map(f).collect()
    }
}

/// Loss value and its gradient with respect to the flat parameters.
pub fn loss_and_gradient(
    arch: &Architecture,
    params: &[f64],
    batch: &LossBatch,
) -> Result<(f64, Vec<f64>), ShnnError> {
    let weight = 1.0 / batch.len() as f64;
    let parts = chunks(batch);
    let results = map_chunks(&parts, |c| {
        diff_engine::parameter_gradient(
            &ShnnObjective {
                field: arch,
                batch: c,
                weight,
            },
            params,
        )
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for r in results {
        let (l, gr) = r?;
        loss += l;
        grad.iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

/// Loss value only.
pub fn batch_loss(arch: &Architecture, params: &[f64], batch: &LossBatch) -> Result<f64, ShnnError> {
    let weight = 1.0 / batch.len() as f64;
    let parts = chunks(batch);
    let results = map_chunks(&parts, |c| {
        let (_, grads) = diff_engine::batch_value_and_gradient(arch, params, &c.points)?;
        let d = grads.ncols();
        let n = d / 2;
        let mut s = 0.0;
        for (gr, t) in grads.rows().into_iter().zip(c.targets.rows()) {
            for i in 0..n {
                s += (t[i] + gr[n + i]).powi(2) + (t[n + i] - gr[i]).powi(2);
            }
        }
        Ok::<f64, AdError>(s * weight)
    });
    let mut loss = 0.0;
    for r in results {
        loss += r?;
    }
    Ok(loss)
}

/// Mean over pairs of `‖(y₁ − y₀)/h − J⁻¹∇Ĥ(s(y₀, y₁))‖²`.
pub fn loss(params: &MlpParams, pairs: &[DataPair], scheme: Scheme, h: f64) -> Result<f64, ShnnError> {
    let batch = LossBatch::new(pairs, scheme, h)?;
    batch_loss(&params.arch, &params.to_flat(), &batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step(theta: &mut [f64], grad: &[f64], state: &mut AdamWState, cfg: &AdamWConfig) {
    assert_eq!(theta.len(), grad.len(), "parameter and gradient lengths differ");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Hidden layers `L`.
    pub depth: usize,
    /// Neurons per hidden layer `M`.
    pub width: usize,
    #[serde(default)]
    pub init: Init,
}

impl TrainConfig {
    pub fn new(scheme: Scheme, depth: usize, width: usize) -> Self {
        Self {
            scheme,
            epochs: 5000,
            optimizer: AdamWConfig::default(),
            seed: 0,
            depth,
            width,
            init: Init::Glorot,
        }
    }

    fn validate(&self) -> Result<(), ShnnError> {
        let o = &self.optimizer;
        if self.epochs == 0 {
            return Err(ShnnError::InvalidArgument("epochs must be at least 1".into()));
        }
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(o.eps > 0.0) {
            return Err(ShnnError::InvalidArgument(
                "learning rate and eps must be positive, weight decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(ShnnError::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses. Entry `e` holds the losses of the parameters reached
/// after the `e`-th optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.test_loss.len()
    }

    pub fn best_test_loss(&self) -> f64 {
        self.test_loss[self.best_epoch]
    }

    pub fn best_train_loss(&self) -> f64 {
        self.train_loss[self.best_epoch]
    }

    /// CSV with columns `epoch, train_loss, test_loss`; epochs count from 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ShnnError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "test_loss"])?;
        for (e, (a, b)) in self.train_loss.iter().zip(&self.test_loss).enumerate() {
            w.write_record([(e + 1).to_string(), format!("{a:?}"), format!("{b:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of [`train`]: parameters from the best-test-loss epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub report: TrainReport,
}

const DIVERGENCE_TAIL: usize = 10;

fn diverged(epoch: usize, loss: f64, history: &[f64]) -> ShnnError {
    let tail = history[history.len().saturating_sub(DIVERGENCE_TAIL)..].to_vec();
    ShnnError::Diverged { epoch, loss, tail }
}

/// Full-batch AdamW on the train split with best-test-loss checkpointing.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, ShnnError> {
    train_with_progress(ds, cfg, |_, _, _| {})
}

/// [`train`] with a callback `(epoch, train_loss, test_loss)` after every epoch.
pub fn train_with_progress(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<TrainOutcome, ShnnError> {
    cfg.validate()?;
    let arch = Architecture::new(ds.n(), cfg.depth, cfg.width)?;
    let train_batch = LossBatch::new(&ds.train_pairs(), cfg.scheme, ds.h)?;
    let test_batch = LossBatch::new(&ds.test_pairs(), cfg.scheme, ds.h)?;

    let mut theta = MlpParams::init_with(cfg.seed, arch, cfg.init).to_flat();
    let mut state = AdamWState::new(theta.len());
    let mut train_loss: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut test_loss: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;

    let (mut current, mut grad) = loss_and_gradient(&arch, &theta, &train_batch)?;
    if !current.is_finite() {
        return Err(diverged(0, current, &train_loss));
    }
    for epoch in 0..cfg.epochs {
        adamw_step(&mut theta, &grad, &mut state, &cfg.optimizer);
        let nan = |e: ShnnError| match e {
            ShnnError::Ad(AdError::NonFinite(_)) => diverged(epoch + 1, f64::NAN, &train_loss),
            other => other,
        };
        (current, grad) = loss_and_gradient(&arch, &theta, &train_batch).map_err(nan)?;
        let test = batch_loss(&arch, &theta, &test_batch).map_err(nan)?;
        if !current.is_finite() || !test.is_finite() {
            return Err(diverged(epoch + 1, current, &train_loss));
        }
        train_loss.push(current);
        test_loss.push(test);
        progress(epoch + 1, current, test);
        if best.as_ref().is_none_or(|b| test < b.1) {
            best = Some((epoch, test, theta.clone()));
        }
    }
    let (best_epoch, _, best_theta) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params: MlpParams::from_flat(arch, &best_theta)?,
        report: TrainReport {
            train_loss,
            test_loss,
            best_epoch,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::HamiltonianSystem;

    fn pair(y0: &[f64], y1: &[f64]) -> DataPair {
        DataPair {
            y0: y0.to_vec(),
            y1: y1.to_vec(),
        }
    }

    #[test]
    fn scheme_points() {
        let p = pair(&[0.0, 1.0], &[2.0, 3.0]);
        assert_eq!(scheme_point(Scheme::ForwardEuler, &p), vec![0.0, 1.0]);
        assert_eq!(scheme_point(Scheme::SymplecticEuler, &p), vec![2.0, 1.0]);
        assert_eq!(scheme_point(Scheme::ImplicitMidpoint, &p), vec![1.0, 2.0]);
        let same = pair(&[0.4, -0.3], &[0.4, -0.3]);
        for s in Scheme::ALL {
            assert_eq!(scheme_point(s, &same), same.y0);
        }
        let p2 = pair(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(scheme_point(Scheme::SymplecticEuler, &p2), vec![5.0, 6.0, 3.0, 4.0]);
    }

    #[test]
    fn scheme_ids_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.id().parse::<Scheme>().unwrap(), s);
        }
        assert!("rk4".parse::<Scheme>().is_err());
    }

    #[test]
    fn zero_network_loss_is_target_norm() {
        let arch = Architecture::new(1, 1, 4).unwrap();
        let params = MlpParams::zeros(arch);
        let p = pair(&[0.1, 0.2], &[0.3, -0.1]);
        let h = 0.1;
        let expected = ((0.3f64 - 0.1) / h).powi(2) + ((-0.1f64 - 0.2) / h).powi(2);
        for s in Scheme::ALL {
            let l = loss(&params, &[p.clone()], s, h).unwrap();
            assert!((l - expected).abs() < 1e-12 * expected);
        }
    }

    #[test]
    fn empty_pair_list_rejected() {
        let params = MlpParams::zeros(Architecture::new(1, 1, 2).unwrap());
        assert!(loss(&params, &[], Scheme::ForwardEuler, 0.1).is_err());
    }

    #[test]
    fn chunked_loss_matches_single_pass() {
        let ds = Dataset::generate(&HamiltonianSystem::pendulum(), 0.1, 1400, 2).unwrap();
        let params = MlpParams::init(3, Architecture::new(1, 1, 8).unwrap());
        let flat = params.to_flat();
        let batch = LossBatch::new(&ds.pairs, Scheme::ImplicitMidpoint, 0.1).unwrap();
        assert!(batch.len() > CHUNK_ROWS);
        let (l, _) = loss_and_gradient(&params.arch, &flat, &batch).unwrap();
        let direct = diff_engine::objective_value(
            &ShnnObjective {
                field: &params.arch,
                batch: &batch,
                weight: 1.0 / batch.len() as f64,
            },
            &flat,
        )
        .unwrap();
        let valued = batch_loss(&params.arch, &flat, &batch).unwrap();
        assert!((l - direct).abs() <= 1e-12 * direct);
        assert!((valued - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn adamw_zero_stays_zero() {
        let mut theta = vec![0.0; 3];
        let mut st = AdamWState::new(3);
        for _ in 0..5 {
            adamw_step(&mut theta, &[0.0; 3], &mut st, &AdamWConfig::default());
        }
        assert_eq!(theta, vec![0.0; 3]);
    }

    #[test]
    fn adamw_first_step_by_hand() {
        let mut theta = vec![1.0];
        let mut st = AdamWState::new(1);
        adamw_step(&mut theta, &[1.0], &mut st, &AdamWConfig::default());
        // m̂ = v̂ = 1 after bias correction.
        let expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 1e-2);
        assert!((theta[0] - expected).abs() < 1e-15);
        assert!((theta[0] - 0.99899).abs() < 1e-8);
    }

    #[test]
    fn adamw_without_decay_is_adam() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut theta = vec![0.7];
        let mut st = AdamWState::new(1);
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = (0.3 * t as f64).sin() + x;
            adamw_step(&mut theta, &[g], &mut st, &cfg);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((theta[0] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn one_epoch_report() {
        let ds = Dataset::generate(&HamiltonianSystem::spring(), 0.1, 20, 0).unwrap();
        let mut cfg = TrainConfig::new(Scheme::SymplecticEuler, 1, 8);
        cfg.epochs = 1;
        let out = train(&ds, &cfg).unwrap();
        assert_eq!(out.report.epochs(), 1);
        assert_eq!(out.report.train_loss.len(), 1);
        assert_eq!(out.report.best_epoch, 0);
        let init = MlpParams::init_with(cfg.seed, out.params.arch, cfg.init);
        let mut theta = init.to_flat();
        let batch = LossBatch::new(&ds.train_pairs(), cfg.scheme, ds.h).unwrap();
        let (_, grad) = loss_and_gradient(&init.arch, &theta, &batch).unwrap();
        let mut st = AdamWState::new(theta.len());
        adamw_step(&mut theta, &grad, &mut st, &cfg.optimizer);
        assert_eq!(out.params.to_flat(), theta);
    }

    #[test]
    fn best_epoch_is_argmin_and_training_is_deterministic() {
        let ds = Dataset::generate(&HamiltonianSystem::pendulum(), 0.2, 60, 5).unwrap();
        let mut cfg = TrainConfig::new(Scheme::ImplicitMidpoint, 1, 8);
        cfg.epochs = 40;
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.report, b.report);
        let min = a.report.test_loss.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(a.report.best_test_loss(), min);
        let test = loss(&a.params, &ds.test_pairs(), cfg.scheme, ds.h).unwrap();
        assert!((test - min).abs() <= 1e-12 * min);
    }

    #[test]
    fn report_csv() {
        let r = TrainReport {
            train_loss: vec![1.0, 0.5],
            test_loss: vec![2.0, 0.25],
            best_epoch: 1,
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,train_loss,test_loss\n1,1.0,2.0\n2,0.5,0.25\n");
    }
}
