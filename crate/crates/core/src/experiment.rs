//! End-to-end experiment runs: datasets, training per (scheme, h, seed),
//! corrections, metrics, and the CSV/JSON report bundle.
//!
//! Bundle layout under the output directory:
//!
//! ```text
//! metadata.json                    resolved configuration
//! datasets/<system>_h<h>_s<seed>.csv
//! models/<cell>.json
//! losses/<cell>.csv (+ .json)      epoch, train_loss, test_loss
//! summary.csv (+ .json)            one row per evaluated model
//! orders.csv (+ .json)             ε_H order fits and loss-plateau fits
//! rollouts/<cell>[_<corr>].csv     t, mse, sem
//! trajectories/<cell>[_<corr>].csv per-coordinate model and true states
//! error_grids/<cell>[_<corr>].csv  p, q, error (one degree of freedom)
//! ```
//!
//! Every CSV except the datasets has a JSON sidecar of the same stem.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::correction::Correction;
use crate::dataset::Dataset;
use crate::error::ShnnError;
use crate::evaluation::{
    epsilon_h, error_grid, order_fit, plateau_check, rollout_mse, sample_times, EvalReport,
};
use crate::mlp::Init;
use crate::model::LearnedHamiltonian;
use crate::systems::{HamiltonianSystem, SystemKind};
use crate::training::{train, AdamWConfig, Scheme, TrainConfig, TrainReport};

/// `(L, M, K)` from the paper's hyperparameter table for a system and step.
pub fn paper_sizes(system: SystemKind, h: f64) -> (usize, usize, usize) {
    let col = if h >= 0.2 {
        0
    } else if h >= 0.1 {
        1
    } else {
        2
    };
    match (system, col) {
        (SystemKind::DoublePendulum, 0) => (2, 400, 100_000),
        (SystemKind::DoublePendulum, _) => (3, 600, 100_000),
        (_, 0) => (1, 200, 2_000),
        (_, 1) => (2, 200, 4_000),
        (_, _) => (3, 200, 10_000),
    }
}

/// Reduced sizes for laptop runs.
pub fn desk_sizes(system: SystemKind) -> (usize, usize, usize) {
    match system {
        SystemKind::DoublePendulum => (2, 128, 10_000),
        _ => (1, 64, 512),
    }
}

pub const PAPER_EPOCHS: usize = 5000;
pub const DESK_EPOCHS: usize = 2000;

fn default_schemes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_eval_samples() -> usize {
    2000
}
fn default_rollouts() -> usize {
    50
}

/// Experiment description, read from JSON. Unset sizes fall back to the
/// desk defaults, or to the paper table when `paper_scale` is true.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: SystemKind,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    pub h: Vec<f64>,
    #[serde(default)]
    pub paper_scale: bool,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default, rename = "L")]
    pub depth: Option<usize>,
    #[serde(default, rename = "M")]
    pub width: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Applied to every trained model whose scheme it fits.
    #[serde(default)]
    pub corrections: Vec<Correction>,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_rollouts")]
    pub rollout_trajectories: usize,
    /// Rollout horizon; 0 disables rollouts. Defaults to 20 (desk) or 100 (paper).
    #[serde(default)]
    pub rollout_t_final: Option<f64>,
    /// Grid resolution of the error maps; 0 disables them.
    #[serde(default)]
    pub error_grid: usize,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub optimizer: Option<AdamWConfig>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ShnnError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ShnnError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), ShnnError> {
        if self.h.is_empty() || self.schemes.is_empty() || self.seeds.is_empty() {
            return Err(ShnnError::InvalidArgument(
                "experiment needs at least one h, scheme and seed".into(),
            ));
        }
        if self.h.iter().any(|h| !(*h > 0.0)) {
            return Err(ShnnError::InvalidArgument("all h must be positive".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ShnnError::InvalidArgument(format!(
                "experiment name `{}` is not a plain file name",
                self.name
            )));
        }
        if !self
            .corrections
            .iter()
            .all(|c| self.schemes.iter().any(|s| c.check_scheme(*s).is_ok()))
        {
            return Err(ShnnError::Conflict(
                "a requested correction matches none of the schemes".into(),
            ));
        }
        Ok(())
    }

    /// `(L, M, K, epochs)` for one step size.
    pub fn sizes(&self, h: f64) -> (usize, usize, usize, usize) {
        let (l, m, k) = if self.paper_scale {
            paper_sizes(self.system, h)
        } else {
            desk_sizes(self.system)
        };
        let epochs = if self.paper_scale { PAPER_EPOCHS } else { DESK_EPOCHS };
        (
            self.depth.unwrap_or(l),
            self.width.unwrap_or(m),
            self.k.unwrap_or(k),
            self.epochs.unwrap_or(epochs),
        )
    }

    pub fn t_final(&self) -> f64 {
        self.rollout_t_final
            .unwrap_or(if self.paper_scale { 100.0 } else { 20.0 })
    }
}

/// One trained and evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub scheme: Scheme,
    pub correction: Correction,
    pub h: f64,
    pub seed: u64,
    #[serde(rename = "L")]
    pub depth: usize,
    #[serde(rename = "M")]
    pub width: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_train_loss: f64,
    pub best_test_loss: f64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub quantity: String,
    pub scheme: Scheme,
    pub correction: Correction,
    pub seed: u64,
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub orders: Vec<OrderRow>,
    pub out_dir: PathBuf,
}

fn stage<T>(name: impl Into<String>, r: Result<T, ShnnError>) -> Result<T, ShnnError> {
    r.map_err(|e| ShnnError::Stage {
        stage: name.into(),
        source: Box::new(e),
    })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, ShnnError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Writes the JSON sidecar of a CSV file: same stem, `.json` extension.
pub fn write_sidecar(csv_path: &Path, meta: &serde_json::Value) -> Result<(), ShnnError> {
    let path = csv_path.with_extension("json");
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), ShnnError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_h(h: f64) -> String {
    format!("{h}")
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

/// Runs every (h, seed, scheme) cell of the configuration and writes the
/// bundle under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ReportBundle, ShnnError> {
    cfg.validate()?;
    let system = HamiltonianSystem::from_kind(cfg.system);
    let sys_id = system.name();
    fs::create_dir_all(out_dir)?;

    let resolved: Vec<_> = cfg
        .h
        .iter()
        .map(|&h| {
            let (l, m, k, e) = cfg.sizes(h);
            json!({"h": h, "L": l, "M": m, "K": k, "epochs": e})
        })
        .collect();
    let meta = json!({
        "generator": concat!("shnn ", env!("CARGO_PKG_VERSION")),
        "config": cfg,
        "resolved_sizes": resolved,
    });
    fs::write(out_dir.join("metadata.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

    let mut cells = Vec::new();
    let mut losses: Vec<(Scheme, u64, f64, TrainReport)> = Vec::new();
    for &seed in &cfg.seeds {
        for &h in &cfg.h {
            let (depth, width, k, epochs) = cfg.sizes(h);
            let tag = format!("{sys_id}_h{}_s{seed}", fmt_h(h));
            let ds = stage(
                format!("generate {tag}"),
                Dataset::generate(&system, h, k, seed),
            )?;
            stage(
                format!("save dataset {tag}"),
                ds.save(out_dir.join("datasets").join(format!("{tag}.csv"))),
            )?;
            for &scheme in &cfg.schemes {
                let cell = format!("{sys_id}_{scheme}_h{}_s{seed}", fmt_h(h));
                log::info!("training {cell}");
                let tc = TrainConfig {
                    scheme,
                    epochs,
                    optimizer: cfg.optimizer.unwrap_or_default(),
                    seed,
                    depth,
                    width,
                    init: cfg.init,
                };
                let out = stage(format!("train {cell}"), train(&ds, &tc))?;
                let loss_path = out_dir.join("losses").join(format!("{cell}.csv"));
                stage(format!("write losses {cell}"), (|| {
                    out.report.write_csv(create(&loss_path)?)?;
                    write_sidecar(
                        &loss_path,
                        &json!({
                            "columns": ["epoch", "train_loss", "test_loss"],
                            "system": sys_id, "scheme": scheme, "h": h, "seed": seed,
                            "L": depth, "M": width, "K": k, "epochs": epochs,
                            "best_epoch": out.report.best_epoch + 1,
                            "best_test_loss": out.report.best_test_loss(),
                            "init": cfg.init, "optimizer": tc.optimizer,
                        }),
                    )
                })())?;
                let mut model = LearnedHamiltonian::new(out.params, scheme, h);
                model.seed = seed;
                model.system = Some(cfg.system);
                stage(
                    format!("save model {cell}"),
                    model.save(out_dir.join("models").join(format!("{cell}.json"))),
                )?;

                let mut variants = vec![Correction::None];
                variants.extend(cfg.corrections.iter().filter(|c| c.check_scheme(scheme).is_ok()));
                for corr in variants {
                    let m = model.clone().with_correction(corr)?;
                    let name = if corr == Correction::None {
                        cell.clone()
                    } else {
                        format!("{cell}_{corr}")
                    };
                    let mut eval = stage(
                        format!("evaluate {name}"),
                        epsilon_h(&m, &system, cfg.eval_samples, seed),
                    )?;
                    eval.model = name.clone();
                    if cfg.rollout_trajectories > 0 && cfg.t_final() > 0.0 {
                        stage(format!("rollout {name}"), (|| {
                            let times = sample_times(cfg.t_final(), h);
                            let r = rollout_mse(&m, &system, &times, cfg.rollout_trajectories, seed)?;
                            let p = out_dir.join("rollouts").join(format!("{name}.csv"));
                            r.write_csv(create(&p)?)?;
                            write_sidecar(
                                &p,
                                &json!({
                                    "columns": ["t", "mse", "sem"],
                                    "model": name, "system": sys_id,
                                    "trajectories": cfg.rollout_trajectories,
                                    "dt": h, "t_final": cfg.t_final(),
                                    "energy_threshold": r.threshold,
                                    "rejected_initial_states": r.rejected,
                                    "seed": seed,
                                }),
                            )?;
                            let tp = out_dir.join("trajectories").join(format!("{name}.csv"));
                            r.write_trajectories_csv(create(&tp)?)?;
                            write_sidecar(
                                &tp,
                                &json!({
                                    "description": "model (p_*, q_*) and true (p_*_true, q_*_true) states",
                                    "model": name, "initial_states": r.initial_states,
                                }),
                            )
                        })())?;
                    }
                    if cfg.error_grid >= 2 && system.n() == 1 {
                        stage(format!("error grid {name}"), (|| {
                            let cells = error_grid(&m, &system, cfg.error_grid)?;
                            let p = out_dir.join("error_grids").join(format!("{name}.csv"));
                            let rows: Vec<Vec<String>> =
                                cells.iter().map(|c| c.iter().map(|v| f(*v)).collect()).collect();
                            write_rows(&p, &["p", "q", "error"], &rows)?;
                            write_sidecar(
                                &p,
                                &json!({
                                    "columns": ["p", "q", "error"],
                                    "description": "F - H - mean(F - H) on a grid over the data region",
                                    "model": name, "resolution": cfg.error_grid,
                                }),
                            )
                        })())?;
                    }
                    cells.push(CellResult {
                        scheme,
                        correction: corr,
                        h,
                        seed,
                        depth,
                        width,
                        k,
                        epochs,
                        best_epoch: out.report.best_epoch + 1,
                        best_train_loss: out.report.best_train_loss(),
                        best_test_loss: out.report.best_test_loss(),
                        eval,
                    });
                }
                losses.push((scheme, seed, h, out.report));
            }
        }
    }

    let mut orders = Vec::new();
    if cfg.h.len() >= 3 {
        for &seed in &cfg.seeds {
            for &scheme in &cfg.schemes {
                let reports: Vec<(f64, &TrainReport)> = losses
                    .iter()
                    .filter(|l| l.0 == scheme && l.1 == seed)
                    .map(|l| (l.2, &l.3))
                    .collect();
                let hs: Vec<f64> = reports.iter().map(|r| r.0).collect();
                let rs: Vec<TrainReport> = reports.iter().map(|r| r.1.clone()).collect();
                if let Ok(fit) = plateau_check(&hs, &rs) {
                    orders.push(OrderRow {
                        quantity: "best_test_loss".into(),
                        scheme,
                        correction: Correction::None,
                        seed,
                        slope: fit.slope,
                        intercept: fit.intercept,
                    });
                }
                let mut corrs = vec![Correction::None];
                corrs.extend(cfg.corrections.iter().filter(|c| c.check_scheme(scheme).is_ok()));
                for corr in corrs {
                    let pts: Vec<(f64, f64)> = cells
                        .iter()
                        .filter(|c| c.scheme == scheme && c.seed == seed && c.correction == corr)
                        .map(|c| (c.h, c.eval.epsilon_h.mean))
                        .collect();
                    let hs: Vec<f64> = pts.iter().map(|p| p.0).collect();
                    let es: Vec<f64> = pts.iter().map(|p| p.1).collect();
                    if let Ok(fit) = order_fit(&hs, &es) {
                        orders.push(OrderRow {
                            quantity: "epsilon_h".into(),
                            scheme,
                            correction: corr,
                            seed,
                            slope: fit.slope,
                            intercept: fit.intercept,
                        });
                    }
                }
            }
        }
    }

    let summary_cols = [
        "system", "scheme", "correction", "h", "seed", "L", "M", "K", "epochs", "best_epoch",
        "best_train_loss", "best_test_loss", "eps_mean", "eps_q25", "eps_median", "eps_q75",
        "eps_sem", "eps_n",
    ];
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let e = &c.eval.epsilon_h;
            vec![
                sys_id.to_string(),
                c.scheme.to_string(),
                c.correction.to_string(),
                fmt_h(c.h),
                c.seed.to_string(),
                c.depth.to_string(),
                c.width.to_string(),
                c.k.to_string(),
                c.epochs.to_string(),
                c.best_epoch.to_string(),
                f(c.best_train_loss),
                f(c.best_test_loss),
                f(e.mean),
                f(e.q25),
                f(e.median),
                f(e.q75),
                f(e.sem),
                e.n.to_string(),
            ]
        })
        .collect();
    let summary = out_dir.join("summary.csv");
    write_rows(&summary, &summary_cols, &rows)?;
    write_sidecar(
        &summary,
        &json!({
            "columns": summary_cols,
            "description": "eps_* summarize |F - H - mean(F - H)| over uniform samples of the measuring region",
            "experiment": cfg.name,
        }),
    )?;

    let order_cols = ["quantity", "scheme", "correction", "seed", "slope", "intercept"];
    let rows: Vec<Vec<String>> = orders
        .iter()
        .map(|o| {
            vec![
                o.quantity.clone(),
                o.scheme.to_string(),
                o.correction.to_string(),
                o.seed.to_string(),
                f(o.slope),
                f(o.intercept),
            ]
        })
        .collect();
    let order_path = out_dir.join("orders.csv");
    write_rows(&order_path, &order_cols, &rows)?;
    write_sidecar(
        &order_path,
        &json!({
            "columns": order_cols,
            "description": "least-squares fits of log(quantity) against log(h)",
            "h": cfg.h,
        }),
    )?;

    Ok(ReportBundle {
        config: cfg.clone(),
        cells,
        orders,
        out_dir: out_dir.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_sizes() {
        assert_eq!(paper_sizes(SystemKind::Spring, 0.8), (1, 200, 2000));
        assert_eq!(paper_sizes(SystemKind::Pendulum, 0.1), (2, 200, 4000));
        assert_eq!(paper_sizes(SystemKind::Spring, 0.05), (3, 200, 10_000));
        assert_eq!(paper_sizes(SystemKind::DoublePendulum, 0.4), (2, 400, 100_000));
        assert_eq!(paper_sizes(SystemKind::DoublePendulum, 0.1), (3, 600, 100_000));
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = ExperimentConfig::from_json(
            r#"{"name": "t", "system": "spring", "h": [0.1], "M": 16}"#,
        )
        .unwrap();
        assert_eq!(cfg.schemes, Scheme::ALL.to_vec());
        assert_eq!(cfg.sizes(0.1), (1, 16, 512, DESK_EPOCHS));
        let paper = ExperimentConfig::from_json(
            r#"{"name": "t", "system": "pendulum", "h": [0.1], "paper_scale": true}"#,
        )
        .unwrap();
        assert_eq!(paper.sizes(0.1), (2, 200, 4000, PAPER_EPOCHS));
        assert_eq!(paper.t_final(), 100.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        for text in [
            r#"{"name": "t", "system": "spring", "h": []}"#,
            r#"{"name": "t", "system": "spring", "h": [-0.1]}"#,
            r#"{"name": "a/b", "system": "spring", "h": [0.1]}"#,
            r#"{"name": "t", "system": "spring", "h": [0.1], "schemes": ["forward-euler"], "corrections": ["se_order2"]}"#,
            r#"{"name": "t", "system": "spring", "h": [0.1], "typo": 1}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }
}
