use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use shnn::correction::Correction;
use shnn::dataset::Dataset;
use shnn::evaluation::{epsilon_h, rollout_mse, sample_times};
use shnn::experiment::{
    desk_sizes, paper_sizes, run_experiment, write_sidecar, ExperimentConfig, DESK_EPOCHS,
    PAPER_EPOCHS,
};
use shnn::mlp::Init;
use shnn::model::LearnedHamiltonian;
use shnn::systems::{HamiltonianSystem, SystemKind};
use shnn::training::{train_with_progress, Scheme, TrainConfig};

#[derive(Parser)]
#[command(name = "shnn", version, about = "Learn Hamiltonians from snapshot pairs")]
struct Cli {
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Use the paper's network and dataset sizes instead of the desk defaults.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of snapshot pairs.
    Generate {
        #[arg(long)]
        system: SystemKind,
        #[arg(long)]
        h: f64,
        /// Number of pairs; defaults to the desk or paper size.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scheme: Scheme,
        #[arg(long)]
        epochs: Option<usize>,
        /// Expected step; training refuses a dataset with a different one.
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, value_enum, default_value = "glorot")]
        init: InitArg,
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV; defaults to the model path with `_loss.csv`.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Set the series correction of a model file in place.
    Correct {
        #[arg(long)]
        model: PathBuf,
        /// 2 or 3 for symplectic Euler, 4 for implicit midpoint, 0 to clear.
        #[arg(long)]
        order: u32,
    },
    /// Compute the Hamiltonian error ε_H of a model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Reference system; defaults to the one recorded in the model.
        #[arg(long)]
        system: Option<SystemKind>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Optional one-row CSV of the summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out a model against the true flow.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        system: Option<SystemKind>,
        /// Defaults to 20, or 100 with --paper-scale.
        #[arg(long)]
        t_final: Option<f64>,
        #[arg(long, default_value_t = 50)]
        n_traj: usize,
        /// Output spacing; defaults to the model's h.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment configuration and write its report bundle.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum InitArg {
    Glorot,
    FanIn,
}

impl From<InitArg> for Init {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Glorot => Init::Glorot,
            InitArg::FanIn => Init::FanIn,
        }
    }
}

fn resolve(out_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn model_system(m: &LearnedHamiltonian, flag: Option<SystemKind>) -> Result<HamiltonianSystem> {
    match (flag, m.system) {
        (Some(a), Some(b)) if a != b => {
            bail!("model was trained on {b}, --system says {a}")
        }
        (Some(k), _) | (None, Some(k)) => Ok(HamiltonianSystem::from_kind(k)),
        (None, None) => bail!("model does not record its system; pass --system"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let out_dir = &cli.out_dir;
    match cli.command {
        Command::Generate { system, h, k, out } => {
            let k = k.unwrap_or(if cli.paper_scale {
                paper_sizes(system, h).2
            } else {
                desk_sizes(system).2
            });
            let sys = HamiltonianSystem::from_kind(system);
            let ds = Dataset::generate(&sys, h, k, cli.seed)?;
            let path = resolve(out_dir, &out);
            ds.save(&path)?;
            println!("wrote {} pairs to {}", ds.k(), path.display());
        }
        Command::Train {
            data,
            scheme,
            epochs,
            h,
            layers,
            width,
            init,
            out,
            losses,
        } => {
            let ds = Dataset::load(&data)?;
            if let Some(h) = h {
                ds.check_h(h)?;
            }
            let (l, m, _) = if cli.paper_scale {
                paper_sizes(ds.system, ds.h)
            } else {
                desk_sizes(ds.system)
            };
            let cfg = TrainConfig {
                epochs: epochs.unwrap_or(if cli.paper_scale { PAPER_EPOCHS } else { DESK_EPOCHS }),
                seed: cli.seed,
                init: init.into(),
                ..TrainConfig::new(scheme, layers.unwrap_or(l), width.unwrap_or(m))
            };
            let every = (cfg.epochs / 20).max(1);
            let outcome = train_with_progress(&ds, &cfg, |e, tr, te| {
                if e % every == 0 {
                    log::info!("epoch {e:>6}  train {tr:.4e}  test {te:.4e}");
                }
            })?;
            let mut model = LearnedHamiltonian::new(outcome.params, scheme, ds.h);
            model.seed = cli.seed;
            model.system = Some(ds.system);
            let path = resolve(out_dir, &out);
            model.save(&path)?;
            let loss_path = match losses {
                Some(p) => resolve(out_dir, &p),
                None => {
                    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
                    path.with_file_name(format!("{stem}_loss.csv"))
                }
            };
            outcome.report.write_csv(create(&loss_path)?)?;
            write_sidecar(
                &loss_path,
                &json!({
                    "columns": ["epoch", "train_loss", "test_loss"],
                    "data": data, "model": path, "system": ds.system, "h": ds.h,
                    "K": ds.k(), "config": cfg,
                    "best_epoch": outcome.report.best_epoch + 1,
                    "best_train_loss": outcome.report.best_train_loss(),
                    "best_test_loss": outcome.report.best_test_loss(),
                }),
            )?;
            println!(
                "best epoch {} of {}: train {:.4e}, test {:.4e}; model {}",
                outcome.report.best_epoch + 1,
                cfg.epochs,
                outcome.report.best_train_loss(),
                outcome.report.best_test_loss(),
                path.display()
            );
        }
        Command::Correct { model, order } => {
            let m = LearnedHamiltonian::load(&model)?;
            let c = if order == 0 {
                Correction::None
            } else {
                Correction::for_order(order, m.scheme)?
            };
            let m = m.with_correction(c)?;
            m.save(&model)?;
            println!("{}: correction {c}", model.display());
        }
        Command::Evaluate {
            model,
            system,
            n,
            out,
        } => {
            let m = LearnedHamiltonian::load(&model)?;
            let sys = model_system(&m, system)?;
            let mut rep = epsilon_h(&m, &sys, n, cli.seed)?;
            rep.model = model.display().to_string();
            let s = rep.epsilon_h;
            if let Some(out) = out {
                let path = resolve(out_dir, &out);
                let mut w = csv::Writer::from_writer(create(&path)?);
                w.write_record(["model", "correction", "h", "mean", "q25", "median", "q75", "sem", "n", "offset"])?;
                w.write_record([
                    rep.model.clone(),
                    m.correction.to_string(),
                    m.h.to_string(),
                    format!("{:?}", s.mean),
                    format!("{:?}", s.q25),
                    format!("{:?}", s.median),
                    format!("{:?}", s.q75),
                    format!("{:?}", s.sem),
                    s.n.to_string(),
                    format!("{:?}", rep.offset),
                ])?;
                w.flush()?;
                write_sidecar(&path, &json!({"description": "ε_H summary", "report": rep}))?;
            }
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
        Command::Rollout {
            model,
            system,
            t_final,
            n_traj,
            dt,
            out,
        } => {
            let m = LearnedHamiltonian::load(&model)?;
            let sys = model_system(&m, system)?;
            let t_final = t_final.unwrap_or(if cli.paper_scale { 100.0 } else { 20.0 });
            let dt = dt.unwrap_or(m.h);
            if !(dt > 0.0) {
                bail!("--dt must be positive");
            }
            let rep = rollout_mse(&m, &sys, &sample_times(t_final, dt), n_traj, cli.seed)?;
            let path = resolve(out_dir, &out);
            rep.write_csv(create(&path)?)?;
            write_sidecar(
                &path,
                &json!({
                    "columns": ["t", "mse", "sem"],
                    "model": model, "system": sys.name(), "correction": m.correction,
                    "trajectories": n_traj, "t_final": t_final, "dt": dt, "seed": cli.seed,
                    "energy_threshold": rep.threshold, "rejected_initial_states": rep.rejected,
                    "initial_states": rep.initial_states,
                }),
            )?;
            println!(
                "final mse {:.4e} at t = {t_final}; {}",
                rep.mse.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Report { config } => {
            let mut cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            cfg.paper_scale |= cli.paper_scale;
            let dir = out_dir.join(&cfg.name);
            let bundle = run_experiment(&cfg, &dir)?;
            for o in &bundle.orders {
                println!(
                    "{:<15} {:<18} {:<10} seed {}  slope {:.3}",
                    o.quantity, o.scheme.to_string(), o.correction.to_string(), o.seed, o.slope
                );
            }
            println!("{} models; bundle in {}", bundle.cells.len(), dir.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
