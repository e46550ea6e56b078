use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use knr::controller::DerivativeMethod;
use knr::harness::{self, ControllerKind, ExperimentConfig};
use knr::koopman::{read_model, write_model};
use knr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "knr",
    version,
    about = "Newton-Raphson and Koopman-Newton-Raphson tracking experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Vdp,
    Crane,
    Car,
}

impl SystemArg {
    fn name(self) -> &'static str {
        match self {
            SystemArg::Vdp => "vdp",
            SystemArg::Crane => "crane",
            SystemArg::Car => "car",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ControllerArg {
    Nr,
    Knr,
}

#[derive(Clone, Copy, ValueEnum)]
enum DerivArg {
    Fdm,
    Sensitivity,
}

#[derive(Subcommand)]
enum Command {
    /// Collect data and fit a lifted linear model.
    Identify {
        #[arg(long, value_enum)]
        system: SystemArg,
        #[arg(long)]
        trials: Option<usize>,
        /// Seconds per trial.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// TOML file overriding the system defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one closed-loop tracking experiment and write its trajectory.
    Track {
        #[arg(long, value_enum)]
        system: SystemArg,
        #[arg(long, value_enum)]
        controller: ControllerArg,
        /// Model file for `knr`; identified from `--seed` when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lookahead: Option<f64>,
        #[arg(long)]
        tf: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, value_enum)]
        deriv: Option<DerivArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run an NR-vs-KNR campaign and write the summary table.
    Compare {
        #[arg(long, value_enum)]
        system: SystemArg,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        /// Directory receiving one trajectory CSV per completed run.
        #[arg(long)]
        traj_dir: Option<PathBuf>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(system: SystemArg, path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return ExperimentConfig::for_system(system.name());
    };
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(path)?)?;
    if cfg.system != system.name() {
        return Err(Error::Config(format!(
            "config file is for '{}', not '{}'",
            cfg.system,
            system.name()
        )));
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Identify {
            system,
            trials,
            horizon,
            dt,
            seed,
            out,
            config,
        } => {
            let mut cfg = load_config(system, config.as_deref())?;
            if let Some(v) = trials {
                cfg.collection.trials = v;
            }
            if let Some(v) = horizon {
                cfg.collection.horizon = v;
            }
            if let Some(v) = dt {
                cfg.collection.dt = v;
                cfg.controller.dt = v;
            }
            cfg.validate()?;
            let (model, id_time) = harness::identify(&cfg, seed)?;
            let mut w = create(&out)?;
            write_model(&model, &mut w)?;
            w.flush()?;
            eprintln!(
                "identified {} model: N = {}, residual {:.3e}, rank {}, {:.3} s",
                cfg.system,
                model.lifted_dim(),
                model.diagnostics.residual,
                model.diagnostics.rank_gamma_c,
                id_time
            );
        }
        Command::Track {
            system,
            controller,
            model,
            alpha,
            lookahead,
            tf,
            dt,
            deriv,
            seed,
            out,
            config,
        } => {
            let mut cfg = load_config(system, config.as_deref())?;
            if let Some(v) = alpha {
                cfg.controller.alpha = v;
            }
            if let Some(v) = lookahead {
                cfg.controller.lookahead = v;
            }
            if let Some(v) = tf {
                cfg.t_final = v;
            }
            if let Some(v) = dt {
                cfg.controller.dt = v;
                cfg.collection.dt = v;
            }
            if let Some(d) = deriv {
                cfg.controller.derivative_method = match d {
                    DerivArg::Fdm => DerivativeMethod::Fdm,
                    DerivArg::Sensitivity => DerivativeMethod::Sensitivity,
                };
            }
            let report = match (controller, model) {
                (ControllerArg::Nr, Some(_)) => {
                    return Err(Error::Config(
                        "--model only applies to the knr controller".into(),
                    ))
                }
                (ControllerArg::Nr, None) => harness::run_nr(&cfg, seed)?,
                (ControllerArg::Knr, Some(path)) => {
                    let model = read_model(BufReader::new(File::open(path)?))?;
                    if model.basis.name != cfg.system {
                        return Err(Error::Config(format!(
                            "model basis '{}' does not belong to '{}'",
                            model.basis.name, cfg.system
                        )));
                    }
                    harness::run_knr_with_model(&cfg, &model, seed)?
                }
                (ControllerArg::Knr, None) => harness::run_knr(&cfg, seed)?,
            };
            let mut w = create(&out)?;
            harness::write_trajectory_csv(&report.records, &mut w)?;
            w.flush()?;
            eprintln!(
                "{} {}: mse {:.6e}, tracking {:.3} s",
                report.system, report.controller, report.mse, report.track_time
            );
        }
        Command::Compare {
            system,
            runs,
            seed,
            report,
            traj_dir,
            workers,
            config,
        } => {
            let cfg = load_config(system, config.as_deref())?;
            let workers = workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let summary = harness::run_campaign(&cfg, runs, seed, workers)?;
            for f in &summary.failures {
                eprintln!(
                    "{} run with seed {} failed: {}",
                    f.controller, f.seed, f.error
                );
            }
            if let Some(dir) = traj_dir {
                fs::create_dir_all(&dir)?;
                for rep in summary.nr.iter().chain(&summary.knr) {
                    let mut w = create(&dir.join(harness::trajectory_file_name(rep)))?;
                    harness::write_trajectory_csv(&rep.records, &mut w)?;
                    w.flush()?;
                }
            }
            let mut w = create(&report)?;
            harness::write_report_csv(&summary, &mut w)?;
            w.flush()?;
            for kind in [ControllerKind::Nr, ControllerKind::Knr] {
                let m = summary.means(kind);
                eprintln!(
                    "{:>3}: runs {}, mean mse {:.4e}, id {:.3} s, tracking {:.3} s",
                    kind, m.runs, m.mse, m.id_time, m.track_time
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
