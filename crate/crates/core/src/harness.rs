//! Experiment runner: identification, single tracking runs, NR-vs-KNR
//! campaigns and their CSV outputs.
//!
//! A campaign pairs `runs` deterministic NR runs with `runs` KNR runs, each
//! of which identifies a fresh model from seed `base_seed + i` before
//! tracking. Results are ordered by seed, so the worker count never changes
//! the output.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{
    run_closed_loop, sample_count, ClosedLoopRun, ControllerConfig, DerivativeMethod,
    PredictorKind, TraceRecord,
};
use crate::error::{Error, Result};
use crate::koopman::{
    collect_snapshots, edmd_fit, CollectionConfig, FitOptions, LiftedLinearModel,
};
use crate::systems::{basis_by_name, reference_by_name, system_by_name, ReferenceSignal};

/// Largest failed fraction a campaign tolerates per controller.
pub const MAX_FAILED_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Nr,
    Knr,
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerKind::Nr => "nr",
            ControllerKind::Knr => "knr",
        })
    }
}

/// Everything needed to reproduce one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: String,
    pub t_final: f64,
    pub x0: Vec<f64>,
    pub u0: Vec<f64>,
    /// Controller settings shared by both controllers. `predictor` is
    /// ignored; NR always uses the plant and KNR uses `knr_predictor`.
    pub controller: ControllerConfig,
    pub knr_predictor: PredictorKind,
    pub collection: CollectionConfig,
    pub fit: FitOptions,
}

impl ExperimentConfig {
    /// Benchmark defaults for `vdp`, `crane` or `car`.
    pub fn for_system(name: &str) -> Result<Self> {
        let (lookahead, t_final, x0, deriv) = match name {
            "vdp" => (0.15, 20.0, vec![0.0, 0.0], DerivativeMethod::Fdm),
            "crane" => (0.15, 20.0, vec![0.0; 4], DerivativeMethod::Fdm),
            "car" => (
                0.5,
                130.6637,
                vec![0.0, 3.0, 0.0],
                DerivativeMethod::Sensitivity,
            ),
            other => return Err(Error::Config(format!("unknown system '{other}'"))),
        };
        let system = system_by_name(name)?;
        Ok(ExperimentConfig {
            system: name.to_string(),
            t_final,
            x0,
            u0: vec![0.0; system.m],
            controller: ControllerConfig {
                lookahead,
                derivative_method: deriv,
                ..ControllerConfig::default()
            },
            knr_predictor: PredictorKind::KoopmanDiscrete,
            collection: CollectionConfig::for_system(name)?,
            fit: FitOptions::default(),
        })
    }

    /// Parses a TOML document naming `system`; every other key overrides
    /// the defaults of that system.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        let name = overrides
            .get("system")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Config("config file must set `system`".into()))?;
        let defaults = ExperimentConfig::for_system(name)?;
        let mut merged = toml::Table::try_from(&defaults)
            .map_err(|e| Error::Config(format!("config defaults: {e}")))?;
        merge(&mut merged, overrides);
        let cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let system = system_by_name(&self.system)?;
        if self.x0.len() != system.n || self.u0.len() != system.m {
            return Err(Error::Config(format!(
                "x0/u0 need {}/{} entries for '{}'",
                system.n, system.m, self.system
            )));
        }
        if !self.knr_predictor.is_koopman() {
            return Err(Error::Config(
                "knr_predictor must be a Koopman predictor".into(),
            ));
        }
        if (self.collection.dt - self.controller.dt).abs() > 1e-12 {
            return Err(Error::Config(
                "collection and controller steps must be equal".into(),
            ));
        }
        sample_count(self.t_final, self.controller.dt)?;
        self.controller.validate()
    }

    fn nr_controller(&self) -> ControllerConfig {
        ControllerConfig {
            predictor: PredictorKind::Nonlinear,
            ..self.controller
        }
    }

    fn knr_controller(&self) -> ControllerConfig {
        ControllerConfig {
            predictor: self.knr_predictor,
            ..self.controller
        }
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(inner)), toml::Value::Table(over)) => merge(inner, over),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// One tracking run and its provenance.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub system: String,
    pub controller: ControllerKind,
    pub mse: f64,
    /// Seconds spent collecting data and fitting; 0 for NR.
    pub id_time: f64,
    pub track_time: f64,
    pub records: Vec<TraceRecord>,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// `(1/N_d) sum_i |y(t_i) - r(t_i)|^2` over the recorded samples.
pub fn mse(records: &[TraceRecord], reference: &ReferenceSignal) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("mse needs at least one sample"));
    }
    let mut total = 0.0;
    for rec in records {
        let r = reference.eval(rec.t);
        if r.len() != rec.y.len() {
            return Err(Error::contract("reference and output dimensions differ"));
        }
        total += rec
            .y
            .iter()
            .zip(&r)
            .map(|(y, r)| (y - r).powi(2))
            .sum::<f64>();
    }
    Ok(total / records.len() as f64)
}

/// Collects data with `seed` and fits the lifted model. Returns the model
/// and the wall time spent.
pub fn identify(cfg: &ExperimentConfig, seed: u64) -> Result<(LiftedLinearModel, f64)> {
    let system = system_by_name(&cfg.system)?;
    let basis = basis_by_name(&cfg.system, system.n, system.m)?;
    let collection = CollectionConfig {
        seed,
        ..cfg.collection.clone()
    };
    let started = Instant::now();
    let data = collect_snapshots(&system, &collection)?;
    let model = edmd_fit(&data, &basis, &cfg.fit)?;
    Ok((model, started.elapsed().as_secs_f64()))
}

fn track(
    cfg: &ExperimentConfig,
    controller: ControllerKind,
    model: Option<&LiftedLinearModel>,
) -> Result<ClosedLoopRun> {
    let system = system_by_name(&cfg.system)?;
    let reference = reference_by_name(&cfg.system)?;
    let ctrl = match controller {
        ControllerKind::Nr => cfg.nr_controller(),
        ControllerKind::Knr => cfg.knr_controller(),
    };
    run_closed_loop(
        &system,
        &reference,
        &ctrl,
        model,
        &cfg.x0,
        &cfg.u0,
        cfg.t_final,
    )
    .map_err(|f| f.error)
}

fn report(
    cfg: &ExperimentConfig,
    controller: ControllerKind,
    run: ClosedLoopRun,
    id_time: f64,
    seed: u64,
) -> Result<ExperimentReport> {
    let reference = reference_by_name(&cfg.system)?;
    Ok(ExperimentReport {
        system: cfg.system.clone(),
        controller,
        mse: mse(&run.records, &reference)?,
        id_time,
        track_time: run.track_time,
        records: run.records,
        seed,
        config: cfg.clone(),
    })
}

/// Tracks with the plant model itself.
pub fn run_nr(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    cfg.validate()?;
    let run = track(cfg, ControllerKind::Nr, None)?;
    report(cfg, ControllerKind::Nr, run, 0.0, seed)
}

/// Tracks with an already identified model.
pub fn run_knr_with_model(
    cfg: &ExperimentConfig,
    model: &LiftedLinearModel,
    seed: u64,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let run = track(cfg, ControllerKind::Knr, Some(model))?;
    report(cfg, ControllerKind::Knr, run, 0.0, seed)
}

/// Identifies a model from `seed`, then tracks with it.
pub fn run_knr(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (model, id_time) = identify(cfg, seed)?;
    let run = track(cfg, ControllerKind::Knr, Some(&model))?;
    report(cfg, ControllerKind::Knr, run, id_time, seed)
}

/// A run that did not complete.
#[derive(Debug)]
pub struct RunError {
    pub controller: ControllerKind,
    pub seed: u64,
    pub error: Error,
}

#[derive(Debug)]
pub struct CampaignSummary {
    pub system: String,
    pub runs: usize,
    pub base_seed: u64,
    /// Completed runs, ordered by seed.
    pub nr: Vec<ExperimentReport>,
    pub knr: Vec<ExperimentReport>,
    pub failures: Vec<RunError>,
}

/// Arithmetic means over the completed runs of one controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampaignMeans {
    pub runs: usize,
    pub mse: f64,
    pub id_time: f64,
    pub track_time: f64,
}

impl CampaignSummary {
    pub fn reports(&self, controller: ControllerKind) -> &[ExperimentReport] {
        match controller {
            ControllerKind::Nr => &self.nr,
            ControllerKind::Knr => &self.knr,
        }
    }

    pub fn means(&self, controller: ControllerKind) -> CampaignMeans {
        let reports = self.reports(controller);
        let n = reports.len() as f64;
        let mean = |f: fn(&ExperimentReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        CampaignMeans {
            runs: reports.len(),
            mse: mean(|r| r.mse),
            id_time: mean(|r| r.id_time),
            track_time: mean(|r| r.track_time),
        }
    }
}

/// Runs `runs` NR and `runs` KNR experiments on up to `workers` threads.
///
/// Failed runs are kept in `failures` and left out of the means. The
/// campaign fails when more than [`MAX_FAILED_FRACTION`] of either
/// controller's runs fail.
pub fn run_campaign(
    cfg: &ExperimentConfig,
    runs: usize,
    base_seed: u64,
    workers: usize,
) -> Result<CampaignSummary> {
    if runs == 0 {
        return Err(Error::Config("a campaign needs at least one run".into()));
    }
    if workers == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    cfg.validate()?;
    let jobs: Vec<(ControllerKind, u64)> = (0..runs as u64)
        .flat_map(|i| {
            [
                (ControllerKind::Nr, base_seed + i),
                (ControllerKind::Knr, base_seed + i),
            ]
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<ExperimentReport>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(kind, seed)| match kind {
                ControllerKind::Nr => run_nr(cfg, seed),
                ControllerKind::Knr => run_knr(cfg, seed),
            })
            .collect()
    });

    let mut summary = CampaignSummary {
        system: cfg.system.clone(),
        runs,
        base_seed,
        nr: Vec::new(),
        knr: Vec::new(),
        failures: Vec::new(),
    };
    for (&(controller, seed), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(rep) if controller == ControllerKind::Nr => summary.nr.push(rep),
            Ok(rep) => summary.knr.push(rep),
            Err(error) => summary.failures.push(RunError {
                controller,
                seed,
                error,
            }),
        }
    }
    for kind in [ControllerKind::Nr, ControllerKind::Knr] {
        let failed = summary
            .failures
            .iter()
            .filter(|f| f.controller == kind)
            .count();
        if failed as f64 > MAX_FAILED_FRACTION * runs as f64 {
            return Err(Error::CampaignFailed { failed, runs });
        }
    }
    Ok(summary)
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}{i}"))
}

/// Writes `t, x1..xn, y1..yk, r1..rk, u1..um`, one row per record.
pub fn write_trajectory_csv<W: Write>(records: &[TraceRecord], mut w: W) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::contract("trajectory has no records"))?;
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(numbered("x", first.x.len()))
        .chain(numbered("y", first.y.len()))
        .chain(numbered("r", first.r.len()))
        .chain(numbered("u", first.u.len()))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for rec in records {
        let row: Vec<String> = std::iter::once(&rec.t)
            .chain(&rec.x)
            .chain(&rec.y)
            .chain(&rec.r)
            .chain(&rec.u)
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes one row per controller with the campaign means.
pub fn write_report_csv<W: Write>(summary: &CampaignSummary, mut w: W) -> Result<()> {
    writeln!(
        w,
        "system,controller,runs,mean_mse,mean_id_time_s,mean_track_time_s,seed"
    )?;
    for kind in [ControllerKind::Nr, ControllerKind::Knr] {
        let m = summary.means(kind);
        writeln!(
            w,
            "{},{},{},{:.16e},{:.16e},{:.16e},{}",
            summary.system, kind, m.runs, m.mse, m.id_time, m.track_time, summary.base_seed
        )?;
    }
    Ok(())
}

/// File name used for a run's trajectory inside a campaign directory.
pub fn trajectory_file_name(report: &ExperimentReport) -> String {
    format!(
        "{}_{}_seed{}.csv",
        report.system, report.controller, report.seed
    )
}
