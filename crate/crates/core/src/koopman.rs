//! Snapshot collection and EDMD identification of lifted linear models.
//!
//! A plant is excited with random piecewise-constant inputs from random
//! initial states; every integration step yields a snapshot pair
//! `(x_k, u_k) -> (x_{k+1}, u_k)`. Both sides are lifted with the extended
//! observable vector `psi = [lift(x, u); u]` and the transfer matrix is the
//! least-squares fit `U = pinv(G_c) G_n` with
//!
//! ```text
//! G_c = 1/K sum psi(a_k) psi(a_k)^T,   G_n = 1/K sum psi(a_k) psi(b_k)^T.
//! ```
//!
//! The top block row of `U^T` is `[A B]`, the one-step lifted model
//! `z+ = A z + B u`.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::ode;
use crate::systems::{basis_by_name, BasisDictionary, SystemModel};

/// One `(alpha, beta)` record; the input is shared by both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPair {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub x_next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub pairs: Vec<SnapshotPair>,
    pub dt: f64,
    pub n: usize,
    pub m: usize,
}

impl SnapshotDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// How the identification data is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionConfig {
    pub trials: usize,
    /// Duration of each trial in seconds.
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    /// Per-coordinate sampling interval for the initial state.
    pub x_box: Vec<(f64, f64)>,
    /// Per-coordinate sampling interval for the input.
    pub u_box: Vec<(f64, f64)>,
    /// Steps an input value is held before it is redrawn.
    pub dwell_steps: usize,
}

impl CollectionConfig {
    /// Defaults for the named benchmark plant.
    pub fn for_system(name: &str) -> Result<Self> {
        use std::f64::consts::PI;
        let (x_box, u_box) = match name {
            "vdp" => (vec![(-1.0, 1.0); 2], vec![(-2.0, 2.0)]),
            "crane" => (
                vec![(-1.0, 1.0), (-1.0, 1.0), (-0.5, 0.5), (-1.0, 1.0)],
                vec![(-5.0, 5.0)],
            ),
            // Forward driving only: a symmetric wheel-speed box averages the
            // heading/speed coupling out of the regression.
            "car" => (
                vec![(-5.0, 5.0), (-5.0, 5.0), (-PI, PI)],
                vec![(0.0, 6.0); 2],
            ),
            other => {
                return Err(Error::Config(format!(
                    "no collection defaults for '{other}'"
                )))
            }
        };
        Ok(CollectionConfig {
            trials: 10,
            horizon: 2.0,
            dt: 0.01,
            seed: 0,
            x_box,
            u_box,
            dwell_steps: 10,
        })
    }

    fn steps_per_trial(&self) -> Result<usize> {
        let steps = ode::step_count(self.horizon, self.dt)?;
        let exact = self.horizon / self.dt;
        if (exact - steps as f64).abs() > 1e-9 * exact.max(1.0) {
            return Err(Error::Config(format!(
                "collection horizon {} is not a whole number of {} s steps",
                self.horizon, self.dt
            )));
        }
        Ok(steps)
    }

    fn validate(&self, system: &SystemModel) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("at least one trial is required".into()));
        }
        if self.dwell_steps == 0 {
            return Err(Error::Config("dwell must be at least one step".into()));
        }
        if self.x_box.len() != system.n || self.u_box.len() != system.m {
            return Err(Error::Config(format!(
                "sampling boxes have {}/{} coordinates, system '{}' needs {}/{}",
                self.x_box.len(),
                self.u_box.len(),
                system.name,
                system.n,
                system.m
            )));
        }
        let bad = |b: &&(f64, f64)| !(b.0 <= b.1) || !b.0.is_finite() || !b.1.is_finite();
        if self.x_box.iter().chain(&self.u_box).any(|b| bad(&b)) {
            return Err(Error::Config(
                "sampling intervals must be finite with lo <= hi".into(),
            ));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, bounds: &[(f64, f64)]) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        })
        .collect()
}

fn run_trial(
    system: &SystemModel,
    cfg: &CollectionConfig,
    trial: usize,
    steps: usize,
) -> Result<Vec<SnapshotPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial as u64));
    let mut x = draw(&mut rng, &cfg.x_box);
    let mut u = Vec::new();
    let mut pairs = Vec::with_capacity(steps);
    for k in 0..steps {
        if k % cfg.dwell_steps == 0 {
            u = draw(&mut rng, &cfg.u_box);
        }
        let t = k as f64 * cfg.dt;
        let x_next = ode::rk4_step(&system.flow(&u), t, &x, cfg.dt).map_err(|e| match e {
            Error::Integration { t, x, .. } => Error::Integration { step: k, t, x },
            other => other,
        })?;
        pairs.push(SnapshotPair {
            x: std::mem::replace(&mut x, x_next.clone()),
            u: u.clone(),
            x_next,
        });
    }
    Ok(pairs)
}

/// Simulates `cfg.trials` randomized runs and returns all snapshot pairs in
/// trial order. Trial `i` draws from its own stream seeded `seed + i`, so the
/// result does not depend on scheduling.
pub fn collect_snapshots(system: &SystemModel, cfg: &CollectionConfig) -> Result<SnapshotDataset> {
    cfg.validate(system)?;
    let steps = cfg.steps_per_trial()?;
    let per_trial: Vec<Result<Vec<SnapshotPair>>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            run_trial(system, cfg, trial, steps).map_err(|e| Error::Collection {
                trial,
                source: Box::new(e),
            })
        })
        .collect();
    let mut pairs = Vec::with_capacity(cfg.trials * steps);
    for trial in per_trial {
        pairs.extend(trial?);
    }
    Ok(SnapshotDataset {
        pairs,
        dt: cfg.dt,
        n: system.n,
        m: system.m,
    })
}

/// What the fit regresses onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// One-step successor observables (the transfer operator at `dt`).
    #[default]
    Transfer,
    /// Time derivatives of the observables (the generator), estimated by
    /// forward differences and then discretized exactly at `dt`.
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Pseudo-inverse cutoff; 0 selects the default rule.
    pub tol: f64,
    /// Scale each observable by its RMS over the data before forming the
    /// Gram matrices.
    pub normalize: bool,
    pub mode: FitMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 0.0,
            normalize: true,
            mode: FitMode::Transfer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    /// `(N+m) x (N+m)` Gram matrix of the inputs, unscaled. Absent for models
    /// loaded from disk.
    pub gamma_c: Option<Matrix>,
    pub gamma_n: Option<Matrix>,
    /// Mean squared one-step error of the fitted transfer matrix over the
    /// training pairs.
    pub residual: f64,
    pub rank_gamma_c: usize,
    /// Set when `G_c` was rank deficient and the pseudo-inverse picked the
    /// minimum-norm fit.
    pub rank_deficient: bool,
    /// Per-observable scale factors applied before fitting.
    pub scales: Option<Vec<f64>>,
    /// Relative Frobenius error of `expm(A_c dt)` against the discrete `A`,
    /// filled in by [`to_continuous`].
    pub roundtrip_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeDomain {
    /// `z+ = A z + B u` at the sampling interval.
    Discrete,
    /// `z' = A z + B u`.
    Continuous,
}

/// Lifted linear surrogate `z+ = A z + B u`, `x = C z`.
#[derive(Debug, Clone)]
pub struct LiftedLinearModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub dt: f64,
    pub domain: TimeDomain,
    pub basis: BasisDictionary,
    pub diagnostics: FitDiagnostics,
}

impl LiftedLinearModel {
    /// Lifted dimension `N`.
    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.c.nrows()
    }

    /// `psi = [lift(x, u); u]`.
    pub fn extended_lift(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        extended_lift(&self.basis, x, u)
    }

    /// One-step prediction `A z + B u` of the lifted state.
    pub fn step(&self, z: &[f64], u: &[f64]) -> Vec<f64> {
        let z = nalgebra::DVector::from_column_slice(z);
        let u = nalgebra::DVector::from_column_slice(u);
        (&self.a * z + &self.b * u).iter().copied().collect()
    }
}

/// `[I_n 0]`, the projection from lifted to original coordinates.
pub fn projection(n: usize, lifted: usize) -> Matrix {
    let mut c = Matrix::zeros(n, lifted);
    for i in 0..n {
        c[(i, i)] = 1.0;
    }
    c
}

fn extended_lift(basis: &BasisDictionary, x: &[f64], u: &[f64]) -> Vec<f64> {
    let mut psi = basis.lift(x, u);
    psi.extend_from_slice(u);
    psi
}

/// Fits the lifted model to snapshot data.
pub fn edmd_fit(
    data: &SnapshotDataset,
    basis: &BasisDictionary,
    opts: &FitOptions,
) -> Result<LiftedLinearModel> {
    if basis.n != data.n || basis.m != data.m {
        return Err(Error::contract(format!(
            "basis '{}' expects n = {}, m = {}; data has n = {}, m = {}",
            basis.name, basis.n, basis.m, data.n, data.m
        )));
    }
    let big_n = basis.dim();
    let m = data.m;
    let p = big_n + m;
    let k = data.len();
    if k < p {
        return Err(Error::Underdetermined {
            pairs: k,
            unknowns: p,
        });
    }

    // Row j of each matrix is one snapshot.
    let mut psi_a = Matrix::zeros(k, p);
    let mut psi_b = Matrix::zeros(k, p);
    for (j, pair) in data.pairs.iter().enumerate() {
        let a = extended_lift(basis, &pair.x, &pair.u);
        let b = extended_lift(basis, &pair.x_next, &pair.u);
        for i in 0..p {
            psi_a[(j, i)] = a[i];
            psi_b[(j, i)] = b[i];
        }
    }
    if !linalg::all_finite(&psi_a) || !linalg::all_finite(&psi_b) {
        return Err(Error::numerical(
            "edmd_fit",
            "non-finite observables in data",
        ));
    }
    let target = match opts.mode {
        FitMode::Transfer => psi_b.clone(),
        FitMode::Generator => (&psi_b - &psi_a) / data.dt,
    };

    let inv_k = 1.0 / k as f64;
    let gamma_c = psi_a.transpose() * &psi_a * inv_k;
    let gamma_n = psi_a.transpose() * &target * inv_k;

    let scales: Vec<f64> = if opts.normalize {
        (0..p)
            .map(|i| {
                let rms = gamma_c[(i, i)].sqrt();
                if rms > 0.0 && rms.is_finite() {
                    rms
                } else {
                    1.0
                }
            })
            .collect()
    } else {
        vec![1.0; p]
    };
    // Scaled Gram matrices: S^-1 G S^-1 (target columns scaled the same way).
    let mut gc_scaled = gamma_c.clone();
    let mut gn_scaled = gamma_n.clone();
    for i in 0..p {
        for j in 0..p {
            gc_scaled[(i, j)] /= scales[i] * scales[j];
            gn_scaled[(i, j)] /= scales[i] * scales[j];
        }
    }
    let rank_gamma_c = linalg::rank(&gc_scaled, opts.tol)?;
    let u_scaled = linalg::pinv(&gc_scaled, opts.tol)? * gn_scaled;
    // Undo: U = S^-1 U~ S.
    let mut transfer = u_scaled;
    for i in 0..p {
        for j in 0..p {
            transfer[(i, j)] *= scales[j] / scales[i];
        }
    }
    let ut = transfer.transpose();
    let block_a = ut.view((0, 0), (big_n, big_n)).into_owned();
    let block_b = ut.view((0, big_n), (big_n, m)).into_owned();

    let (a, b) = match opts.mode {
        FitMode::Transfer => (block_a, block_b),
        FitMode::Generator => {
            let a = linalg::expm(&(&block_a * data.dt))?;
            let b = linalg::input_integral(&block_a, data.dt)? * block_b;
            (a, b)
        }
    };

    // Objective evaluated for the discrete model actually returned, with
    // the input rows predicted as held.
    let mut residual = 0.0;
    for (j, pair) in data.pairs.iter().enumerate() {
        let z = psi_a.row(j).columns(0, big_n).transpose();
        let u = nalgebra::DVector::from_column_slice(&pair.u);
        let pred = &a * z + &b * u;
        for i in 0..big_n {
            residual += (pred[i] - psi_b[(j, i)]).powi(2);
        }
        if opts.mode == FitMode::Transfer {
            let pred_u = psi_a.row(j) * ut.view((big_n, 0), (m, p)).transpose();
            for i in 0..m {
                residual += (pred_u[i] - psi_b[(j, big_n + i)]).powi(2);
            }
        }
    }
    residual *= inv_k;

    if !linalg::all_finite(&a) || !linalg::all_finite(&b) {
        return Err(Error::numerical(
            "edmd_fit",
            "fitted matrices are not finite",
        ));
    }

    Ok(LiftedLinearModel {
        a,
        b,
        c: projection(data.n, big_n),
        dt: data.dt,
        domain: TimeDomain::Discrete,
        basis: basis.clone(),
        diagnostics: FitDiagnostics {
            gamma_c: Some(gamma_c),
            gamma_n: Some(gamma_n),
            residual,
            rank_gamma_c,
            rank_deficient: rank_gamma_c < p,
            scales: opts.normalize.then_some(scales),
            roundtrip_error: None,
        },
    })
}

/// Converts a discrete model to continuous time: `A_c = log(A) / dt` (real
/// principal branch) and `B_c = Phi(A_c, dt)^-1 B`.
pub fn to_continuous(model: &LiftedLinearModel) -> Result<LiftedLinearModel> {
    if model.domain != TimeDomain::Discrete {
        return Err(Error::contract("model is already continuous"));
    }
    for ev in model.a.complex_eigenvalues().iter() {
        let scale = ev.norm().max(1.0);
        if ev.im.abs() <= 1e-12 * scale && ev.re <= 1e-12 * scale {
            return Err(Error::Conversion(format!(
                "eigenvalue {:.6e} lies on the closed negative real axis",
                ev.re
            )));
        }
    }
    let a_c = linalg::logm(&model.a)? / model.dt;
    if !linalg::all_finite(&a_c) {
        return Err(Error::Conversion("logarithm is not finite".into()));
    }
    let phi = linalg::input_integral(&a_c, model.dt)?;
    let b_c = linalg::solve(&phi, &model.b)?.x;
    let back = linalg::expm(&(&a_c * model.dt))?;
    let roundtrip = (&back - &model.a).norm() / model.a.norm().max(f64::MIN_POSITIVE);

    let mut diagnostics = model.diagnostics.clone();
    diagnostics.roundtrip_error = Some(roundtrip);
    Ok(LiftedLinearModel {
        a: a_c,
        b: b_c,
        c: model.c.clone(),
        dt: model.dt,
        domain: TimeDomain::Continuous,
        basis: model.basis.clone(),
        diagnostics,
    })
}

const MODEL_MAGIC: &str = "KNR-MODEL v1";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the text model format. Only discrete models are persisted.
pub fn write_model<W: Write>(model: &LiftedLinearModel, mut w: W) -> Result<()> {
    if model.domain != TimeDomain::Discrete {
        return Err(Error::contract("only discrete models can be written"));
    }
    let big_n = model.lifted_dim();
    writeln!(w, "{MODEL_MAGIC}")?;
    writeln!(
        w,
        "{} {} {} {}",
        big_n,
        model.input_dim(),
        model.state_dim(),
        fmt_f64(model.dt)
    )?;
    writeln!(w, "{}", model.basis.name)?;
    for mat in [&model.a, &model.b] {
        for row in mat.row_iter() {
            let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
    }
    writeln!(w, "residual {}", fmt_f64(model.diagnostics.residual))?;
    writeln!(w, "rank {}", model.diagnostics.rank_gamma_c)?;
    Ok(())
}

/// Reads a model written by [`write_model`]; the basis is resolved by name.
pub fn read_model<R: BufRead>(r: R) -> Result<LiftedLinearModel> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let bad = |line: usize, msg: &str| Error::ModelFormat {
        line,
        msg: msg.to_string(),
    };
    let get = |i: usize| -> Result<&str> {
        lines
            .get(i)
            .map(|s| s.as_str())
            .ok_or_else(|| bad(i + 1, "unexpected end of file"))
    };
    if get(0)? != MODEL_MAGIC {
        return Err(bad(1, "missing 'KNR-MODEL v1' header"));
    }
    let dims: Vec<&str> = get(1)?.split_whitespace().collect();
    if dims.len() != 4 {
        return Err(bad(2, "expected 'N m n dt'"));
    }
    let parse_usize =
        |s: &str, line: usize| s.parse::<usize>().map_err(|_| bad(line, "bad integer"));
    let big_n = parse_usize(dims[0], 2)?;
    let m = parse_usize(dims[1], 2)?;
    let n = parse_usize(dims[2], 2)?;
    let dt: f64 = dims[3].parse().map_err(|_| bad(2, "bad dt"))?;
    if big_n < n || m == 0 || n == 0 || !(dt > 0.0) {
        return Err(bad(2, "inconsistent dimensions"));
    }
    let basis = basis_by_name(get(2)?.trim(), n, m)?;
    if basis.dim() != big_n {
        return Err(bad(3, "basis dimension does not match N"));
    }

    let mut line_no = 3;
    let mut read_block = |rows: usize, cols: usize| -> Result<Matrix> {
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let vals: Vec<f64> = get(line_no)?
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(line_no + 1, "bad number"))?;
            if vals.len() != cols || vals.iter().any(|v| !v.is_finite()) {
                return Err(bad(line_no + 1, "wrong number of finite values"));
            }
            for (j, v) in vals.into_iter().enumerate() {
                out[(i, j)] = v;
            }
            line_no += 1;
        }
        Ok(out)
    };
    let a = read_block(big_n, big_n)?;
    let b = read_block(big_n, m)?;

    let keyed = |i: usize, key: &str| -> Result<String> {
        let line = get(i)?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(|s| s.trim().to_string())
            .ok_or_else(|| bad(i + 1, &format!("expected '{key} <value>'")))
    };
    let residual: f64 = keyed(line_no, "residual")?
        .parse()
        .map_err(|_| bad(line_no + 1, "bad residual"))?;
    let rank = parse_usize(&keyed(line_no + 1, "rank")?, line_no + 2)?;

    Ok(LiftedLinearModel {
        a,
        b,
        c: projection(n, big_n),
        dt,
        domain: TimeDomain::Discrete,
        basis,
        diagnostics: FitDiagnostics {
            gamma_c: None,
            gamma_n: None,
            residual,
            rank_gamma_c: rank,
            rank_deficient: rank < big_n + m,
            scales: None,
            roundtrip_error: None,
        },
    })
}
