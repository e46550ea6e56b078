//! Newton-Raphson tracking controller.
//!
//! The control input follows the flow
//!
//! ```text
//! u' = alpha * (dg/du)^-1 * (r(t + T) - g(x, u))
//! ```
//!
//! where `g(x, u)` is the output predicted `T` seconds ahead with the input
//! frozen. Prediction and its input derivative come from one of:
//!
//! * the nonlinear plant, simulated forward, with the derivative from
//!   forward differences, the sensitivity equations, or the local
//!   linearization in closed form;
//! * a lifted linear model identified from data, unrolled in discrete time
//!   or propagated with the matrix exponential of its continuous form.
//!
//! The closed loop is staggered: the controller flow takes a forward Euler
//! step, then the plant takes an RK4 step with the new input held.

use std::fmt;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{self, LiftedLinearModel, TimeDomain};
use crate::linalg::{self, Matrix};
use crate::ode;
use crate::systems::{selection_matrix, ReferenceSignal, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMethod {
    /// Forward finite differences of the nonlinear prediction.
    Fdm,
    /// Forward sensitivity equations integrated with the prediction.
    Sensitivity,
    /// `C Phi(J_x, T) J_u` of the plant linearized at the current point.
    LinearClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Nonlinear,
    KoopmanDiscrete,
    KoopmanContinuous,
}

impl PredictorKind {
    pub fn is_koopman(self) -> bool {
        !matches!(self, PredictorKind::Nonlinear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Speedup gain of the controller flow.
    pub alpha: f64,
    /// Look-ahead horizon `T` in seconds.
    pub lookahead: f64,
    /// Controller and plant step.
    pub dt: f64,
    /// Used by the nonlinear predictor only; lifted models always use their
    /// closed-form derivative.
    pub derivative_method: DerivativeMethod,
    pub predictor: PredictorKind,
    pub fdm_delta: f64,
    pub jacobian_damping: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            alpha: 20.0,
            lookahead: 0.15,
            dt: 0.01,
            derivative_method: DerivativeMethod::Fdm,
            predictor: PredictorKind::Nonlinear,
            fdm_delta: 1e-4,
            jacobian_damping: 0.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !positive(self.dt) || !positive(self.lookahead) {
            return Err(Error::Config("dt and look-ahead must be positive".into()));
        }
        if !positive(self.fdm_delta) {
            return Err(Error::Config(
                "finite-difference delta must be positive".into(),
            ));
        }
        if !(self.jacobian_damping >= 0.0) {
            return Err(Error::Config("jacobian damping must be >= 0".into()));
        }
        ode::step_count(self.lookahead, self.dt).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Look-ahead rounded to whole steps.
    pub fn effective_lookahead(&self) -> Result<f64> {
        Ok(ode::step_count(self.lookahead, self.dt)? as f64 * self.dt)
    }
}

/// Predicted output and its input derivative at one `(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorEval {
    pub g: Vec<f64>,
    pub dg_du: Matrix,
    /// 2-norm condition number of `dg_du` when it is square.
    pub condition: Option<f64>,
}

impl PredictorEval {
    pub fn new(g: Vec<f64>, dg_du: Matrix) -> Result<Self> {
        if !linalg::all_finite(&dg_du) || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "predictor",
                "non-finite prediction or derivative",
            ));
        }
        let condition = if dg_du.is_square() {
            let s = linalg::singular_values(&dg_du)?;
            let min = *s.last().unwrap();
            Some(if min > 0.0 { s[0] / min } else { f64::INFINITY })
        } else {
            None
        };
        Ok(PredictorEval {
            g,
            dg_du,
            condition,
        })
    }
}

/// Output of the plant after `lookahead` seconds with `u` frozen.
pub fn predict_nonlinear(
    system: &SystemModel,
    x: &[f64],
    u: &[f64],
    lookahead: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let end = ode::simulate_final(&system.flow(u), x, 0.0, lookahead, dt)?;
    Ok(system.output(&end))
}

fn fdm_columns(
    system: &SystemModel,
    x: &[f64],
    u: &[f64],
    base: &[f64],
    lookahead: f64,
    dt: f64,
    delta: f64,
) -> Result<Matrix> {
    let mut jac = Matrix::zeros(base.len(), u.len());
    let mut bumped = u.to_vec();
    for j in 0..u.len() {
        bumped[j] = u[j] + delta;
        let g = predict_nonlinear(system, x, &bumped, lookahead, dt)?;
        for i in 0..base.len() {
            jac[(i, j)] = (g[i] - base[i]) / delta;
        }
        bumped[j] = u[j];
    }
    Ok(jac)
}

/// Forward-difference `dg/du`, one extra prediction per input.
pub fn derivative_fdm(
    system: &SystemModel,
    x: &[f64],
    u: &[f64],
    lookahead: f64,
    dt: f64,
    delta: f64,
) -> Result<Matrix> {
    if !(delta > 0.0) {
        return Err(Error::contract("finite-difference delta must be positive"));
    }
    let base = predict_nonlinear(system, x, u, lookahead, dt)?;
    fdm_columns(system, x, u, &base, lookahead, dt, delta)
}

/// `dg/du` from the forward sensitivity equations, mapped through the
/// output selection.
pub fn derivative_sensitivity(
    system: &SystemModel,
    x: &[f64],
    u: &[f64],
    lookahead: f64,
    dt: f64,
) -> Result<Matrix> {
    let xi = ode::sensitivity_propagate(
        &system.flow(u),
        |x, u| system.jac_x(x, u),
        |x, u| system.jac_u(x, u),
        x,
        u,
        lookahead,
        dt,
    )?;
    Ok(system.output_matrix() * xi)
}

/// `dg/du` of the plant linearized at `(x, u)`: `C Phi(J_x, T) J_u`.
pub fn derivative_linearized(
    system: &SystemModel,
    x: &[f64],
    u: &[f64],
    lookahead: f64,
) -> Result<Matrix> {
    let phi = linalg::input_integral(&system.jac_x(x, u), lookahead)?;
    Ok(system.output_matrix() * phi * system.jac_u(x, u))
}

/// Prediction of the continuous linear model `x' = A x + B u`, `y = C x`:
///
/// `g = C (e^(AT) x + Phi(T) B u)`, `dg/du = C Phi(T) B`.
pub fn predict_linear(
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    x: &[f64],
    u: &[f64],
    lookahead: f64,
) -> Result<PredictorEval> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || c.ncols() != n || x.len() != n || u.len() != b.ncols() {
        return Err(Error::contract("predict_linear dimensions do not agree"));
    }
    let e = linalg::expm(&(a * lookahead))?;
    let gain = c * linalg::input_integral(a, lookahead)? * b;
    let g = c * e * DVector::from_column_slice(x) + &gain * DVector::from_column_slice(u);
    PredictorEval::new(g.iter().copied().collect(), gain)
}

/// A lifted model specialised to one horizon and output selection.
///
/// The propagation matrices do not depend on the operating point, so they
/// are computed once and each evaluation is a lift plus two small products.
#[derive(Debug, Clone)]
pub struct KoopmanPredictor {
    model: LiftedLinearModel,
    /// `R C A^P` (discrete) or `R C e^(A_c T)` (continuous), `k x N`.
    propagate: Matrix,
    /// `R C sum_{i<P} A^i B` or `R C Phi(T) B_c`, `k x m`.
    input_gain: Matrix,
    effective_lookahead: f64,
}

impl KoopmanPredictor {
    pub fn new(
        model: &LiftedLinearModel,
        lookahead: f64,
        output_rows: &[usize],
        kind: PredictorKind,
    ) -> Result<Self> {
        if model.domain != TimeDomain::Discrete {
            return Err(Error::contract(
                "predictor expects the identified discrete model",
            ));
        }
        let big_n = model.lifted_dim();
        let select = selection_matrix(output_rows, model.state_dim()) * &model.c;
        let steps = ode::step_count(lookahead, model.dt)?;
        let effective_lookahead = steps as f64 * model.dt;

        let (propagate, input_gain) = match kind {
            PredictorKind::KoopmanDiscrete => {
                let mut power = Matrix::identity(big_n, big_n);
                let mut sum = Matrix::zeros(big_n, big_n);
                for _ in 0..steps {
                    sum += &power;
                    power = &model.a * power;
                }
                (&select * power, &select * sum * &model.b)
            }
            PredictorKind::KoopmanContinuous => {
                let cont = koopman::to_continuous(model)?;
                let e = linalg::expm(&(&cont.a * effective_lookahead))?;
                let phi = linalg::input_integral(&cont.a, effective_lookahead)?;
                (&select * e, &select * phi * &cont.b)
            }
            PredictorKind::Nonlinear => {
                return Err(Error::contract(
                    "KoopmanPredictor needs a Koopman predictor kind",
                ))
            }
        };
        if !linalg::all_finite(&propagate) || !linalg::all_finite(&input_gain) {
            return Err(Error::numerical(
                "koopman predictor",
                "propagation overflowed",
            ));
        }
        Ok(KoopmanPredictor {
            model: model.clone(),
            propagate,
            input_gain,
            effective_lookahead,
        })
    }

    pub fn effective_lookahead(&self) -> f64 {
        self.effective_lookahead
    }

    /// `g = P lift(x, u) + G u`; `dg/du = G + P d lift/du`.
    ///
    /// The second derivative term vanishes for input-free dictionaries.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<PredictorEval> {
        let basis = &self.model.basis;
        let z0 = DVector::from_vec(basis.lift(x, u));
        let u_vec = DVector::from_column_slice(u);
        let g = &self.propagate * z0 + &self.input_gain * u_vec;
        let mut dg_du = self.input_gain.clone();
        if basis.input_dependent() {
            dg_du += &self.propagate * basis.lift_jac_u(x, u);
        }
        PredictorEval::new(g.iter().copied().collect(), dg_du)
    }
}

/// One-off evaluation of a lifted model; see [`KoopmanPredictor`].
pub fn knr_eval(
    model: &LiftedLinearModel,
    x: &[f64],
    u: &[f64],
    lookahead: f64,
    output_rows: &[usize],
    kind: PredictorKind,
) -> Result<PredictorEval> {
    KoopmanPredictor::new(model, lookahead, output_rows, kind)?.eval(x, u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NrUpdate {
    pub u: Vec<f64>,
    /// The Newton direction came from the minimum-norm solve.
    pub pinv_fallback: bool,
    /// The first solve failed and the damped retry was used.
    pub damped_retry: bool,
}

const RETRY_DAMPING: f64 = 1e-6;

/// Forward Euler step of the controller flow:
/// `u+ = u + dt * alpha * (dg/du + lambda I)^-1 (r_ahead - g)`.
pub fn nr_step(
    u: &[f64],
    r_ahead: &[f64],
    eval: &PredictorEval,
    cfg: &ControllerConfig,
    t: f64,
) -> Result<NrUpdate> {
    let k = eval.g.len();
    if eval.dg_du.shape() != (k, u.len()) || r_ahead.len() != k {
        return Err(Error::contract(
            "nr_step needs a square dg/du matching u and r",
        ));
    }
    let err = Matrix::from_iterator(k, 1, r_ahead.iter().zip(&eval.g).map(|(r, g)| r - g));
    let attempt = |lambda: f64| -> Result<linalg::Solution> {
        let lhs = &eval.dg_du + Matrix::identity(k, k) * lambda;
        let sol = linalg::solve(&lhs, &err)?;
        if linalg::all_finite(&sol.x) {
            Ok(sol)
        } else {
            Err(Error::numerical("nr_step", "non-finite Newton direction"))
        }
    };
    let (sol, damped_retry) = match attempt(cfg.jacobian_damping) {
        Ok(sol) => (sol, false),
        Err(_) if cfg.jacobian_damping == 0.0 => match attempt(RETRY_DAMPING) {
            Ok(sol) => (sol, true),
            Err(_) => return Err(Error::ControllerSingularity { t }),
        },
        Err(_) => return Err(Error::ControllerSingularity { t }),
    };
    let gain = cfg.dt * cfg.alpha;
    Ok(NrUpdate {
        u: u.iter()
            .zip(sol.x.iter())
            .map(|(ui, d)| ui + gain * d)
            .collect(),
        pinv_fallback: sol.pinv_fallback,
        damped_retry,
    })
}

/// One row of a closed-loop trace, at `t = i * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub r: Vec<f64>,
    /// Input applied over the step that ended at `t`.
    pub u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub records: Vec<TraceRecord>,
    /// Wall-clock seconds spent in the tracking loop.
    pub track_time: f64,
    pub effective_lookahead: f64,
    pub pinv_fallbacks: usize,
    pub damped_retries: usize,
}

/// A failed run together with the trace recorded before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Vec<TraceRecord>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (after {} recorded steps)",
            self.error,
            self.partial.len()
        )
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        RunFailure {
            error,
            partial: Vec::new(),
        }
    }
}

enum Predictor {
    Nonlinear,
    Koopman(Box<KoopmanPredictor>),
}

fn evaluate(
    predictor: &Predictor,
    system: &SystemModel,
    cfg: &ControllerConfig,
    x: &[f64],
    u: &[f64],
) -> Result<PredictorEval> {
    match predictor {
        Predictor::Koopman(p) => p.eval(x, u),
        Predictor::Nonlinear => {
            let g = predict_nonlinear(system, x, u, cfg.lookahead, cfg.dt)?;
            let dg_du = match cfg.derivative_method {
                DerivativeMethod::Fdm => {
                    fdm_columns(system, x, u, &g, cfg.lookahead, cfg.dt, cfg.fdm_delta)?
                }
                DerivativeMethod::Sensitivity => {
                    derivative_sensitivity(system, x, u, cfg.lookahead, cfg.dt)?
                }
                DerivativeMethod::LinearClosedForm => {
                    derivative_linearized(system, x, u, cfg.effective_lookahead()?)?
                }
            };
            PredictorEval::new(g, dg_du)
        }
    }
}

/// Runs the staggered closed loop for `floor(t_f / dt)` steps.
///
/// Step `i`: evaluate the predictor at `(x_i, u_i)`, update
/// `u_{i+1} = nr_step(u_i, r(t_i + T))`, then integrate the plant over
/// `[t_i, t_i + dt]` with `u_{i+1}` held. Record `i + 1` holds `x_{i+1}`.
pub fn run_closed_loop(
    system: &SystemModel,
    reference: &ReferenceSignal,
    cfg: &ControllerConfig,
    model: Option<&LiftedLinearModel>,
    x0: &[f64],
    u0: &[f64],
    t_f: f64,
) -> std::result::Result<ClosedLoopRun, RunFailure> {
    cfg.validate()?;
    if x0.len() != system.n || u0.len() != system.m {
        return Err(Error::Config("initial state or input has the wrong length".into()).into());
    }
    if reference.dim != system.k {
        return Err(Error::Config("reference dimension does not match the output".into()).into());
    }
    let steps = sample_count(t_f, cfg.dt)?;

    let predictor = if cfg.predictor.is_koopman() {
        let model = model
            .ok_or_else(|| Error::Config("a Koopman predictor needs an identified model".into()))?;
        if model.state_dim() != system.n || model.input_dim() != system.m {
            return Err(Error::Config("model dimensions do not match the system".into()).into());
        }
        if (model.dt - cfg.dt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "model sampling interval {} differs from controller step {}",
                model.dt, cfg.dt
            ))
            .into());
        }
        Predictor::Koopman(Box::new(KoopmanPredictor::new(
            model,
            cfg.lookahead,
            system.output_rows(),
            cfg.predictor,
        )?))
    } else {
        Predictor::Nonlinear
    };
    let lookahead = match &predictor {
        Predictor::Koopman(p) => p.effective_lookahead(),
        Predictor::Nonlinear => cfg.effective_lookahead()?,
    };

    let started = Instant::now();
    let mut records = Vec::with_capacity(steps);
    let mut x = x0.to_vec();
    let mut u = u0.to_vec();
    let mut pinv_fallbacks = 0;
    let mut damped_retries = 0;

    for i in 0..steps {
        let t = i as f64 * cfg.dt;
        let step = (|| -> Result<(NrUpdate, Vec<f64>)> {
            let eval = evaluate(&predictor, system, cfg, &x, &u)?;
            let update = nr_step(&u, &reference.eval(t + lookahead), &eval, cfg, t)?;
            let x_next =
                ode::rk4_step(&system.flow(&update.u), t, &x, cfg.dt).map_err(|e| match e {
                    Error::Integration { t, x, .. } => Error::Integration { step: i, t, x },
                    other => other,
                })?;
            Ok((update, x_next))
        })();
        let (update, x_next) = match step {
            Ok(v) => v,
            Err(error) => {
                return Err(RunFailure {
                    error,
                    partial: records,
                })
            }
        };
        pinv_fallbacks += update.pinv_fallback as usize;
        damped_retries += update.damped_retry as usize;
        u = update.u;
        x = x_next;
        let t_next = (i + 1) as f64 * cfg.dt;
        records.push(TraceRecord {
            t: t_next,
            y: system.output(&x),
            r: reference.eval(t_next),
            x: x.clone(),
            u: u.clone(),
        });
    }

    Ok(ClosedLoopRun {
        records,
        track_time: started.elapsed().as_secs_f64(),
        effective_lookahead: lookahead,
        pinv_fallbacks,
        damped_retries,
    })
}

/// `N_d = floor(t_f / dt)`, tolerant of representation error in `t_f / dt`.
pub fn sample_count(t_f: f64, dt: f64) -> Result<usize> {
    if !(t_f > 0.0) || !(dt > 0.0) || !t_f.is_finite() {
        return Err(Error::Config("final time and step must be positive".into()));
    }
    let ratio = t_f / dt;
    let steps = (ratio + 1e-9 * ratio.max(1.0)).floor() as usize;
    if steps == 0 {
        return Err(Error::Config("final time is shorter than one step".into()));
    }
    Ok(steps)
}
