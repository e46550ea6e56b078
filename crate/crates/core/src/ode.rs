//! Fixed-step RK4 integration: plant simulation, look-ahead prediction and
//! the forward sensitivity equations.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A vector field `x' = rhs(t, x)` of fixed dimension.
pub trait Flow {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]);
}

/// Adapts a closure `(t, x, dx)` into a [`Flow`].
pub struct FnFlow<F> {
    dim: usize,
    f: F,
}

impl<F> FnFlow<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    pub fn new(dim: usize, f: F) -> Self {
        FnFlow { dim, f }
    }
}

impl<F> Flow for FnFlow<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        (self.f)(t, x, dx)
    }
}

/// Samples of a fixed-step solution; sample `i` is at `t0 + i * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.samples.last().expect("trajectory is never empty")
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Horizon actually covered after rounding to whole steps.
    pub fn effective_horizon(&self) -> f64 {
        (self.samples.len() - 1) as f64 * self.dt
    }
}

/// Number of whole steps of size `dt` covering `horizon`, rounded to nearest.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::contract(format!(
            "step size must be positive, got {dt}"
        )));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::contract(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let steps = (horizon / dt + 0.5).floor() as usize;
    if steps == 0 {
        return Err(Error::contract(format!(
            "horizon {horizon} is shorter than half a step of {dt}"
        )));
    }
    Ok(steps)
}

fn check_finite(dx: &[f64], t: f64, x: &[f64]) -> Result<()> {
    if dx.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            step: 0,
            t,
            x: x.to_vec(),
        })
    }
}

/// One classical Runge-Kutta step.
pub fn rk4_step<F: Flow + ?Sized>(flow: &F, t: f64, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = flow.dim();
    if x.len() != n {
        return Err(Error::contract(format!(
            "state has length {}, flow dimension is {n}",
            x.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::contract("rk4 step size must be positive"));
    }
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    flow.rhs(t, x, &mut k1);
    check_finite(&k1, t, x)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    flow.rhs(t + 0.5 * dt, &tmp, &mut k2);
    check_finite(&k2, t, x)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    flow.rhs(t + 0.5 * dt, &tmp, &mut k3);
    check_finite(&k3, t, x)?;
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    flow.rhs(t + dt, &tmp, &mut k4);
    check_finite(&k4, t, x)?;

    Ok((0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

fn tag_step(err: Error, step: usize) -> Error {
    match err {
        Error::Integration { t, x, .. } => Error::Integration { step, t, x },
        other => other,
    }
}

/// Integrates from `t0` over `horizon` (rounded to whole steps).
pub fn simulate<F: Flow + ?Sized>(
    flow: &F,
    x0: &[f64],
    t0: f64,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory> {
    let steps = step_count(horizon, dt)?;
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push(x0.to_vec());
    for i in 0..steps {
        let t = t0 + i as f64 * dt;
        let next = rk4_step(flow, t, &samples[i], dt).map_err(|e| tag_step(e, i))?;
        samples.push(next);
    }
    Ok(Trajectory { t0, dt, samples })
}

/// Like [`simulate`] but keeps only the final state.
pub fn simulate_final<F: Flow + ?Sized>(
    flow: &F,
    x0: &[f64],
    t0: f64,
    horizon: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let steps = step_count(horizon, dt)?;
    let mut x = x0.to_vec();
    for i in 0..steps {
        x = rk4_step(flow, t0 + i as f64 * dt, &x, dt).map_err(|e| tag_step(e, i))?;
    }
    Ok(x)
}

/// Co-integrates the state and its input sensitivity `xi = dx/du`.
///
/// `xi' = J_x(x, u) xi + J_u(x, u)` with `xi(0) = 0`; returns `xi` at the end
/// of the horizon as an `n x m` matrix.
pub fn sensitivity_propagate<F, JX, JU>(
    flow: &F,
    jac_x: JX,
    jac_u: JU,
    x0: &[f64],
    u: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<Matrix>
where
    F: Flow + ?Sized,
    JX: Fn(&[f64], &[f64]) -> Matrix,
    JU: Fn(&[f64], &[f64]) -> Matrix,
{
    let n = flow.dim();
    let m = u.len();
    if x0.len() != n {
        return Err(Error::contract("initial state length does not match flow"));
    }
    // Augmented state [x; vec(xi)] with xi stored column-major.
    let augmented = FnFlow::new(n + n * m, |t, s: &[f64], ds: &mut [f64]| {
        let (x, xi) = s.split_at(n);
        let (dx, dxi) = ds.split_at_mut(n);
        flow.rhs(t, x, dx);
        let jx = jac_x(x, u);
        let ju = jac_u(x, u);
        let xi = Matrix::from_column_slice(n, m, xi);
        let rate = jx * xi + ju;
        dxi.copy_from_slice(rate.as_slice());
    });
    let mut s0 = vec![0.0; n + n * m];
    s0[..n].copy_from_slice(x0);
    let end = simulate_final(&augmented, &s0, 0.0, horizon, dt)?;
    Ok(Matrix::from_column_slice(n, m, &end[n..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> FnFlow<impl Fn(f64, &[f64], &mut [f64])> {
        FnFlow::new(1, |_, x: &[f64], dx: &mut [f64]| dx[0] = -x[0])
    }

    #[test]
    fn rk4_constant_and_linear_in_time() {
        let zero = FnFlow::new(1, |_, _: &[f64], dx: &mut [f64]| dx[0] = 0.0);
        assert_eq!(rk4_step(&zero, 0.0, &[7.0], 0.1).unwrap(), vec![7.0]);
        let one = FnFlow::new(1, |_, _: &[f64], dx: &mut [f64]| dx[0] = 1.0);
        let x = rk4_step(&one, 0.0, &[0.0], 0.1).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-16);
    }

    #[test]
    fn rk4_decay_step() {
        let x = rk4_step(&decay(), 0.0, &[1.0], 0.1).unwrap();
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
        assert!((x[0] - 0.90483750).abs() < 1e-8);
    }

    #[test]
    fn rk4_reports_non_finite_derivative() {
        let bad = FnFlow::new(1, |_, x: &[f64], dx: &mut [f64]| dx[0] = 1.0 / x[0]);
        let err = simulate(&bad, &[0.0], 0.0, 1.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::Integration { step: 0, .. }));
    }

    #[test]
    fn simulate_sample_count_and_constant_flow() {
        let zero = FnFlow::new(2, |_, _: &[f64], dx: &mut [f64]| dx.fill(0.0));
        let traj = simulate(&zero, &[1.0, 2.0], 0.0, 1.0, 0.1).unwrap();
        assert_eq!(traj.samples.len(), 11);
        assert!(traj.samples.iter().all(|s| s == &vec![1.0, 2.0]));
        assert!((traj.effective_horizon() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simulate_decay_matches_exponential() {
        let traj = simulate(&decay(), &[1.0], 0.0, 2.0, 0.01).unwrap();
        assert!((traj.last()[0] - (-2f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn non_integer_horizon_rounds() {
        assert_eq!(step_count(0.15, 0.01).unwrap(), 15);
        assert_eq!(step_count(0.5, 0.01).unwrap(), 50);
        assert_eq!(step_count(0.104, 0.01).unwrap(), 10);
        assert!(step_count(0.004, 0.01).is_err());
        assert!(step_count(1.0, 0.0).is_err());
    }

    #[test]
    fn sensitivity_of_integrator_and_decay() {
        let integrator = FnFlow::new(1, |_, _: &[f64], dx: &mut [f64]| dx[0] = 1.0);
        let xi = sensitivity_propagate(
            &integrator,
            |_, _| Matrix::zeros(1, 1),
            |_, _| Matrix::identity(1, 1),
            &[0.0],
            &[1.0],
            0.5,
            0.01,
        )
        .unwrap();
        assert!((xi[(0, 0)] - 0.5).abs() < 1e-14);

        let u = 0.3;
        let f = FnFlow::new(1, move |_, x: &[f64], dx: &mut [f64]| dx[0] = -x[0] + u);
        let xi = sensitivity_propagate(
            &f,
            |_, _| Matrix::from_element(1, 1, -1.0),
            |_, _| Matrix::identity(1, 1),
            &[0.2],
            &[u],
            1.0,
            0.01,
        )
        .unwrap();
        assert!((xi[(0, 0)] - (1.0 - (-1f64).exp())).abs() < 1e-9);
    }
}
