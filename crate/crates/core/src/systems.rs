//! Benchmark plants, their reference signals and observable dictionaries.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ode::Flow;

type DynamicsFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
type JacobianFn = dyn Fn(&[f64], &[f64]) -> Matrix + Send + Sync;
type SignalFn = dyn Fn(f64) -> Vec<f64> + Send + Sync;
type LiftFn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// A nonlinear plant `x' = f(x, u)` observed through a selection of state
/// coordinates `y = x[output_rows]`.
#[derive(Clone)]
pub struct SystemModel {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub params: Vec<(String, f64)>,
    output_rows: Vec<usize>,
    dynamics: Arc<DynamicsFn>,
    jac_x: Arc<JacobianFn>,
    jac_u: Arc<JacobianFn>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("k", &self.k)
            .field("params", &self.params)
            .field("output_rows", &self.output_rows)
            .finish()
    }
}

impl SystemModel {
    pub fn new<D, JX, JU>(
        name: impl Into<String>,
        n: usize,
        m: usize,
        output_rows: Vec<usize>,
        dynamics: D,
        jac_x: JX,
        jac_u: JU,
    ) -> Result<Self>
    where
        D: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        JX: Fn(&[f64], &[f64]) -> Matrix + Send + Sync + 'static,
        JU: Fn(&[f64], &[f64]) -> Matrix + Send + Sync + 'static,
    {
        if n == 0 || m == 0 {
            return Err(Error::contract(
                "state and input dimensions must be positive",
            ));
        }
        if output_rows.len() != m {
            return Err(Error::contract(format!(
                "output dimension {} must equal input dimension {m}",
                output_rows.len()
            )));
        }
        if let Some(&r) = output_rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract(format!(
                "output row {r} out of range for n = {n}"
            )));
        }
        Ok(SystemModel {
            name: name.into(),
            n,
            m,
            k: output_rows.len(),
            params: Vec::new(),
            output_rows,
            dynamics: Arc::new(dynamics),
            jac_x: Arc::new(jac_x),
            jac_u: Arc::new(jac_u),
        })
    }

    fn with_params(mut self, params: &[(&str, f64)]) -> Self {
        self.params = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        self
    }

    /// Linear plant `x' = A x + B u`.
    pub fn linear(
        name: impl Into<String>,
        a: Matrix,
        b: Matrix,
        output_rows: Vec<usize>,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || b.nrows() != n {
            return Err(Error::contract(
                "linear plant needs square A and B with matching rows",
            ));
        }
        let m = b.ncols();
        let (a1, b1) = (a.clone(), b.clone());
        let (a2, b2) = (a, b);
        SystemModel::new(
            name,
            n,
            m,
            output_rows,
            move |x, u, dx| {
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += a1[(i, j)] * x[j];
                    }
                    for j in 0..m {
                        acc += b1[(i, j)] * u[j];
                    }
                    dx[i] = acc;
                }
            },
            move |_, _| a2.clone(),
            move |_, _| b2.clone(),
        )
    }

    pub fn dynamics(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        (self.dynamics)(x, u, dx)
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n];
        self.dynamics(x, u, &mut dx);
        dx
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        self.output_rows.iter().map(|&r| x[r]).collect()
    }

    pub fn output_rows(&self) -> &[usize] {
        &self.output_rows
    }

    /// The constant `k x n` output Jacobian (a row selection).
    pub fn output_matrix(&self) -> Matrix {
        selection_matrix(&self.output_rows, self.n)
    }

    pub fn jac_x(&self, x: &[f64], u: &[f64]) -> Matrix {
        (self.jac_x)(x, u)
    }

    pub fn jac_u(&self, x: &[f64], u: &[f64]) -> Matrix {
        (self.jac_u)(x, u)
    }

    /// The vector field with the input held at `u`.
    pub fn flow<'a>(&'a self, u: &'a [f64]) -> FrozenInput<'a> {
        FrozenInput { system: self, u }
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

/// `rows.len() x n` matrix picking the listed coordinates.
pub fn selection_matrix(rows: &[usize], n: usize) -> Matrix {
    let mut s = Matrix::zeros(rows.len(), n);
    for (i, &r) in rows.iter().enumerate() {
        s[(i, r)] = 1.0;
    }
    s
}

pub struct FrozenInput<'a> {
    system: &'a SystemModel,
    u: &'a [f64],
}

impl Flow for FrozenInput<'_> {
    fn dim(&self) -> usize {
        self.system.n
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        self.system.dynamics(x, self.u, dx)
    }
}

/// Forced Van der Pol oscillator, output `x1`.
pub fn vdp() -> SystemModel {
    SystemModel::new(
        "vdp",
        2,
        1,
        vec![0],
        |x, u, dx| {
            dx[0] = x[1];
            dx[1] = -x[0] + (1.0 - x[0] * x[0]) * x[1] + u[0];
        },
        |x, _| {
            Matrix::from_row_slice(
                2,
                2,
                &[0.0, 1.0, -1.0 - 2.0 * x[0] * x[1], 1.0 - x[0] * x[0]],
            )
        },
        |_, _| Matrix::from_row_slice(2, 1, &[0.0, 1.0]),
    )
    .expect("static dimensions")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CraneParams {
    /// Trolley mass.
    pub trolley_mass: f64,
    /// Payload mass.
    pub payload_mass: f64,
    pub rod_length: f64,
    pub gravity: f64,
}

impl Default for CraneParams {
    fn default() -> Self {
        CraneParams {
            trolley_mass: 6.5,
            payload_mass: 0.5,
            rod_length: 0.75,
            gravity: 9.81,
        }
    }
}

impl CraneParams {
    /// Determinant of the 2x2 mass matrix at swing angle `theta`.
    pub fn mass_matrix_det(&self, theta: f64) -> f64 {
        let (mp, l) = (self.payload_mass, self.rod_length);
        mp * l * l * (self.trolley_mass + mp * theta.sin().powi(2))
    }

    /// Kinetic plus potential energy of state `[x, x', theta, theta']`.
    pub fn energy(&self, s: &[f64]) -> f64 {
        let (big_m, mp, l, g) = (
            self.trolley_mass,
            self.payload_mass,
            self.rod_length,
            self.gravity,
        );
        let (v, th, w) = (s[1], s[2], s[3]);
        0.5 * (big_m + mp) * v * v
            + 0.5 * mp * l * l * w * w
            + mp * l * th.cos() * w * v
            + mp * g * l * (1.0 - th.cos())
    }
}

/// Overhead crane: trolley position `x` driven by force `F`, payload swing
/// `theta` observed. State `[x, x', theta, theta']`.
///
/// The coupled second-order equations are solved through the closed-form
/// inverse of the mass matrix, whose determinant `mp l^2 (M + mp sin^2)` is
/// strictly positive.
pub fn crane(p: CraneParams) -> Result<SystemModel> {
    if !(p.trolley_mass > 0.0 && p.payload_mass > 0.0 && p.rod_length > 0.0) {
        return Err(Error::contract(
            "crane masses and rod length must be positive",
        ));
    }
    let CraneParams {
        trolley_mass: big_m,
        payload_mass: mp,
        rod_length: l,
        gravity: g,
    } = p;

    let model = SystemModel::new(
        "crane",
        4,
        1,
        vec![2],
        move |x, u, dx| {
            let (s, c) = x[2].sin_cos();
            let w = x[3];
            let q = big_m + mp * s * s;
            let pushed = u[0] + mp * l * w * w * s;
            dx[0] = x[1];
            dx[1] = (pushed + mp * g * s * c) / q;
            dx[2] = w;
            dx[3] = -(c * pushed + (big_m + mp) * g * s) / (l * q);
        },
        move |x, u| {
            let (s, c) = x[2].sin_cos();
            let w = x[3];
            let f = u[0];
            let q = big_m + mp * s * s;
            let dq = 2.0 * mp * s * c;
            let pushed = f + mp * l * w * w * s;

            let acc_num = pushed + mp * g * s * c;
            let d_acc_num = mp * l * w * w * c + mp * g * (c * c - s * s);
            let dacc_dth = (d_acc_num * q - acc_num * dq) / (q * q);
            let dacc_dw = 2.0 * mp * l * w * s / q;

            let swing_num = c * pushed + (big_m + mp) * g * s;
            let d_swing_num = -s * pushed + c * (mp * l * w * w * c) + (big_m + mp) * g * c;
            let dswing_dth = -(d_swing_num * q - swing_num * dq) / (l * q * q);
            let dswing_dw = -2.0 * mp * s * c * w / q;

            Matrix::from_row_slice(
                4,
                4,
                &[
                    0.0, 1.0, 0.0, 0.0, //
                    0.0, 0.0, dacc_dth, dacc_dw, //
                    0.0, 0.0, 0.0, 1.0, //
                    0.0, 0.0, dswing_dth, dswing_dw,
                ],
            )
        },
        move |x, _| {
            let (s, c) = x[2].sin_cos();
            let q = big_m + mp * s * s;
            Matrix::from_row_slice(4, 1, &[0.0, 1.0 / q, 0.0, -c / (l * q)])
        },
    )?;
    Ok(model.with_params(&[("M", big_m), ("m_p", mp), ("l", l), ("g", g)]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarParams {
    pub wheel_radius: f64,
    /// Distance between the wheels.
    pub width: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        CarParams {
            wheel_radius: 0.1,
            width: 0.4,
        }
    }
}

/// Differential-drive car, state `[x, y, theta]`, input wheel rates
/// `[omega_L, omega_R]`, output position.
pub fn car(p: CarParams) -> Result<SystemModel> {
    if !(p.wheel_radius > 0.0 && p.width > 0.0) {
        return Err(Error::contract("wheel radius and width must be positive"));
    }
    let (rho, d) = (p.wheel_radius, p.width);
    let model = SystemModel::new(
        "car",
        3,
        2,
        vec![0, 1],
        move |x, u, dx| {
            let (s, c) = x[2].sin_cos();
            let v = 0.5 * rho * (u[0] + u[1]);
            dx[0] = v * c;
            dx[1] = v * s;
            dx[2] = rho / d * (u[1] - u[0]);
        },
        move |x, u| {
            let (s, c) = x[2].sin_cos();
            let v = 0.5 * rho * (u[0] + u[1]);
            Matrix::from_row_slice(3, 3, &[0.0, 0.0, -v * s, 0.0, 0.0, v * c, 0.0, 0.0, 0.0])
        },
        move |x, _| {
            let (s, c) = x[2].sin_cos();
            let h = 0.5 * rho;
            Matrix::from_row_slice(3, 2, &[h * c, h * c, h * s, h * s, -rho / d, rho / d])
        },
    )?;
    Ok(model.with_params(&[("rho", rho), ("D", d)]))
}

/// Looks up a benchmark plant with default parameters.
pub fn system_by_name(name: &str) -> Result<SystemModel> {
    match name {
        "vdp" => Ok(vdp()),
        "crane" => crane(CraneParams::default()),
        "car" => car(CarParams::default()),
        other => Err(Error::Config(format!("unknown system '{other}'"))),
    }
}

/// A tracking reference `t -> r(t)`, defined for all `t >= 0`.
#[derive(Clone)]
pub struct ReferenceSignal {
    pub name: String,
    pub dim: usize,
    f: Arc<SignalFn>,
}

impl fmt::Debug for ReferenceSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReferenceSignal")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

impl ReferenceSignal {
    pub fn new<F>(name: impl Into<String>, dim: usize, f: F) -> Self
    where
        F: Fn(f64) -> Vec<f64> + Send + Sync + 'static,
    {
        ReferenceSignal {
            name: name.into(),
            dim,
            f: Arc::new(f),
        }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let dim = value.len();
        ReferenceSignal::new("constant", dim, move |_| value.clone())
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        (self.f)(t)
    }
}

pub fn vdp_reference() -> ReferenceSignal {
    ReferenceSignal::new("vdp", 1, |t| vec![PI / 8.0 * t.sin() + PI / 6.0])
}

pub fn crane_reference() -> ReferenceSignal {
    ReferenceSignal::new("crane", 1, |t| vec![(0.1 * t).sin()])
}

/// Cubic lead-in for `t < 5`, then a slow Lissajous curve; the second branch
/// owns `t = 5`.
pub fn car_reference() -> ReferenceSignal {
    ReferenceSignal::new("car", 2, |t| {
        if t < 5.0 {
            vec![
                -0.0001 * t.powi(3) + 0.25 * t,
                0.0475 * t.powi(3) - 0.3601 * t * t + 0.3 * t + 3.0,
            ]
        } else {
            vec![5.0 * (0.05 * t).sin(), 3.0 * (0.1 * t).sin()]
        }
    })
}

pub fn reference_by_name(name: &str) -> Result<ReferenceSignal> {
    match name {
        "vdp" => Ok(vdp_reference()),
        "crane" => Ok(crane_reference()),
        "car" => Ok(car_reference()),
        other => Err(Error::Config(format!("unknown reference '{other}'"))),
    }
}

/// Ordered observables over `(x, u)`; the first `n` are the state itself.
#[derive(Clone)]
pub struct BasisDictionary {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub names: Vec<String>,
    input_dependent: bool,
    lift: Arc<LiftFn>,
    jac_u: Arc<JacobianFn>,
}

impl fmt::Debug for BasisDictionary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BasisDictionary")
            .field("name", &self.name)
            .field("names", &self.names)
            .finish()
    }
}

impl BasisDictionary {
    /// `extra` maps `(x, u)` to the observables after the state coordinates;
    /// `extra_jac_u` is its `(N - n) x m` input Jacobian.
    pub fn new<E, J>(
        name: impl Into<String>,
        n: usize,
        m: usize,
        extra_names: &[&str],
        extra: E,
        extra_jac_u: J,
    ) -> Result<Self>
    where
        E: Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        J: Fn(&[f64], &[f64]) -> Matrix + Send + Sync + 'static,
    {
        if extra_names.is_empty() {
            return Err(Error::contract(
                "a basis needs at least one observable beyond the state",
            ));
        }
        let extra_count = extra_names.len();
        let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        names.extend(extra_names.iter().map(|s| s.to_string()));
        Ok(BasisDictionary {
            name: name.into(),
            n,
            m,
            names,
            input_dependent: false,
            lift: Arc::new(move |x: &[f64], u: &[f64]| {
                let mut z = x.to_vec();
                z.extend(extra(x, u));
                z
            }),
            jac_u: Arc::new(move |x: &[f64], u: &[f64]| {
                let mut j = Matrix::zeros(n + extra_count, m);
                j.view_mut((n, 0), (extra_count, m))
                    .copy_from(&extra_jac_u(x, u));
                j
            }),
        })
    }

    /// The trivial dictionary `z = x` (`N = n`), used for fitting plants that
    /// are already linear.
    pub fn identity(n: usize, m: usize) -> Self {
        BasisDictionary {
            name: "identity".into(),
            n,
            m,
            names: (1..=n).map(|i| format!("x{i}")).collect(),
            input_dependent: false,
            lift: Arc::new(|x: &[f64], _: &[f64]| x.to_vec()),
            jac_u: Arc::new(move |_: &[f64], _: &[f64]| Matrix::zeros(n, m)),
        }
    }

    /// Lifted dimension `N`.
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn lift(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (self.lift)(x, u)
    }

    /// `N x m` derivative of the lift with respect to the input.
    pub fn lift_jac_u(&self, x: &[f64], u: &[f64]) -> Matrix {
        (self.jac_u)(x, u)
    }

    /// Marks observables as depending on the input, so predictors must
    /// account for `d lift / du`.
    pub fn with_input_dependence(mut self) -> Self {
        self.input_dependent = true;
        self
    }

    pub fn input_dependent(&self) -> bool {
        self.input_dependent
    }
}

/// `[x1, x2, x1^2, x1^2 x2]`.
pub fn vdp_basis() -> BasisDictionary {
    BasisDictionary::new(
        "vdp",
        2,
        1,
        &["x1^2", "x1^2*x2"],
        |x, _| vec![x[0] * x[0], x[0] * x[0] * x[1]],
        |_, _| Matrix::zeros(2, 1),
    )
    .expect("static basis")
}

/// `[x, x', theta, theta', sin theta, cos theta]`.
pub fn crane_basis() -> BasisDictionary {
    BasisDictionary::new(
        "crane",
        4,
        1,
        &["sin(x3)", "cos(x3)"],
        |x, _| vec![x[2].sin(), x[2].cos()],
        |_, _| Matrix::zeros(2, 1),
    )
    .expect("static basis")
}

/// `[x, y, theta, wL sin, wL cos, wR sin, wR cos]`.
pub fn car_basis() -> BasisDictionary {
    BasisDictionary::new(
        "car",
        3,
        2,
        &["u1*sin(x3)", "u1*cos(x3)", "u2*sin(x3)", "u2*cos(x3)"],
        |x, u| {
            let (s, c) = x[2].sin_cos();
            vec![u[0] * s, u[0] * c, u[1] * s, u[1] * c]
        },
        |x, _| {
            let (s, c) = x[2].sin_cos();
            Matrix::from_row_slice(4, 2, &[s, 0.0, c, 0.0, 0.0, s, 0.0, c])
        },
    )
    .expect("static basis")
    .with_input_dependence()
}

/// Looks up a dictionary by name; `identity` takes its dimensions from the
/// arguments, the others check them.
pub fn basis_by_name(name: &str, n: usize, m: usize) -> Result<BasisDictionary> {
    let basis = match name {
        "identity" => return Ok(BasisDictionary::identity(n, m)),
        "vdp" => vdp_basis(),
        "crane" => crane_basis(),
        "car" => car_basis(),
        other => return Err(Error::Config(format!("unknown basis '{other}'"))),
    };
    if basis.n != n || basis.m != m {
        return Err(Error::Config(format!(
            "basis '{name}' is for n = {}, m = {}, not n = {n}, m = {m}",
            basis.n, basis.m
        )));
    }
    Ok(basis)
}
