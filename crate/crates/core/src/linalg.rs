//! Small dense real-matrix kernel.
//!
//! Everything here works on [`Matrix`] (a `nalgebra::DMatrix<f64>`). The
//! matrices in this crate are tiny (at most a few dozen rows), so clarity
//! wins over blocking or workspace reuse. Singular value decompositions go
//! through `faer`, whose bidiagonal solver stays accurate on rank-deficient
//! input.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Implicit QR sweep budget per singular value in the `faer` solver.
const SVD_SWEEP_LIMIT: usize = 30;

/// Condition number above which [`solve`] switches to the pseudo-inverse.
pub const SOLVE_COND_LIMIT: f64 = 1e8;

/// Builds a matrix from row-major entries, rejecting wrong lengths and
/// non-finite values.
pub fn matrix(rows: usize, cols: usize, row_major: &[f64]) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::contract("matrix dimensions must be positive"));
    }
    if row_major.len() != rows * cols {
        return Err(Error::contract(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            row_major.len()
        )));
    }
    if let Some(i) = row_major.iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(format!("non-finite entry at index {i}")));
    }
    Ok(Matrix::from_row_slice(rows, cols, row_major))
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Maximum absolute column sum.
pub fn norm1(m: &Matrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

struct Decomposition {
    u: Matrix,
    /// Descending.
    s: Vec<f64>,
    v: Matrix,
}

fn to_faer(m: &Matrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn no_convergence(_: faer::linalg::svd::SvdError) -> Error {
    Error::SvdNonConvergence {
        iterations: SVD_SWEEP_LIMIT,
    }
}

fn svd(m: &Matrix) -> Result<Decomposition> {
    let dec = to_faer(m).thin_svd().map_err(no_convergence)?;
    let (u, s, v) = (dec.U(), dec.S().column_vector(), dec.V());
    Ok(Decomposition {
        u: Matrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]),
        s: (0..s.nrows()).map(|i| s[i]).collect(),
        v: Matrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)]),
    })
}

fn default_cutoff(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    to_faer(m).singular_values().map_err(no_convergence)
}

/// Numerical rank with the same cutoff rule as [`pinv`].
pub fn rank(m: &Matrix, tol: f64) -> Result<usize> {
    let s = singular_values(m)?;
    let sigma_max = s.first().copied().unwrap_or(0.0);
    let cutoff = if tol > 0.0 {
        tol
    } else {
        default_cutoff(m.nrows(), m.ncols(), sigma_max)
    };
    Ok(s.iter().filter(|&&v| v > cutoff).count())
}

/// Moore-Penrose pseudo-inverse via SVD.
///
/// Singular values at or below the cutoff are treated as zero. `tol = 0`
/// selects `max(rows, cols) * eps * sigma_max`; a positive `tol` is used as
/// an absolute cutoff.
pub fn pinv(m: &Matrix, tol: f64) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::contract("pinv of an empty matrix"));
    }
    if tol < 0.0 || !tol.is_finite() {
        return Err(Error::contract("pinv tolerance must be finite and >= 0"));
    }
    let dec = svd(m)?;
    let sigma_max = dec.s.first().copied().unwrap_or(0.0);
    let cutoff = if tol > 0.0 {
        tol
    } else {
        default_cutoff(m.nrows(), m.ncols(), sigma_max)
    };

    // M+ = V * diag(1/s) * U^T over the retained singular triplets.
    let mut out = Matrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in dec.s.iter().enumerate() {
        if s > cutoff {
            out += (dec.v.column(i) * dec.u.column(i).transpose()) / s;
        }
    }
    Ok(out)
}

/// Result of [`solve`].
#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Matrix,
    /// Set when the system was too ill-conditioned for a direct solve and the
    /// minimum-norm least-squares solution was returned instead.
    pub pinv_fallback: bool,
    pub condition: f64,
}

/// Solves `A X = B` for square `A`.
///
/// When `cond(A)` exceeds [`SOLVE_COND_LIMIT`] the minimum-norm solution is
/// returned, with singular values below `sigma_max / SOLVE_COND_LIMIT`
/// dropped.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Solution> {
    if !a.is_square() {
        return Err(Error::contract(format!(
            "solve needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != a.nrows() {
        return Err(Error::contract(format!(
            "right-hand side has {} rows, matrix has {}",
            b.nrows(),
            a.nrows()
        )));
    }
    if !all_finite(a) || !all_finite(b) {
        return Err(Error::numerical("solve", "non-finite input"));
    }
    let s = singular_values(a)?;
    let sigma_max = s[0];
    let sigma_min = *s.last().unwrap();
    let condition = if sigma_min > 0.0 {
        sigma_max / sigma_min
    } else {
        f64::INFINITY
    };

    if condition <= SOLVE_COND_LIMIT {
        if let Some(x) = a.clone().lu().solve(b) {
            return Ok(Solution {
                x,
                pinv_fallback: false,
                condition,
            });
        }
    }
    // Directions beyond the conditioning limit are treated as null space.
    let x = pinv(a, sigma_max / SOLVE_COND_LIMIT)? * b;
    Ok(Solution {
        x,
        pinv_fallback: true,
        condition,
    })
}

// Padé coefficients b_j for degrees 3, 5, 7, 9, 13.
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Largest 1-norm for which each degree meets unit roundoff.
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with a Padé approximant.
pub fn expm(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::contract("expm needs a square matrix"));
    }
    if !all_finite(m) {
        return Err(Error::numerical("expm", "non-finite input"));
    }
    let n = m.nrows();
    let norm = norm1(m);

    let result = if let Some(&(degree, _)) = THETA.iter().find(|(_, theta)| norm <= *theta) {
        pade_low(m, degree)?
    } else {
        let s = if norm > THETA13 {
            (norm / THETA13).log2().ceil().max(0.0) as i32
        } else {
            0
        };
        let scaled = m / 2f64.powi(s);
        let mut r = pade13(&scaled)?;
        for _ in 0..s {
            r = &r * &r;
        }
        r
    };
    debug_assert_eq!(result.nrows(), n);
    if !all_finite(&result) {
        return Err(Error::numerical("expm", "matrix exponential overflowed"));
    }
    Ok(result)
}

fn pade_quotient(u: Matrix, v: Matrix) -> Result<Matrix> {
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| Error::numerical("expm", "singular Padé denominator"))
}

fn pade_low(a: &Matrix, degree: usize) -> Result<Matrix> {
    let b: &[f64] = match degree {
        3 => &PADE3,
        5 => &PADE5,
        7 => &PADE7,
        9 => &PADE9,
        _ => unreachable!("unsupported Padé degree {degree}"),
    };
    let n = a.nrows();
    let a2 = a * a;
    // Even powers A^0, A^2, ..., A^(degree-1).
    let mut even = vec![Matrix::identity(n, n)];
    while even.len() < degree.div_ceil(2) {
        let next = even.last().unwrap() * &a2;
        even.push(next);
    }
    let mut u = Matrix::zeros(n, n);
    let mut v = Matrix::zeros(n, n);
    for (j, p) in even.iter().enumerate() {
        u += p * b[2 * j + 1];
        v += p * b[2 * j];
    }
    let u = a * u;
    pade_quotient(u, v)
}

fn pade13(a: &Matrix) -> Result<Matrix> {
    let b = &PADE13;
    let n = a.nrows();
    let ident = Matrix::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    pade_quotient(u, v)
}

/// `Phi(T) = integral_0^T e^(A s) ds`, taken from the exponential of the
/// augmented matrix `[[A, I], [0, 0]] * T`.
///
/// Equals `A^-1 (e^(AT) - I)` for invertible `A` and stays defined when `A`
/// is singular.
pub fn input_integral(a: &Matrix, horizon: f64) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::contract("input_integral needs a square matrix"));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::contract("input_integral horizon must be positive"));
    }
    let n = a.nrows();
    let mut aug = Matrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * horizon));
    aug.view_mut((0, n), (n, n))
        .copy_from(&(Matrix::identity(n, n) * horizon));
    let e = expm(&aug)?;
    Ok(e.view((0, n), (n, n)).into_owned())
}

/// Principal square root by the Denman-Beavers iteration.
pub fn sqrtm(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::contract("sqrtm needs a square matrix"));
    }
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = Matrix::identity(n, n);
    for _ in 0..100 {
        let y_inv = y
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical("sqrtm", "singular iterate"))?;
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical("sqrtm", "singular iterate"))?;
        let y_next = (&y + z_inv) * 0.5;
        let z_next = (&z + y_inv) * 0.5;
        let delta = norm1(&(&y_next - &y));
        y = y_next;
        z = z_next;
        if !all_finite(&y) {
            return Err(Error::numerical("sqrtm", "iteration diverged"));
        }
        if delta <= 1e-15 * norm1(&y).max(1.0) {
            return Ok(y);
        }
    }
    Err(Error::numerical(
        "sqrtm",
        "no convergence in 100 iterations",
    ))
}

/// Real principal logarithm by inverse scaling and squaring.
///
/// The caller is responsible for ruling out eigenvalues on the closed
/// negative real axis; here a non-convergent square root surfaces as an
/// error.
pub fn logm(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::contract("logm needs a square matrix"));
    }
    if !all_finite(a) {
        return Err(Error::numerical("logm", "non-finite input"));
    }
    let n = a.nrows();
    let ident = Matrix::identity(n, n);
    let mut x = a.clone();
    let mut halvings = 0;
    while norm1(&(&x - &ident)) > 0.25 {
        if halvings == 64 {
            return Err(Error::numerical("logm", "too many square roots"));
        }
        x = sqrtm(&x)?;
        halvings += 1;
    }

    // log X = 2 * sum_j W^(2j+1) / (2j+1),  W = (X - I)(X + I)^-1.
    let w = (&x + &ident)
        .transpose()
        .lu()
        .solve(&(&x - &ident).transpose())
        .ok_or_else(|| Error::numerical("logm", "singular X + I"))?
        .transpose();
    let w2 = &w * &w;
    let mut term = w.clone();
    let mut sum = w;
    for j in 1..60 {
        term = &term * &w2;
        let contrib = &term / (2 * j + 1) as f64;
        let size = norm1(&contrib);
        sum += contrib;
        if size <= f64::EPSILON * norm1(&sum).max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(sum * 2f64.powi(halvings + 1))
}
