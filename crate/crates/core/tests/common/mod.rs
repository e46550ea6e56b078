#![allow(dead_code)]

use knr::koopman::{SnapshotDataset, SnapshotPair};
use knr::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vec(rng: &mut ChaCha8Rng, bounds: &[(f64, f64)]) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..hi))
        .collect()
}

/// `|a - b|_F / |b|_F`.
pub fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm()
}

/// Stable `A0` (spectral norm 0.9) and generic `B0` for the exactly linear plant.
pub fn synthetic_plant(seed: u64, n: usize, m: usize) -> (Matrix, Matrix) {
    let mut r = rng(seed);
    let a = random_matrix(&mut r, n, n);
    let sigma = a.singular_values()[0];
    (a * (0.9 / sigma), random_matrix(&mut r, n, m))
}

/// `steps` pairs of `z+ = A0 z + B0 u` driven by fresh uniform inputs.
pub fn synthetic_dataset(a: &Matrix, b: &Matrix, steps: usize, seed: u64) -> SnapshotDataset {
    let (n, m) = (a.nrows(), b.ncols());
    let mut r = rng(seed);
    let mut z = nalgebra::DVector::from_vec(random_vec(&mut r, &vec![(-1.0, 1.0); n]));
    let mut pairs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let u = nalgebra::DVector::from_vec(random_vec(&mut r, &vec![(-1.0, 1.0); m]));
        let next = a * &z + b * &u;
        pairs.push(SnapshotPair {
            x: z.iter().copied().collect(),
            u: u.iter().copied().collect(),
            x_next: next.iter().copied().collect(),
        });
        z = next;
    }
    SnapshotDataset {
        pairs,
        dt: 0.01,
        n,
        m,
    }
}

/// Random orthogonal factor from the QR decomposition of a random matrix.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    random_matrix(rng, n, n).qr().q()
}

/// `n x n` matrix of exact rank `rank`; nonzero singular values in [0.1, 2].
pub fn mixed_rank(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> Matrix {
    let sigma = Matrix::from_fn(n, n, |i, j| {
        if i == j && i < rank {
            rng.random_range(0.1..2.0)
        } else {
            0.0
        }
    });
    random_orthogonal(rng, n) * sigma * random_orthogonal(rng, n).transpose()
}
