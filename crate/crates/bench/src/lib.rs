//! Fixtures shared by the benchmarks.

use nrc_core::math::{softmax_rows, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n × d` matrix with entries uniform in `[-1, 1)`.
pub fn random_matrix(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(
        n,
        d,
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

/// `n` random probability rows over `c` classes.
pub fn random_probs(n: usize, c: usize, seed: u64) -> Matrix {
    let mut z = random_matrix(n, c, seed);
    z.scale(3.0);
    softmax_rows(&z).expect("finite")
}
