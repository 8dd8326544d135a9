//! Deterministic inputs shared by the benchmarks.

use openloop_core::control::haar_sample;
use openloop_core::state::{jz_operator, random_density_matrix, random_hermitian, rotated_observable};
use openloop_core::{CMatrix, DensityMatrix, Observable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A generic mixed state and a dense (rotated) `J_z`.
pub fn dense_case(dim: usize, seed: u64) -> (DensityMatrix, Observable) {
    let mut r = rng(seed);
    let rho = random_density_matrix(dim, &mut r);
    let u = haar_sample(dim, &mut r);
    let x = rotated_observable(&u, &jz_operator(dim).expect("dim >= 2")).expect("unitary conjugation");
    (rho, x)
}

/// Four random Hermitian matrices for the fourth-moment formula.
pub fn moment_args(dim: usize, seed: u64) -> [CMatrix; 4] {
    let mut r = rng(seed);
    std::array::from_fn(|_| random_hermitian(dim, &mut r))
}
