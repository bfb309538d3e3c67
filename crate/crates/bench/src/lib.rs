//! Fixtures shared by the criterion benches.

use masakit_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` matrix from a fixed seed.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `layers` correlated weights: a common component plus layer noise.
pub fn layer_stack(layers: usize, dim: usize, seed: u64) -> Vec<Matrix> {
    let base = random_matrix(dim, dim, seed);
    (0..layers)
        .map(|l| &base + random_matrix(dim, dim, seed + 1 + l as u64) * 0.3)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(random_matrix(3, 4, 7), random_matrix(3, 4, 7));
        let s = layer_stack(5, 4, 1);
        assert_eq!(s.len(), 5);
        assert_ne!(s[0], s[1]);
    }
}
