//! Data-aware refinement of Matrix PCA residuals.
//!
//! A residual `ΔW = W − Ŵ` is whitened by the Cholesky factor of the
//! calibration autocorrelation `HᵀH = L·Lᵀ`, truncated to rank `r` in the
//! whitened space, and mapped back. With weights laid out `d_in × d_out`
//! (outputs are `H·W`) the whitened residual is `Lᵀ·ΔW`, since
//! `‖H·X‖_F = ‖Lᵀ·X‖_F`.

use crate::error::{MasaError, Result};
use crate::linalg::{solve_lower_transposed, svd, CholeskyFactor, Matrix};

/// Residual parameter budget `β = (α·L − B)/(L − B)`, clamped to `[0, 1]`.
pub fn residual_budget(alpha: f64, num_layers: usize, basis: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MasaError::invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    if basis == 0 || basis >= num_layers {
        return Err(MasaError::invalid(format!(
            "residual budget needs 1 <= B < L (B = {basis}, L = {num_layers})"
        )));
    }
    let (l, b) = (num_layers as f64, basis as f64);
    let beta = (alpha * l - b) / (l - b);
    if !(0.0..=1.0).contains(&beta) {
        log::warn!("residual budget {beta:.4} clamped to [0, 1]");
    }
    Ok(beta.clamp(0.0, 1.0))
}

/// `HᵀH` over all rows of a token-major activation matrix, symmetrized.
pub fn autocorrelation(layer_inputs: &Matrix) -> Result<Matrix> {
    let mut acc = AutocorrelationAccumulator::new(layer_inputs.ncols());
    acc.add(layer_inputs)?;
    acc.finish()
}

/// Streams activation batches into a running `HᵀH`.
#[derive(Debug, Clone)]
pub struct AutocorrelationAccumulator {
    sum: Matrix,
    tokens: usize,
}

impl AutocorrelationAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            sum: Matrix::zeros(dim, dim),
            tokens: 0,
        }
    }

    pub fn add(&mut self, batch: &Matrix) -> Result<()> {
        if batch.ncols() != self.sum.ncols() {
            return Err(MasaError::shape(format!(
                "activation batch has {} columns, expected {}",
                batch.ncols(),
                self.sum.ncols()
            )));
        }
        self.sum += batch.tr_mul(batch);
        self.tokens += batch.nrows();
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn finish(self) -> Result<Matrix> {
        if self.tokens == 0 {
            return Err(MasaError::invalid("autocorrelation of an empty activation set"));
        }
        let d = self.sum.ncols();
        if self.tokens < d {
            log::warn!("autocorrelation from {} tokens for dimension {d} is rank deficient", self.tokens);
        }
        Ok((&self.sum + self.sum.transpose()) * 0.5)
    }
}

/// Low-rank whitened residual: correction `= L⁻ᵀ·(left·right)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFactor {
    /// `d × r`, singular vectors scaled by singular values.
    pub left: Matrix,
    /// `r × h`.
    pub right: Matrix,
    pub whitening: CholeskyFactor,
}

impl ResidualFactor {
    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    /// The correction added to the shared reconstruction.
    pub fn correction(&self) -> Result<Matrix> {
        let whitened = &self.left * &self.right;
        solve_lower_transposed(&self.whitening, &whitened)
    }
}

/// Result of [`refine_residual`]: the factor plus its whitened-space error.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub factor: ResidualFactor,
    /// `‖Lᵀ(ΔW − correction)‖_F²`, the omitted whitened singular energy.
    pub whitened_error: f64,
    pub singular_values: Vec<f64>,
}

/// `Lᵀ·ΔW`.
pub fn whiten(delta_w: &Matrix, whitening: &CholeskyFactor) -> Result<Matrix> {
    if whitening.dim() != delta_w.nrows() {
        return Err(MasaError::shape(format!(
            "whitening factor is {n}x{n} but residual has {} rows",
            delta_w.nrows(),
            n = whitening.dim()
        )));
    }
    Ok(whitening.lower.tr_mul(delta_w))
}

/// Best rank-`r` correction of `delta_w` in the whitened metric.
pub fn refine_residual(delta_w: &Matrix, whitening: &CholeskyFactor, r: usize) -> Result<Refinement> {
    let cap = delta_w.nrows().min(delta_w.ncols());
    if r > cap {
        return Err(MasaError::invalid(format!("residual rank {r} exceeds {cap}")));
    }
    let whitened = whiten(delta_w, whitening)?;
    let dec = svd(&whitened)?;
    let (left, right) = dec.truncated_factors(r);
    Ok(Refinement {
        whitened_error: dec.tail_energy(r),
        singular_values: dec.singular_values,
        factor: ResidualFactor {
            left,
            right,
            whitening: whitening.clone(),
        },
    })
}

/// Ranks chosen for a pair of residuals sharing a row dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RankAllocation {
    pub r_a: usize,
    pub r_b: usize,
    /// Combined omitted energy `Σ_{i>r_a}(σᴬ_i)² + Σ_{j>r_b}(σᴮ_j)²`.
    pub e_min: f64,
    pub initial: (usize, usize),
    pub initial_error: f64,
}

/// Suffix sums of squares via flip → cumulative sum → flip.
///
/// Entry `i` is `Σ_{j ≥ i} σ_j²`; a trailing zero is appended so that
/// `tail[r]` is the energy omitted by a rank-`r` truncation for every
/// `r ≤ σ.len()`.
pub fn tail_sums(sigma: &[f64]) -> Vec<f64> {
    let mut flipped: Vec<f64> = sigma.iter().rev().map(|s| s * s).collect();
    let mut acc = 0.0;
    for v in flipped.iter_mut() {
        acc += *v;
        *v = acc;
    }
    flipped.reverse();
    flipped.push(0.0);
    flipped
}

fn tail_at(tail: &[f64], r: usize) -> f64 {
    tail.get(r).copied().unwrap_or(0.0)
}

fn initial_rank(beta: f64, rows: usize, cols: usize, cap: usize, name: &str) -> usize {
    let raw = ((1.0 - beta) * (rows * cols) as f64 / (rows + cols) as f64).floor() as usize;
    let clamped = raw.clamp(1, cap);
    if clamped != raw {
        log::warn!("initial rank {raw} for {name} clamped to {clamped}");
    }
    clamped
}

/// Walks the trajectory shifting one rank from `shrink` to `grow` per step
/// and returns the best `(shrink_rank, grow_rank, error)` seen.
fn walk(
    tail_shrink: &[f64],
    tail_grow: &[f64],
    start: (usize, usize),
    grow_cap: usize,
    max_steps: Option<usize>,
) -> (usize, usize, f64) {
    let (mut rs, mut rg) = start;
    let mut best = (rs, rg, tail_at(tail_shrink, rs) + tail_at(tail_grow, rg));
    let mut steps = 0usize;
    loop {
        if max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        steps += 1;
        if rs <= 1 || rg >= grow_cap {
            break;
        }
        rs -= 1;
        rg += 1;
        let e = tail_at(tail_shrink, rs) + tail_at(tail_grow, rg);
        if e < best.2 {
            best = (rs, rg, e);
        }
    }
    best
}

/// Balanced rank allocation between two residuals `A (m × n)` and `B (m × k)`.
///
/// Initial ranks follow the parameter-count rule `⌊(1−β)·m·n/(m+n)⌋`.
/// The primary trajectory moves rank from `A` to `B`; the mirrored
/// trajectory (from `B` to `A`) is also walked and the lower error kept,
/// the primary direction winning ties. `max_steps` caps the number of
/// moves per trajectory; `None` walks until a rank bound is hit.
pub fn balanced_rank_allocation(
    sigma_a: &[f64],
    sigma_b: &[f64],
    m: usize,
    n: usize,
    k: usize,
    beta: f64,
    max_steps: Option<usize>,
) -> Result<RankAllocation> {
    if sigma_a.is_empty() || sigma_b.is_empty() {
        return Err(MasaError::invalid("singular value lists must be non-empty"));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(MasaError::invalid(format!("beta {beta} outside (0, 1)")));
    }
    let cap_a = m.min(n);
    let cap_b = m.min(k);
    for (name, s, cap) in [("A", sigma_a, cap_a), ("B", sigma_b, cap_b)] {
        if s.len() > cap {
            return Err(MasaError::invalid(format!(
                "{} singular values given for {name} but its rank is at most {cap}",
                s.len()
            )));
        }
        if s.iter().any(|v| *v < 0.0 || !v.is_finite()) || s.windows(2).any(|w| w[0] < w[1]) {
            return Err(MasaError::invalid(format!(
                "singular values of {name} must be finite, nonnegative, descending"
            )));
        }
    }
    let tail_a = tail_sums(sigma_a);
    let tail_b = tail_sums(sigma_b);

    let ra0 = initial_rank(beta, m, n, cap_a, "A");
    let rb0 = initial_rank(beta, m, k, cap_b, "B");
    let initial_error = tail_at(&tail_a, ra0) + tail_at(&tail_b, rb0);

    let (fa, fb, fe) = walk(&tail_a, &tail_b, (ra0, rb0), cap_b, max_steps);
    let (sb, sa, se) = walk(&tail_b, &tail_a, (rb0, ra0), cap_a, max_steps);
    let (r_a, r_b, e_min) = if se < fe { (sa, sb, se) } else { (fa, fb, fe) };

    Ok(RankAllocation {
        r_a,
        r_b,
        e_min,
        initial: (ra0, rb0),
        initial_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky, truncated_approx, RidgePolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn whitening_for(seed: u64, d: usize) -> CholeskyFactor {
        let h = random(3 * d, d, seed);
        cholesky(&autocorrelation(&h).unwrap(), &RidgePolicy::default(), "h").unwrap()
    }

    #[test]
    fn budget_cases() {
        assert_eq!(residual_budget(0.5, 10, 5).unwrap(), 0.0);
        assert!((residual_budget(0.5, 10, 1).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert!((residual_budget(0.5, 10, 2).unwrap() - 0.375).abs() < 1e-15);
        assert_eq!(residual_budget(0.1, 10, 5).unwrap(), 0.0);
        assert!(residual_budget(0.5, 4, 4).is_err());
        assert!(residual_budget(0.0, 4, 1).is_err());
    }

    #[test]
    fn autocorrelation_cases() {
        let one_hot = Matrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
        let a = autocorrelation(&one_hot).unwrap();
        let mut expected = Matrix::zeros(3, 3);
        expected[(1, 1)] = 1.0;
        assert_eq!(a, expected);

        let rows = Matrix::identity(3, 3);
        assert_eq!(autocorrelation(&rows).unwrap(), Matrix::identity(3, 3));

        let h = random(9, 4, 2);
        let a = autocorrelation(&h).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut naive = 0.0;
                for t in 0..9 {
                    naive += h[(t, i)] * h[(t, j)];
                }
                assert!((a[(i, j)] - naive).abs() < 1e-10);
            }
        }
        assert!(autocorrelation(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn full_rank_residual_is_exact() {
        let dw = random(5, 4, 3);
        let wf = whitening_for(4, 5);
        let r = refine_residual(&dw, &wf, 4).unwrap();
        let corr = r.factor.correction().unwrap();
        assert!((&corr - &dw).norm() / dw.norm() < 1e-8);
    }

    #[test]
    fn identity_whitening_is_plain_truncation() {
        let dw = random(6, 5, 5);
        let r = refine_residual(&dw, &CholeskyFactor::identity(6), 2).unwrap();
        let corr = r.factor.correction().unwrap();
        assert!((&corr - truncated_approx(&dw, 2).unwrap()).amax() < 1e-10);
    }

    #[test]
    fn whitened_error_is_svd_tail() {
        let dw = random(6, 6, 6);
        let wf = whitening_for(7, 6);
        let r = refine_residual(&dw, &wf, 3).unwrap();
        let corr = r.factor.correction().unwrap();
        let resid = whiten(&(&dw - &corr), &wf).unwrap().norm();
        let tail = svd(&whiten(&dw, &wf).unwrap()).unwrap().tail_energy(3).sqrt();
        assert!((resid - tail).abs() < 1e-9);
        assert!(resid <= whiten(&dw, &wf).unwrap().norm());
    }

    #[test]
    fn refine_rejects_large_rank() {
        let dw = random(3, 2, 1);
        assert!(refine_residual(&dw, &CholeskyFactor::identity(3), 3).is_err());
    }

    #[test]
    fn tail_sums_match_reverse_summation() {
        let sigma = [3.5, 2.25, 1.0, 0.3, 0.1];
        let t = tail_sums(&sigma);
        for r in 0..=sigma.len() {
            let mut naive = 0.0;
            for s in sigma[r..].iter().rev() {
                naive += s * s;
            }
            assert_eq!(t[r], naive);
        }
    }

    #[test]
    fn zero_b_tail_keeps_initial() {
        // beta = 0.5, m = n = k = 8 -> initial ranks 2, 2; B has nothing beyond rank 2,
        // and giving up B's second direction costs more than any A gain
        let sa = [5.0, 4.0, 1.0, 0.75, 0.5, 0.5, 0.25, 0.125];
        let sb = [3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let alloc = balanced_rank_allocation(&sa, &sb, 8, 8, 8, 0.5, None).unwrap();
        assert_eq!(alloc.initial, (2, 2));
        assert_eq!((alloc.r_a, alloc.r_b), (2, 2));
        let a_tail: f64 = sa[2..].iter().map(|s| s * s).sum();
        assert!((alloc.e_min - a_tail).abs() < 1e-12);
    }

    #[test]
    fn zero_spectra_zero_error() {
        let z = [0.0; 6];
        let alloc = balanced_rank_allocation(&z, &z, 6, 6, 6, 0.4, None).unwrap();
        assert_eq!(alloc.e_min, 0.0);
        assert_eq!((alloc.r_a, alloc.r_b), alloc.initial);
    }

    #[test]
    fn mirrored_walk_finds_a_heavy_split() {
        // A carries its energy in the top 3 values; B is flat. Moving rank
        // from B into A is the only improving direction.
        let mut sa = vec![10.0, 9.0, 8.0];
        sa.extend(std::iter::repeat(0.1).take(13));
        let sb = vec![1.0; 16];
        // m = n = k = 16, beta = 0.75 -> initial ranks 2, 2
        let alloc = balanced_rank_allocation(&sa, &sb, 16, 16, 16, 0.75, None).unwrap();
        assert_eq!(alloc.initial, (2, 2));
        assert_eq!((alloc.r_a, alloc.r_b), (3, 1));
        assert!(alloc.e_min < alloc.initial_error);
        // brute force over every pair on either trajectory through (2, 2)
        let naive = |s: &[f64], r: usize| s[r..].iter().map(|v| v * v).sum::<f64>();
        let best = (1..=3)
            .map(|ra| naive(&sa, ra) + naive(&sb, 4 - ra))
            .fold(f64::INFINITY, f64::min);
        assert!((alloc.e_min - best).abs() < 1e-12);
    }

    #[test]
    fn iteration_budget_limits_moves() {
        let sa = [1.0; 8];
        let mut sb = vec![9.0; 6];
        sb.extend([0.0, 0.0]);
        // beta = 0.25 -> initial ranks 3, 3
        let full = balanced_rank_allocation(&sa, &sb, 8, 8, 8, 0.25, None).unwrap();
        let capped = balanced_rank_allocation(&sa, &sb, 8, 8, 8, 0.25, Some(1)).unwrap();
        assert_eq!(full.initial, (3, 3));
        assert_eq!((full.r_a, full.r_b), (1, 5));
        assert_eq!((capped.r_a, capped.r_b), (2, 4));
        let none = balanced_rank_allocation(&sa, &sb, 8, 8, 8, 0.25, Some(0)).unwrap();
        assert_eq!((none.r_a, none.r_b), none.initial);
    }

    #[test]
    fn allocation_input_validation() {
        assert!(balanced_rank_allocation(&[], &[1.0], 2, 2, 2, 0.5, None).is_err());
        assert!(balanced_rank_allocation(&[1.0, 2.0], &[1.0], 2, 2, 2, 0.5, None).is_err());
        assert!(balanced_rank_allocation(&[1.0], &[1.0], 2, 2, 2, 1.0, None).is_err());
        assert!(balanced_rank_allocation(&[1.0; 3], &[1.0], 2, 2, 2, 0.5, None).is_err());
    }
}
