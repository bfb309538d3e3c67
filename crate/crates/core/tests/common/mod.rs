//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use masakit_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Column-major flattening written out by hand.
pub fn flatten(m: &Matrix) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn frob2(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues descending with eigenvectors as columns.
pub fn jacobi_eigen(sym: &Matrix) -> (Vec<f64>, Matrix) {
    let n = sym.nrows();
    let mut a = sym.clone();
    let mut v = Matrix::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let scale: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let vals = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Singular values from the eigenvalues of `MᵀM` or `MMᵀ`.
pub fn singular_values_via_gram(m: &Matrix) -> Vec<f64> {
    let g = if m.nrows() >= m.ncols() {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    jacobi_eigen(&g).0.into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

/// Gram-route Matrix PCA: the `L × L` Gram matrix of vectorized weights.
pub struct GramPca {
    /// Eigenvalues of the Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Projector onto the span of the top-`s` vectorized atoms.
    pub projector: Matrix,
}

pub fn gram_pca(weights: &[Matrix], s: usize) -> GramPca {
    let cols: Vec<Vec<f64>> = weights.iter().map(flatten).collect();
    let l = cols.len();
    let dim = cols[0].len();
    let gram = Matrix::from_fn(l, l, |i, j| dot(&cols[i], &cols[j]));
    let (vals, vecs) = jacobi_eigen(&gram);
    let mut projector = Matrix::zeros(dim, dim);
    for e in 0..s {
        let norm = vals[e].max(1e-300).sqrt();
        let atom: Vec<f64> = (0..dim)
            .map(|r| (0..l).map(|i| cols[i][r] * vecs[(i, e)]).sum::<f64>() / norm)
            .collect();
        for r in 0..dim {
            for c in 0..dim {
                projector[(r, c)] += atom[r] * atom[c];
            }
        }
    }
    GramPca {
        eigenvalues: vals,
        projector,
    }
}

/// `Σ_{i ≥ r} σ_i²` summed from the smallest value upward.
pub fn naive_tail(sigma: &[f64], r: usize) -> f64 {
    let mut acc = 0.0;
    for s in sigma.iter().skip(r).rev() {
        acc += s * s;
    }
    acc
}

/// Descending nonnegative spectrum of the given length.
pub fn spectrum<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut s: Vec<f64> = (0..len)
        .map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(0.0..10.0) })
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Minimum combined tail over every state both trajectories of the
/// balanced allocation can visit, starting from the rank rule.
pub fn allocation_oracle(sa: &[f64], sb: &[f64], m: usize, n: usize, k: usize, beta: f64) -> f64 {
    let init = |a: usize, b: usize| {
        let raw = ((1.0 - beta) * (a * b) as f64 / (a + b) as f64).floor() as usize;
        raw.clamp(1, a.min(b))
    };
    let (ra0, rb0) = (init(m, n), init(m, k));
    let (cap_a, cap_b) = (m.min(n), m.min(k));
    let e = |ra: usize, rb: usize| naive_tail(sa, ra) + naive_tail(sb, rb);
    let mut best = e(ra0, rb0);
    let (mut ra, mut rb) = (ra0, rb0);
    while ra > 1 && rb < cap_b {
        ra -= 1;
        rb += 1;
        best = best.min(e(ra, rb));
    }
    let (mut ra, mut rb) = (ra0, rb0);
    while rb > 1 && ra < cap_a {
        rb -= 1;
        ra += 1;
        best = best.min(e(ra, rb));
    }
    best
}
