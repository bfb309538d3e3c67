//! Dense linear algebra used throughout the crate.
//!
//! Everything is computed in `f64`. Decompositions are thin wrappers over
//! `nalgebra` that pin down the conventions the rest of the crate relies
//! on: singular values sorted descending, a deterministic sign for every
//! singular pair, and a ridge ladder for Cholesky factorization of
//! possibly rank-deficient Gram matrices.

use nalgebra::DMatrix;

use crate::error::{MasaError, Result};

/// Dense real matrix. Storage is column-major; indexing is `(row, col)`.
pub type Matrix = DMatrix<f64>;

/// Rejects matrices that are empty or contain NaN/inf.
pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(MasaError::shape(format!("{what} is empty ({}x{})", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MasaError::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Frobenius inner product `tr(AᵀB)`.
pub fn frobenius_dot(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Thin singular value decomposition `M = U·diag(σ)·Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m × k` with orthonormal columns.
    pub left_vectors: Matrix,
    /// Length `k`, nonnegative, descending.
    pub singular_values: Vec<f64>,
    /// `k × n` with orthonormal rows.
    pub right_vectors_t: Matrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.singular_values.len()
    }

    /// `U_r·diag(σ_r)` and `V_rᵀ`, the two factors of the rank-`r` truncation.
    pub fn truncated_factors(&self, r: usize) -> (Matrix, Matrix) {
        let r = r.min(self.rank_capacity());
        let mut left = self.left_vectors.columns(0, r).into_owned();
        for (j, mut col) in left.column_iter_mut().enumerate() {
            col *= self.singular_values[j];
        }
        let right = self.right_vectors_t.rows(0, r).into_owned();
        (left, right)
    }

    /// `U·diag(σ)·Vᵀ` over all retained pairs.
    pub fn reconstruct(&self) -> Matrix {
        let (l, r) = self.truncated_factors(self.rank_capacity());
        l * r
    }

    /// `Σ_{i>r} σ_i²`.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.singular_values.iter().skip(r).map(|s| s * s).sum()
    }
}

/// Thin SVD with `k = min(rows, cols)`.
///
/// Computed by one-sided Jacobi rotations on the orientation with fewer
/// columns. Singular values are sorted descending (stable on ties) and each
/// left singular vector is signed so that its largest-magnitude entry is
/// nonnegative, lowest index winning ties. The matching right singular
/// vector is flipped with it.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    ensure_finite(m, "svd input")?;
    let (u, sv, v) = if m.nrows() >= m.ncols() {
        jacobi_svd(m.clone())?
    } else {
        let (u, sv, v) = jacobi_svd(m.transpose())?;
        (v, sv, u)
    };
    let k = sv.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let mut left = Matrix::zeros(m.nrows(), k);
    let mut right = Matrix::zeros(k, m.ncols());
    let mut values = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let ucol = u.column(src);
        let mut pivot = 0usize;
        for i in 1..ucol.len() {
            if ucol[i].abs() > ucol[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if ucol[pivot] < 0.0 { -1.0 } else { 1.0 };
        left.set_column(dst, &(ucol * sign));
        right.set_row(dst, &(v.column(src).transpose() * sign));
        values.push(sv[src]);
    }
    Ok(SvdResult {
        left_vectors: left,
        singular_values: values,
        right_vectors_t: right,
    })
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// Hestenes one-sided Jacobi on a matrix with `rows >= cols`.
/// Returns `(U, σ, V)` unsorted with `A = U·diag(σ)·Vᵀ`.
fn jacobi_svd(mut a: Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (rows, n) = a.shape();
    let mut v = Matrix::identity(n, n);
    let tol = f64::EPSILON * rows as f64;
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (a.column(p), a.column(q));
                    (cp.norm_squared(), cq.norm_squared(), cp.dot(&cq))
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(MasaError::NonFinite("svd (jacobi sweeps did not converge)".into()));
    }
    let sv: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    if sv.iter().any(|x| !x.is_finite()) {
        return Err(MasaError::NonFinite("singular values".into()));
    }
    let mut u = Matrix::zeros(rows, n);
    let mut missing = Vec::new();
    for j in 0..n {
        if sv[j] > f64::MIN_POSITIVE {
            u.set_column(j, &(a.column(j) / sv[j]));
        } else {
            missing.push(j);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok((u, sv, v))
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * x - s * y;
        m[(i, q)] = s * x + c * y;
    }
}

/// Fills the listed zero columns with unit vectors orthogonal to the rest,
/// trying standard basis vectors in order (two Gram-Schmidt passes each).
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let rows = u.nrows();
    let mut filled: Vec<usize> = (0..u.ncols()).filter(|j| !missing.contains(j)).collect();
    let mut basis = 0usize;
    for &j in missing {
        while basis < rows {
            let mut cand = Matrix::zeros(rows, 1);
            cand[(basis, 0)] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let proj = u.column(f).dot(&cand.column(0));
                    cand -= u.column(f) * proj;
                }
            }
            let norm = cand.norm();
            if norm > 0.5 {
                u.set_column(j, &(cand.column(0) / norm));
                filled.push(j);
                break;
            }
        }
    }
}

/// Best Frobenius-norm rank-`r` approximation (Eckart–Young).
pub fn truncated_approx(m: &Matrix, r: usize) -> Result<Matrix> {
    let cap = m.nrows().min(m.ncols());
    if r == 0 || r > cap {
        return Err(MasaError::invalid(format!(
            "truncation rank {r} outside [1, {cap}]"
        )));
    }
    let dec = svd(m)?;
    let (l, rt) = dec.truncated_factors(r);
    Ok(l * rt)
}

/// Escalation ladder for Cholesky ridge regularization.
///
/// Each step adds `multiplier · mean(diag(A))` to the diagonal; the first
/// step that factors successfully wins.
#[derive(Debug, Clone)]
pub struct RidgePolicy {
    pub multipliers: Vec<f64>,
}

impl Default for RidgePolicy {
    fn default() -> Self {
        Self {
            multipliers: vec![0.0, 1e-10, 1e-8, 1e-6, 1e-4],
        }
    }
}

impl RidgePolicy {
    /// Only attempt the unregularized factorization.
    pub fn none() -> Self {
        Self {
            multipliers: vec![0.0],
        }
    }
}

/// Lower Cholesky factor with the ridge that was needed to obtain it.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub lower: Matrix,
    pub ridge_used: f64,
}

impl CholeskyFactor {
    pub fn identity(n: usize) -> Self {
        Self {
            lower: Matrix::identity(n, n),
            ridge_used: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }
}

/// Factors `(A + Aᵀ)/2 + ridge·I = L·Lᵀ`, escalating the ridge per `policy`.
pub fn cholesky(a: &Matrix, policy: &RidgePolicy, name: &str) -> Result<CholeskyFactor> {
    if a.nrows() != a.ncols() {
        return Err(MasaError::shape(format!(
            "{name} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    ensure_finite(a, name)?;
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let mean_diag = sym.diagonal().sum() / n as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };

    let mut last_ridge = 0.0;
    for &mult in &policy.multipliers {
        let ridge = mult * scale;
        last_ridge = ridge;
        let mut shifted = sym.clone();
        for i in 0..n {
            shifted[(i, i)] += ridge;
        }
        if let Some(ch) = shifted.cholesky() {
            let lower = ch.unpack();
            let ok = (0..n).all(|i| lower[(i, i)] > 0.0) && lower.iter().all(|v| v.is_finite());
            if ok {
                return Ok(CholeskyFactor {
                    lower,
                    ridge_used: ridge,
                });
            }
        }
    }
    Err(MasaError::Cholesky {
        name: name.to_string(),
        ridge: last_ridge,
    })
}

/// Solves `L·X = B` by forward substitution.
pub fn solve_lower_triangular(l: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    if l.dim() != b.nrows() {
        return Err(MasaError::shape(format!(
            "triangular factor is {n}x{n} but right-hand side has {} rows",
            b.nrows(),
            n = l.dim()
        )));
    }
    l.lower
        .solve_lower_triangular(b)
        .ok_or_else(|| MasaError::NonFinite("lower triangular solve".into()))
}

/// Solves `Lᵀ·X = B` by back substitution on the transposed factor.
pub fn solve_lower_transposed(l: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    if l.dim() != b.nrows() {
        return Err(MasaError::shape(format!(
            "triangular factor is {n}x{n} but right-hand side has {} rows",
            b.nrows(),
            n = l.dim()
        )));
    }
    l.lower
        .tr_solve_lower_triangular(b)
        .ok_or_else(|| MasaError::NonFinite("transposed triangular solve".into()))
}
