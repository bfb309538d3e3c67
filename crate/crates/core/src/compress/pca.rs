//! Closed-form Matrix PCA.
//!
//! The `S` trace-orthonormal atoms minimizing `Σ_l ‖W_l − Σ_s tr(D_sᵀW_l) D_s‖_F²`
//! are the top left singular vectors of the stacked matrix
//! `[vec(W_1) … vec(W_L)]`, reshaped back to `d × h`.

use crate::error::{MasaError, Result};
use crate::linalg::{frobenius_dot, svd, Matrix};
use crate::masa::{
    combine_atoms, stack_vectorized, unvectorize, AtomDictionary, CoefficientMatrix,
    ProjectionKind,
};

#[derive(Debug, Clone)]
pub struct PcaResult {
    pub dictionary: AtomDictionary,
    pub coefficients: CoefficientMatrix,
    /// Squared Frobenius reconstruction error summed over layers.
    pub error: f64,
    /// Singular values of the stacked matrix, descending.
    pub singular_values: Vec<f64>,
}

/// Extracts `s` principal matrix atoms from `weights`.
pub fn matrix_pca(weights: &[Matrix], s: usize, projection: ProjectionKind) -> Result<PcaResult> {
    let l = weights.len();
    if s == 0 || s > l {
        return Err(MasaError::invalid(format!(
            "basis count {s} outside [1, {l}]"
        )));
    }
    let stacked = stack_vectorized(weights)?;
    let (rows, cols) = weights[0].shape();
    if s > rows * cols {
        return Err(MasaError::invalid(format!(
            "cannot extract {s} orthonormal atoms from {rows}x{cols} matrices"
        )));
    }
    let dec = svd(&stacked)?;
    let atoms = (0..s)
        .map(|j| unvectorize(dec.left_vectors.column(j).as_slice(), rows, cols))
        .collect::<Result<Vec<_>>>()?;
    let dictionary = AtomDictionary::new_orthonormal(atoms, projection)?;
    let coefficients = project_coefficients(&dictionary, weights)?;
    Ok(PcaResult {
        error: dec.tail_energy(s),
        singular_values: dec.singular_values,
        dictionary,
        coefficients,
    })
}

/// `c_ls = tr(D_sᵀW_l)` for every atom and layer.
pub fn project_coefficients(dict: &AtomDictionary, weights: &[Matrix]) -> Result<CoefficientMatrix> {
    let shape = dict.atom_shape();
    if let Some(w) = weights.iter().find(|w| w.shape() != shape) {
        return Err(MasaError::shape(format!(
            "weight is {:?} but atoms are {shape:?}",
            w.shape()
        )));
    }
    let values = Matrix::from_fn(dict.len(), weights.len(), |s, l| {
        frobenius_dot(&dict.atoms()[s], &weights[l])
    });
    CoefficientMatrix::new(values)
}

/// `Σ_l ‖W_l − Σ_s tr(D_sᵀW_l) D_s‖_F²` for an orthonormal dictionary.
pub fn pca_reconstruction_error(weights: &[Matrix], dict: &AtomDictionary) -> Result<f64> {
    if !dict.is_orthonormal() {
        return Err(MasaError::invalid(
            "projector error requires a trace-orthonormal dictionary",
        ));
    }
    let coeffs = project_coefficients(dict, weights)?;
    Ok(weights
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let approx = combine_atoms(dict.atoms(), &coeffs.layer(l));
            (w - approx).norm_squared()
        })
        .sum())
}
