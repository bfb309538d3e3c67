//! Matrix atom sharing: dictionaries of shared `d × h` atoms, per-layer
//! mixing coefficients, and the arithmetic around them.
//!
//! A layer's projection weight is `Ŵ_l = Σ_s c_ls · D_s`. Stacking the
//! column-major vectorizations of every layer's weight side by side gives
//! the equivalent matrix form `W ≈ D·C`, which is what Matrix PCA works on.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::gelu;
use crate::compress::grouping::GroupSpec;
use crate::compress::refine::ResidualFactor;
use crate::error::{MasaError, Result};
use crate::linalg::{ensure_finite, frobenius_dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProjectionKind {
    Query,
    Key,
    Value,
    Output,
}

impl ProjectionKind {
    pub const ALL: [ProjectionKind; 4] = [
        ProjectionKind::Query,
        ProjectionKind::Key,
        ProjectionKind::Value,
        ProjectionKind::Output,
    ];

    /// Short tag used in tensor names.
    pub fn tag(self) -> &'static str {
        match self {
            ProjectionKind::Query => "q",
            ProjectionKind::Key => "k",
            ProjectionKind::Value => "v",
            ProjectionKind::Output => "o",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which attention projections are expressed through shared atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingMode {
    Dense,
    Qkv,
    Qkvo,
}

impl SharingMode {
    pub fn shares(self, kind: ProjectionKind) -> bool {
        match self {
            SharingMode::Dense => false,
            SharingMode::Qkv => kind != ProjectionKind::Output,
            SharingMode::Qkvo => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SharingMode::Dense => "dense",
            SharingMode::Qkv => "qkv",
            SharingMode::Qkvo => "qkvo",
        }
    }
}

impl std::str::FromStr for SharingMode {
    type Err = MasaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(SharingMode::Dense),
            "qkv" => Ok(SharingMode::Qkv),
            "qkvo" => Ok(SharingMode::Qkvo),
            other => Err(MasaError::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// Ordered set of `S` equally shaped atoms for one projection kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomDictionary {
    atoms: Vec<Matrix>,
    projection: ProjectionKind,
    orthonormal: bool,
}

impl AtomDictionary {
    pub fn new(atoms: Vec<Matrix>, projection: ProjectionKind) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| MasaError::invalid("dictionary needs at least one atom"))?;
        let shape = first.shape();
        for (s, atom) in atoms.iter().enumerate() {
            if atom.shape() != shape {
                return Err(MasaError::shape(format!(
                    "atom {s} is {:?}, expected {shape:?}",
                    atom.shape()
                )));
            }
            ensure_finite(atom, &format!("atom {s} of {projection}"))?;
        }
        Ok(Self {
            atoms,
            projection,
            orthonormal: false,
        })
    }

    /// Builds a dictionary flagged as trace-orthonormal, verifying
    /// `tr(D_iᵀD_j) = δ_ij` within `1e-8`.
    pub fn new_orthonormal(atoms: Vec<Matrix>, projection: ProjectionKind) -> Result<Self> {
        let mut dict = Self::new(atoms, projection)?;
        let gram = dict.gram();
        let dev = (gram - Matrix::identity(dict.len(), dict.len())).amax();
        if dev > 1e-8 {
            return Err(MasaError::invalid(format!(
                "atoms are not trace-orthonormal (max deviation {dev:e})"
            )));
        }
        dict.orthonormal = true;
        Ok(dict)
    }

    /// Atoms drawn from `N(0, 1/d)`; paired with coefficients of variance
    /// `1/S` the reconstructed weights match the dense init variance.
    pub fn random_init<R: Rng>(
        projection: ProjectionKind,
        num_atoms: usize,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_atoms == 0 {
            return Err(MasaError::invalid("num_atoms must be >= 1"));
        }
        let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
        let atoms = (0..num_atoms)
            .map(|_| Matrix::from_fn(rows, cols, |_, _| normal.sample(rng)))
            .collect();
        Self::new(atoms, projection)
    }

    pub fn atoms(&self) -> &[Matrix] {
        &self.atoms
    }

    pub fn atoms_mut(&mut self) -> &mut [Matrix] {
        self.orthonormal = false;
        &mut self.atoms
    }

    pub fn into_atoms(self) -> Vec<Matrix> {
        self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom_shape(&self) -> (usize, usize) {
        self.atoms[0].shape()
    }

    pub fn projection(&self) -> ProjectionKind {
        self.projection
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormal
    }

    /// `S × S` matrix of `tr(D_iᵀD_j)`.
    pub fn gram(&self) -> Matrix {
        let s = self.len();
        Matrix::from_fn(s, s, |i, j| frobenius_dot(&self.atoms[i], &self.atoms[j]))
    }
}

/// `S × L` mixing coefficients; column `l` mixes the atoms for layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    values: Matrix,
}

impl CoefficientMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        ensure_finite(&values, "coefficient matrix")?;
        Ok(Self { values })
    }

    pub fn random_init<R: Rng>(num_atoms: usize, num_layers: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (num_atoms as f64).sqrt()).expect("valid std");
        Self {
            values: Matrix::from_fn(num_atoms, num_layers, |_, _| normal.sample(rng)),
        }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    pub fn num_atoms(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.values.ncols()
    }

    pub fn layer(&self, l: usize) -> Vec<f64> {
        self.values.column(l).iter().copied().collect()
    }
}

/// `Σ_s c_s · D_s` for an explicit coefficient vector.
pub fn combine_atoms(atoms: &[Matrix], coeffs: &[f64]) -> Matrix {
    let (r, c) = atoms[0].shape();
    let mut out = Matrix::zeros(r, c);
    for (atom, &w) in atoms.iter().zip(coeffs) {
        for (o, a) in out.iter_mut().zip(atom.iter()) {
            *o += w * a;
        }
    }
    out
}

/// Layer `l`'s weight `Ŵ_l = Σ_s c_ls · D_s`.
pub fn reconstruct_weight(
    dict: &AtomDictionary,
    coeffs: &CoefficientMatrix,
    layer: usize,
) -> Result<Matrix> {
    if dict.len() != coeffs.num_atoms() {
        return Err(MasaError::shape(format!(
            "dictionary has {} atoms but coefficients have {} rows",
            dict.len(),
            coeffs.num_atoms()
        )));
    }
    if layer >= coeffs.num_layers() {
        return Err(MasaError::invalid(format!(
            "layer {layer} out of range for {} layers",
            coeffs.num_layers()
        )));
    }
    Ok(combine_atoms(dict.atoms(), &coeffs.layer(layer)))
}

/// Column-major vectorization `vec(W)`.
pub fn vectorize(m: &Matrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(MasaError::shape(format!(
            "vector of length {} cannot be reshaped to {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Matrix::from_column_slice(rows, cols, v))
}

/// `[vec(W_1) … vec(W_L)]`, a `(d·h) × L` matrix.
pub fn stack_vectorized(weights: &[Matrix]) -> Result<Matrix> {
    let first = weights
        .first()
        .ok_or_else(|| MasaError::invalid("cannot stack an empty weight list"))?;
    let (r, c) = first.shape();
    let mut out = Matrix::zeros(r * c, weights.len());
    for (l, w) in weights.iter().enumerate() {
        if w.shape() != (r, c) {
            return Err(MasaError::shape(format!(
                "weight {l} is {:?}, expected {:?}",
                w.shape(),
                (r, c)
            )));
        }
        out.column_mut(l).copy_from_slice(w.as_slice());
    }
    Ok(out)
}

/// Splits a stacked matrix back into `rows × cols` weights.
pub fn unstack_vectorized(stacked: &Matrix, rows: usize, cols: usize) -> Result<Vec<Matrix>> {
    if stacked.nrows() != rows * cols {
        return Err(MasaError::shape(format!(
            "stacked matrix has {} rows, expected {}",
            stacked.nrows(),
            rows * cols
        )));
    }
    stacked
        .column_iter()
        .map(|col| unvectorize(col.as_slice(), rows, cols))
        .collect()
}

/// Fraction of one projection kind's parameters removed by sharing `S`
/// atoms across `L` layers: `1 − S(d·h + L)/(L·d·h)`. Negative when the
/// coefficient overhead outweighs the savings.
pub fn projection_compression_ratio(s: usize, l: usize, d: usize, h: usize) -> f64 {
    let (s, l, dh) = (s as f64, l as f64, (d * h) as f64);
    1.0 - s * (dh + l) / (l * dh)
}

/// Attention-module ratio given the per-projection ratio. With dense `O`
/// only three of the four equally sized projections are compressed.
pub fn attention_module_cr(mode: SharingMode, per_projection: f64) -> f64 {
    match mode {
        SharingMode::Dense => 0.0,
        SharingMode::Qkv => 0.75 * per_projection,
        SharingMode::Qkvo => per_projection,
    }
}

/// `Φ(D_i, D_j) = tr(D_iᵀD_j) / (‖D_i‖_F ‖D_j‖_F)`.
pub fn atom_cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MasaError::shape(format!(
            "atoms have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(MasaError::invalid("cosine similarity of a zero-norm atom"));
    }
    Ok(frobenius_dot(a, b) / (na * nb))
}

/// All pairwise [`atom_cosine_similarity`] values of a dictionary.
pub fn similarity_matrix(dict: &AtomDictionary) -> Result<Matrix> {
    let s = dict.len();
    let mut out = Matrix::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            out[(i, j)] = atom_cosine_similarity(&dict.atoms()[i], &dict.atoms()[j])?;
        }
    }
    Ok(out)
}

/// One trainable embedding per transformer block, stored as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEmbeddingTable {
    pub embeddings: Matrix,
}

impl BlockEmbeddingTable {
    pub fn new(embeddings: Matrix) -> Result<Self> {
        ensure_finite(&embeddings, "block embedding table")?;
        Ok(Self { embeddings })
    }

    pub fn random_init<R: Rng>(num_layers: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        Self {
            embeddings: Matrix::from_fn(num_layers, dim, |_, _| normal.sample(rng)),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn row(&self, l: usize) -> Vec<f64> {
        self.embeddings.row(l).iter().copied().collect()
    }
}

/// Three affine layers `E → H → H → S`, GeLU after the first two.
///
/// Weights are stored `fan_in × fan_out` and biases as `1 × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

impl CoefficientMlp {
    /// Hidden width used for a dictionary of `S` atoms.
    pub fn default_hidden(num_atoms: usize) -> usize {
        (4 * num_atoms).max(32)
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, hidden),
            b2: Matrix::zeros(1, hidden),
            w3: Matrix::zeros(hidden, output),
            b3: Matrix::zeros(1, output),
        }
    }

    pub fn random_init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut mlp = Self::zeros(input, hidden, output);
        let fill = |m: &mut Matrix, std: f64, rng: &mut R| {
            let normal = Normal::new(0.0, std).expect("valid std");
            m.iter_mut().for_each(|v| *v = normal.sample(rng));
        };
        fill(&mut mlp.w1, 1.0 / (input as f64).sqrt(), rng);
        fill(&mut mlp.w2, 1.0 / (hidden as f64).sqrt(), rng);
        fill(
            &mut mlp.w3,
            1.0 / ((hidden * output) as f64).sqrt(),
            rng,
        );
        mlp
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w3.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (e, h, s) = (self.input_dim(), self.hidden_dim(), self.output_dim());
        let expect = [
            ("w1", &self.w1, (e, h)),
            ("b1", &self.b1, (1, h)),
            ("w2", &self.w2, (h, h)),
            ("b2", &self.b2, (1, h)),
            ("w3", &self.w3, (h, s)),
            ("b3", &self.b3, (1, s)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(MasaError::shape(format!(
                    "mlp {name} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            ensure_finite(m, &format!("mlp {name}"))?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
            .iter()
            .map(|m| m.len())
            .sum()
    }

    /// Forward pass for a single input row.
    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let h1: Vec<f64> = affine_row(x, &self.w1, &self.b1).into_iter().map(gelu).collect();
        let h2: Vec<f64> = affine_row(&h1, &self.w2, &self.b2).into_iter().map(gelu).collect();
        affine_row(&h2, &self.w3, &self.b3)
    }
}

/// `x·W + b` for one row, accumulated in a fixed order.
pub(crate) fn affine_row(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| {
            let col = w.column(j);
            let mut acc = 0.0;
            for (xi, wi) in x.iter().zip(col.iter()) {
                acc += xi * wi;
            }
            acc + b[(0, j)]
        })
        .collect()
}

/// Coefficient vector `c_l = mlp(e_l)` for one block.
pub fn coeff_from_mlp(
    table: &BlockEmbeddingTable,
    mlp: &CoefficientMlp,
    layer: usize,
) -> Result<Vec<f64>> {
    if table.dim() != mlp.input_dim() {
        return Err(MasaError::shape(format!(
            "embedding dim {} does not match mlp input {}",
            table.dim(),
            mlp.input_dim()
        )));
    }
    if layer >= table.num_layers() {
        return Err(MasaError::invalid(format!(
            "layer {layer} out of range for {} embeddings",
            table.num_layers()
        )));
    }
    Ok(mlp.forward_row(&table.row(layer)))
}

/// Evaluates the MLP for every block and freezes the result as `C`.
pub fn bake_coefficients(
    table: &BlockEmbeddingTable,
    mlp: &CoefficientMlp,
) -> Result<CoefficientMatrix> {
    let l = table.num_layers();
    let mut values = Matrix::zeros(mlp.output_dim(), l);
    for layer in 0..l {
        let c = coeff_from_mlp(table, mlp, layer)?;
        values.column_mut(layer).copy_from_slice(&c);
    }
    CoefficientMatrix::new(values)
}

/// Where a shared projection's mixing coefficients come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientSource {
    Direct(CoefficientMatrix),
    Mlp {
        table: BlockEmbeddingTable,
        mlp: CoefficientMlp,
    },
}

impl CoefficientSource {
    pub fn resolve(&self) -> Result<CoefficientMatrix> {
        match self {
            CoefficientSource::Direct(c) => Ok(c.clone()),
            CoefficientSource::Mlp { table, mlp } => bake_coefficients(table, mlp),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            CoefficientSource::Direct(c) => c.values().len(),
            CoefficientSource::Mlp { table, mlp } => table.embeddings.len() + mlp.parameter_count(),
        }
    }
}

/// One projection kind stored through a dictionary.
///
/// `layout` is `Some` for compressed checkpoints whose atoms are split
/// into per-group blocks; the coefficient matrix is then block-sparse.
/// `residuals` holds optional whitened low-rank corrections per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedProjection {
    pub dictionary: AtomDictionary,
    pub coefficients: CoefficientSource,
    pub layout: Option<GroupSpec>,
    pub residuals: Vec<Option<ResidualFactor>>,
}

impl SharedProjection {
    pub fn new(dictionary: AtomDictionary, coefficients: CoefficientSource, num_layers: usize) -> Self {
        Self {
            dictionary,
            coefficients,
            layout: None,
            residuals: vec![None; num_layers],
        }
    }

    /// Per-layer weights including any residual corrections.
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        let coeffs = self.coefficients.resolve()?;
        (0..coeffs.num_layers())
            .map(|l| {
                let mut w = reconstruct_weight(&self.dictionary, &coeffs, l)?;
                if let Some(Some(res)) = self.residuals.get(l) {
                    w += res.correction()?;
                }
                Ok(w)
            })
            .collect()
    }

    /// Parameters needed at inference time. Whitening factors are
    /// excluded as they can be folded into the left residual factor.
    pub fn parameter_count(&self) -> usize {
        let (d, h) = self.dictionary.atom_shape();
        let atoms = self.dictionary.len() * d * h;
        let coeffs = match (&self.layout, &self.coefficients) {
            (Some(groups), CoefficientSource::Direct(_)) => groups.coefficient_count(),
            _ => self.coefficients.parameter_count(),
        };
        let resid: usize = self
            .residuals
            .iter()
            .flatten()
            .map(|r| r.left.len() + r.right.len())
            .sum();
        atoms + coeffs + resid
    }
}

/// Storage of one projection kind across all layers.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionStorage {
    Dense(Vec<Matrix>),
    Shared(SharedProjection),
}

impl ProjectionStorage {
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        match self {
            ProjectionStorage::Dense(ws) => Ok(ws.clone()),
            ProjectionStorage::Shared(sp) => sp.effective_weights(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            ProjectionStorage::Dense(ws) => ws.iter().map(|w| w.len()).sum(),
            ProjectionStorage::Shared(sp) => sp.parameter_count(),
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, ProjectionStorage::Shared(_))
    }
}

/// The four attention projections of a model, each dense or shared.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedProjectionSet {
    pub mode: SharingMode,
    pub projections: [ProjectionStorage; 4],
}

impl SharedProjectionSet {
    pub fn new(mode: SharingMode, projections: [ProjectionStorage; 4]) -> Result<Self> {
        let set = Self { mode, projections };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for kind in ProjectionKind::ALL {
            let shared = self.get(kind).is_shared();
            if shared != self.mode.shares(kind) {
                return Err(MasaError::invalid(format!(
                    "projection {kind} is {} but mode {} requires it {}",
                    if shared { "shared" } else { "dense" },
                    self.mode.as_str(),
                    if self.mode.shares(kind) { "shared" } else { "dense" },
                )));
            }
            if let ProjectionStorage::Shared(sp) = self.get(kind) {
                if sp.dictionary.projection() != kind {
                    return Err(MasaError::invalid(format!(
                        "dictionary for {} stored under {kind}",
                        sp.dictionary.projection()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, kind: ProjectionKind) -> &ProjectionStorage {
        &self.projections[kind.index()]
    }

    pub fn get_mut(&mut self, kind: ProjectionKind) -> &mut ProjectionStorage {
        &mut self.projections[kind.index()]
    }

    pub fn parameter_count(&self) -> usize {
        self.projections.iter().map(|p| p.parameter_count()).sum()
    }

    /// Replaces every MLP coefficient source with its baked matrix.
    pub fn bake(&mut self) -> Result<()> {
        for p in self.projections.iter_mut() {
            if let ProjectionStorage::Shared(sp) = p {
                if matches!(sp.coefficients, CoefficientSource::Mlp { .. }) {
                    sp.coefficients = CoefficientSource::Direct(sp.coefficients.resolve()?);
                }
            }
        }
        Ok(())
    }
}
