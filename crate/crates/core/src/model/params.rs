//! Model parameters and their canonical tensor names.
//!
//! Names double as gradient keys on the tape and as checkpoint tensor
//! names, so a parameter is addressed the same way everywhere.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::compress::{GroupSpec, ResidualFactor};
use crate::error::{MasaError, Result};
use crate::linalg::{ensure_finite, CholeskyFactor, Matrix};
use crate::masa::{
    AtomDictionary, BlockEmbeddingTable, CoefficientMatrix, CoefficientMlp, CoefficientSource,
    ProjectionKind, ProjectionStorage, SharedProjection, SharedProjectionSet, SharingMode,
};
use crate::model::config::{CoefficientPath, ToyConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    /// `d × ffn_dim`
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    /// `ffn_dim × d`
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ToyConfig,
    /// `vocab × d`
    pub tok_emb: Matrix,
    /// `context × d`
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockParams>,
    pub attention: SharedProjectionSet,
    pub ln_f_gain: Matrix,
    pub ln_f_bias: Matrix,
    /// `d × vocab`; `None` when the token embedding is reused.
    pub lm_head: Option<Matrix>,
}

pub fn dense_weight_name(kind: ProjectionKind, layer: usize) -> String {
    format!("attn.{}.layer{layer}.weight", kind.tag())
}

pub fn atom_name(kind: ProjectionKind, s: usize) -> String {
    format!("attn.{}.dict.{s}", kind.tag())
}

pub fn coeff_name(kind: ProjectionKind) -> String {
    format!("attn.{}.coeff", kind.tag())
}

pub fn mlp_name(kind: ProjectionKind, part: &str) -> String {
    format!("attn.{}.mlp.{part}", kind.tag())
}

pub fn resid_name(kind: ProjectionKind, layer: usize, side: &str) -> String {
    format!("attn.{}.resid.layer{layer}.{side}", kind.tag())
}

pub fn whitening_name(kind: ProjectionKind, layer: usize) -> String {
    format!("attn.{}.whitening.layer{layer}", kind.tag())
}

/// Label of the reconstructed (effective) weight on the tape.
pub fn effective_weight_name(kind: ProjectionKind, layer: usize) -> String {
    format!("attn.{}.layer{layer}.effective", kind.tag())
}

const MLP_PARTS: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

impl ModelParams {
    /// Seeded random initialization.
    pub fn init(config: &ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, v, f) = (config.model_dim, config.vocab_size, config.ffn_dim());
        let l = config.num_layers;
        let tok_emb = normal(v, d, 0.02, &mut rng);
        let pos_emb = normal(config.context, d, 0.02, &mut rng);
        let blocks = (0..l)
            .map(|_| BlockParams {
                ln1_gain: Matrix::from_element(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                ln2_gain: Matrix::from_element(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
                ffn_w1: normal(d, f, 1.0 / (d as f64).sqrt(), &mut rng),
                ffn_b1: Matrix::zeros(1, f),
                ffn_w2: normal(f, d, 1.0 / (f as f64).sqrt(), &mut rng),
                ffn_b2: Matrix::zeros(1, d),
            })
            .collect();
        let mut projections = Vec::with_capacity(4);
        for kind in ProjectionKind::ALL {
            let storage = if config.mode.shares(kind) {
                let s = config.num_atoms;
                let dictionary = AtomDictionary::random_init(kind, s, d, d, &mut rng)?;
                let coefficients = match config.coefficient_path {
                    CoefficientPath::Direct => CoefficientSource::Direct(CoefficientMatrix::random_init(s, l, &mut rng)),
                    CoefficientPath::Mlp => {
                        let e = config.embed_dim();
                        CoefficientSource::Mlp {
                            table: BlockEmbeddingTable::random_init(l, e, &mut rng),
                            mlp: CoefficientMlp::random_init(e, config.mlp_hidden(), s, &mut rng),
                        }
                    }
                };
                ProjectionStorage::Shared(SharedProjection::new(dictionary, coefficients, l))
            } else {
                ProjectionStorage::Dense((0..l).map(|_| normal(d, d, 1.0 / (d as f64).sqrt(), &mut rng)).collect())
            };
            projections.push(storage);
        }
        let lm_head = (!config.tie_embeddings).then(|| normal(d, v, 0.02, &mut rng));
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            attention: SharedProjectionSet::new(config.mode, projections.try_into().expect("four projections"))?,
            ln_f_gain: Matrix::from_element(1, d, 1.0),
            ln_f_bias: Matrix::zeros(1, d),
            lm_head,
        })
    }

    /// All-zero parameters with direct coefficients, laid out as a
    /// checkpoint with the given grouping would be.
    pub fn skeleton(config: &ToyConfig, layout: Option<&GroupSpec>) -> Result<Self> {
        let mut direct = config.clone();
        direct.coefficient_path = CoefficientPath::Direct;
        let mut params = Self::init(&direct)?;
        params.visit_mut(&mut |_, m| m.fill(0.0));
        for p in params.attention.projections.iter_mut() {
            if let ProjectionStorage::Shared(sp) = p {
                sp.layout = layout.cloned();
            }
        }
        Ok(params)
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// `d × vocab` unembedding.
    pub fn output_matrix(&self) -> std::borrow::Cow<'_, Matrix> {
        match &self.lm_head {
            Some(m) => std::borrow::Cow::Borrowed(m),
            None => std::borrow::Cow::Owned(self.tok_emb.transpose()),
        }
    }

    /// Visits every trainable tensor in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (l, b) in self.blocks.iter().enumerate() {
            f(&format!("block{l}.ln1.gain"), &b.ln1_gain);
            f(&format!("block{l}.ln1.bias"), &b.ln1_bias);
            f(&format!("block{l}.ln2.gain"), &b.ln2_gain);
            f(&format!("block{l}.ln2.bias"), &b.ln2_bias);
            f(&format!("block{l}.ffn.w1"), &b.ffn_w1);
            f(&format!("block{l}.ffn.b1"), &b.ffn_b1);
            f(&format!("block{l}.ffn.w2"), &b.ffn_w2);
            f(&format!("block{l}.ffn.b2"), &b.ffn_b2);
        }
        for kind in ProjectionKind::ALL {
            match self.attention.get(kind) {
                ProjectionStorage::Dense(ws) => {
                    for (l, w) in ws.iter().enumerate() {
                        f(&dense_weight_name(kind, l), w);
                    }
                }
                ProjectionStorage::Shared(sp) => {
                    for (s, a) in sp.dictionary.atoms().iter().enumerate() {
                        f(&atom_name(kind, s), a);
                    }
                    match &sp.coefficients {
                        CoefficientSource::Direct(c) => f(&coeff_name(kind), c.values()),
                        CoefficientSource::Mlp { table, mlp } => {
                            f(&mlp_name(kind, "table"), &table.embeddings);
                            for (part, m) in MLP_PARTS.iter().zip(mlp_tensors(mlp)) {
                                f(&mlp_name(kind, part), m);
                            }
                        }
                    }
                }
            }
        }
        f("ln_f.gain", &self.ln_f_gain);
        f("ln_f.bias", &self.ln_f_bias);
        if let Some(h) = &self.lm_head {
            f("lm_head", h);
        }
    }

    /// Mutable counterpart of [`ModelParams::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{l}.ln1.gain"), &mut b.ln1_gain);
            f(&format!("block{l}.ln1.bias"), &mut b.ln1_bias);
            f(&format!("block{l}.ln2.gain"), &mut b.ln2_gain);
            f(&format!("block{l}.ln2.bias"), &mut b.ln2_bias);
            f(&format!("block{l}.ffn.w1"), &mut b.ffn_w1);
            f(&format!("block{l}.ffn.b1"), &mut b.ffn_b1);
            f(&format!("block{l}.ffn.w2"), &mut b.ffn_w2);
            f(&format!("block{l}.ffn.b2"), &mut b.ffn_b2);
        }
        for kind in ProjectionKind::ALL {
            match self.attention.get_mut(kind) {
                ProjectionStorage::Dense(ws) => {
                    for (l, w) in ws.iter_mut().enumerate() {
                        f(&dense_weight_name(kind, l), w);
                    }
                }
                ProjectionStorage::Shared(sp) => {
                    for (s, a) in sp.dictionary.atoms_mut().iter_mut().enumerate() {
                        f(&atom_name(kind, s), a);
                    }
                    match &mut sp.coefficients {
                        CoefficientSource::Direct(c) => f(&coeff_name(kind), c.values_mut()),
                        CoefficientSource::Mlp { table, mlp } => {
                            f(&mlp_name(kind, "table"), &mut table.embeddings);
                            let CoefficientMlp { w1, b1, w2, b2, w3, b3 } = mlp;
                            for (part, m) in MLP_PARTS.iter().zip([w1, b1, w2, b2, w3, b3]) {
                                f(&mlp_name(kind, part), m);
                            }
                        }
                    }
                }
            }
        }
        f("ln_f.gain", &mut self.ln_f_gain);
        f("ln_f.bias", &mut self.ln_f_bias);
        if let Some(h) = &mut self.lm_head {
            f("lm_head", h);
        }
    }

    /// Trainable tensor names in visiting order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    pub fn get(&self, name: &str) -> Option<Matrix> {
        let mut found = None;
        self.visit(&mut |n, m| {
            if n == name {
                found = Some(m.clone());
            }
        });
        found
    }

    /// Every stored tensor: trainable ones plus frozen residual factors.
    pub fn tensors(&self) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        self.visit(&mut |n, m| {
            out.insert(n.to_string(), m.clone());
        });
        for kind in ProjectionKind::ALL {
            if let ProjectionStorage::Shared(sp) = self.attention.get(kind) {
                for (l, r) in sp.residuals.iter().enumerate() {
                    if let Some(r) = r {
                        out.insert(resid_name(kind, l, "left"), r.left.clone());
                        out.insert(resid_name(kind, l, "right"), r.right.clone());
                        out.insert(whitening_name(kind, l), r.whitening.lower.clone());
                    }
                }
            }
        }
        out
    }

    /// Rebuilds parameters from named tensors; every tensor must be used.
    pub fn from_tensors(
        config: &ToyConfig,
        layout: Option<&GroupSpec>,
        mut tensors: BTreeMap<String, Matrix>,
    ) -> Result<Self> {
        let mut params = Self::skeleton(config, layout)?;
        let mut failure = None;
        params.visit_mut(&mut |name, slot| {
            if failure.is_some() {
                return;
            }
            match tensors.remove(name) {
                None => failure = Some(MasaError::MissingTensor(name.to_string())),
                Some(m) if m.shape() != slot.shape() => {
                    failure = Some(MasaError::shape(format!(
                        "tensor {name} is {:?}, expected {:?}",
                        m.shape(),
                        slot.shape()
                    )))
                }
                Some(m) => *slot = m,
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        for kind in ProjectionKind::ALL {
            if let ProjectionStorage::Shared(sp) = params.attention.get_mut(kind) {
                for l in 0..config.num_layers {
                    let left = tensors.remove(&resid_name(kind, l, "left"));
                    let right = tensors.remove(&resid_name(kind, l, "right"));
                    let white = tensors.remove(&whitening_name(kind, l));
                    match (left, right, white) {
                        (None, None, None) => {}
                        (Some(left), Some(right), Some(lower)) => {
                            let d = config.model_dim;
                            if left.nrows() != d
                                || right.ncols() != d
                                || left.ncols() != right.nrows()
                                || lower.shape() != (d, d)
                            {
                                return Err(MasaError::shape(format!(
                                    "residual factors for {kind} layer {l} have inconsistent shapes"
                                )));
                            }
                            sp.residuals[l] = Some(ResidualFactor {
                                left,
                                right,
                                whitening: CholeskyFactor {
                                    lower,
                                    ridge_used: 0.0,
                                },
                            });
                        }
                        _ => {
                            return Err(MasaError::MissingTensor(format!(
                                "incomplete residual for {kind} layer {l}"
                            )))
                        }
                    }
                }
            }
        }
        if let Some(name) = tensors.keys().next() {
            return Err(MasaError::Header(format!("unexpected tensor {name}")));
        }
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.attention.validate()?;
        let mut bad = None;
        self.visit(&mut |n, m| {
            if bad.is_none() {
                bad = ensure_finite(m, n).err();
            }
        });
        bad.map_or(Ok(()), Err)
    }

    /// Replaces MLP-generated coefficients by their evaluated matrix.
    pub fn bake(&mut self) -> Result<()> {
        self.attention.bake()?;
        self.config.coefficient_path = CoefficientPath::Direct;
        Ok(())
    }

    pub fn is_baked(&self) -> bool {
        self.attention.projections.iter().all(|p| match p {
            ProjectionStorage::Shared(sp) => matches!(sp.coefficients, CoefficientSource::Direct(_)),
            ProjectionStorage::Dense(_) => true,
        })
    }

    /// Inference-time attention parameters.
    pub fn attention_parameter_count(&self) -> usize {
        self.attention.parameter_count()
    }

    pub fn dense_attention_parameter_count(&self) -> usize {
        4 * self.config.num_layers * self.config.model_dim * self.config.model_dim
    }

    /// Group layout of compressed projections, if any.
    pub fn layout(&self) -> Option<&GroupSpec> {
        self.attention.projections.iter().find_map(|p| match p {
            ProjectionStorage::Shared(sp) => sp.layout.as_ref(),
            ProjectionStorage::Dense(_) => None,
        })
    }

    /// Copy with dense attention in MASA form: `S = L` atoms equal to the
    /// layer weights and one-hot coefficients.
    pub fn as_masa_identity(&self, mode: SharingMode) -> Result<Self> {
        if self.config.mode != SharingMode::Dense {
            return Err(MasaError::invalid("identity embedding needs a dense model"));
        }
        let l = self.config.num_layers;
        let mut out = self.clone();
        out.config.mode = mode;
        out.config.num_atoms = l;
        out.config.coefficient_path = CoefficientPath::Direct;
        let mut projections = self.attention.projections.clone();
        for kind in ProjectionKind::ALL {
            if mode.shares(kind) {
                let ProjectionStorage::Dense(ws) = self.attention.get(kind) else {
                    unreachable!("dense model");
                };
                let dictionary = AtomDictionary::new(ws.clone(), kind)?;
                let coeffs = CoefficientMatrix::new(Matrix::identity(l, l))?;
                projections[kind.index()] =
                    ProjectionStorage::Shared(SharedProjection::new(dictionary, CoefficientSource::Direct(coeffs), l));
            }
        }
        out.attention = SharedProjectionSet::new(mode, projections)?;
        Ok(out)
    }
}

fn mlp_tensors(mlp: &CoefficientMlp) -> [&Matrix; 6] {
    [&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2, &mlp.w3, &mlp.b3]
}

/// Whether AdamW applies weight decay to the named tensor.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !matches!(last, "gain" | "bias" | "b1" | "b2" | "b3")
}
