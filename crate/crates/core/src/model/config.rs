//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{MasaError, Result};
use crate::masa::SharingMode;

/// How shared-projection mixing coefficients are parameterized in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientPath {
    /// Per-block embedding fed through a small MLP; baked into `C` on save.
    #[default]
    Mlp,
    /// `C` trained as a free `S × L` matrix.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Longest sequence the positional table covers.
    #[serde(default = "default_context")]
    pub context: usize,
    pub mode: SharingMode,
    #[serde(default)]
    pub num_atoms: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub coefficient_path: CoefficientPath,
    /// Block-embedding width for the MLP path; `None` means `S`.
    #[serde(default)]
    pub embed_dim: Option<usize>,
    /// MLP hidden width; `None` means `max(4S, 32)`.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_vocab() -> usize {
    256
}

fn default_context() -> usize {
    128
}

impl ToyConfig {
    pub fn new(num_layers: usize, model_dim: usize, num_heads: usize, mode: SharingMode, num_atoms: usize) -> Self {
        Self {
            num_layers,
            model_dim,
            num_heads,
            ffn_mult: default_ffn_mult(),
            vocab_size: default_vocab(),
            context: default_context(),
            mode,
            num_atoms,
            seed: 0,
            tie_embeddings: false,
            coefficient_path: CoefficientPath::Mlp,
            embed_dim: None,
            mlp_hidden: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.model_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim.unwrap_or(self.num_atoms)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden
            .unwrap_or_else(|| crate::masa::CoefficientMlp::default_hidden(self.num_atoms))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 {
            return Err(MasaError::invalid("layers, dim and heads must be positive"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(MasaError::invalid(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.vocab_size > 256 {
            return Err(MasaError::invalid(format!(
                "vocab size {} outside [1, 256] for byte tokens",
                self.vocab_size
            )));
        }
        if self.ffn_mult == 0 || self.context < 2 {
            return Err(MasaError::invalid("ffn_mult must be positive and context at least 2"));
        }
        if self.mode != SharingMode::Dense {
            if self.num_atoms == 0 {
                return Err(MasaError::invalid("shared modes need at least one atom"));
            }
            if self.num_atoms > self.num_layers {
                log::warn!(
                    "{} atoms for {} layers: more atoms than layers",
                    self.num_atoms,
                    self.num_layers
                );
            }
            if self.coefficient_path == CoefficientPath::Mlp && (self.embed_dim() == 0 || self.mlp_hidden() == 0) {
                return Err(MasaError::invalid("coefficient mlp widths must be positive"));
            }
        }
        Ok(())
    }
}
