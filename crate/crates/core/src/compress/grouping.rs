//! Partitioning blocks into contiguous groups that share one dictionary.
//!
//! Each block's averaged hidden state is pushed through the model's output
//! projection to obtain a distribution over the vocabulary. Splits go where
//! consecutive distributions differ most in KL divergence.

use std::borrow::Cow;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::activation::softmax_in_place;
use crate::error::{MasaError, Result};
use crate::linalg::Matrix;

/// Probabilities below this are floored (and the pmf renormalized) before KL.
pub const PMF_FLOOR: f64 = 1e-12;

/// Contiguous half-open layer ranges covering `[0, L)` with a basis count each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub ranges: Vec<Range<usize>>,
    pub basis_counts: Vec<usize>,
}

impl GroupSpec {
    pub fn new(ranges: Vec<Range<usize>>, basis_counts: Vec<usize>, num_layers: usize) -> Result<Self> {
        let spec = Self {
            ranges,
            basis_counts,
        };
        spec.validate(num_layers)?;
        Ok(spec)
    }

    /// One group spanning every layer.
    pub fn single(num_layers: usize, basis: usize) -> Result<Self> {
        Self::new(vec![0..num_layers], vec![basis], num_layers)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(MasaError::invalid("group spec has no groups"));
        }
        if self.ranges.len() != self.basis_counts.len() {
            return Err(MasaError::invalid(format!(
                "{} groups but {} basis counts",
                self.ranges.len(),
                self.basis_counts.len()
            )));
        }
        let mut next = 0;
        for (g, (r, &b)) in self.ranges.iter().zip(&self.basis_counts).enumerate() {
            if r.start != next || r.end <= r.start {
                return Err(MasaError::invalid(format!(
                    "group {g} ({r:?}) is not contiguous with the previous group"
                )));
            }
            if b == 0 || b > r.len() {
                return Err(MasaError::invalid(format!(
                    "group {g} spans {} layers but requests {b} basis matrices",
                    r.len()
                )));
            }
            next = r.end;
        }
        if next != num_layers {
            return Err(MasaError::invalid(format!(
                "groups cover [0, {next}) but the model has {num_layers} layers"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn total_atoms(&self) -> usize {
        self.basis_counts.iter().sum()
    }

    /// Structurally nonzero entries of the block-sparse coefficient matrix.
    pub fn coefficient_count(&self) -> usize {
        self.ranges
            .iter()
            .zip(&self.basis_counts)
            .map(|(r, b)| r.len() * b)
            .sum()
    }

    pub fn group_of(&self, layer: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&layer))
    }

    /// Index of the first atom of group `g` in the concatenated dictionary.
    pub fn atom_offset(&self, g: usize) -> usize {
        self.basis_counts[..g].iter().sum()
    }

    /// Replaces the basis counts, broadcasting a single value to every group.
    pub fn with_basis(mut self, basis: &[usize], num_layers: usize) -> Result<Self> {
        self.basis_counts = match basis {
            [b] => vec![*b; self.ranges.len()],
            list => list.to_vec(),
        };
        self.validate(num_layers)?;
        Ok(self)
    }
}

/// Per-block output distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPmfSequence {
    pub pmfs: Vec<Vec<f64>>,
}

impl LayerPmfSequence {
    pub fn new(pmfs: Vec<Vec<f64>>) -> Result<Self> {
        let vocab = pmfs.first().map(Vec::len).unwrap_or(0);
        for (l, p) in pmfs.iter().enumerate() {
            if p.len() != vocab || vocab == 0 {
                return Err(MasaError::shape(format!("pmf {l} has length {}", p.len())));
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|v| *v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
                return Err(MasaError::invalid(format!("pmf {l} is not a distribution (sum {total})")));
            }
        }
        Ok(Self { pmfs })
    }

    pub fn len(&self) -> usize {
        self.pmfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmfs.is_empty()
    }

    /// `D_KL(p_l ‖ p_{l+1})` for `l = 0..L-1`.
    pub fn consecutive_kl(&self) -> Result<Vec<f64>> {
        self.pmfs
            .windows(2)
            .map(|w| kl_divergence(&w[0], &w[1]))
            .collect()
    }
}

fn floored(p: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = p.iter().map(|v| v.max(PMF_FLOOR)).collect();
    let total: f64 = clipped.iter().sum();
    clipped.into_iter().map(|v| v / total).collect()
}

/// `Σ_k p_k ln(p_k / q_k)` after flooring both pmfs at [`PMF_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MasaError::shape(format!(
            "pmf lengths differ ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let (p, q) = (floored(p), floored(q));
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(pk, qk)| pk * (pk / qk).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Places the `k − 1` splits at the largest consecutive-KL values, earlier
/// index winning ties. Split `i` separates layer `i` from layer `i + 1`.
pub fn split_points(kl: &[f64], k: usize) -> Result<Vec<usize>> {
    let l = kl.len() + 1;
    if k == 0 || k > l {
        return Err(MasaError::invalid(format!("cannot form {k} groups from {l} layers")));
    }
    let mut order: Vec<usize> = (0..kl.len()).collect();
    order.sort_by(|&a, &b| kl[b].total_cmp(&kl[a]).then(a.cmp(&b)));
    let mut splits: Vec<usize> = order.into_iter().take(k - 1).collect();
    splits.sort_unstable();
    Ok(splits)
}

/// Groups `L` blocks into `k` contiguous ranges (one basis each).
pub fn group_blocks(pmfs: &LayerPmfSequence, k: usize) -> Result<GroupSpec> {
    let l = pmfs.len();
    if k == 0 || k > l {
        return Err(MasaError::invalid(format!("cannot form {k} groups from {l} layers")));
    }
    let kl = pmfs.consecutive_kl()?;
    groups_from_kl(&kl, k)
}

/// [`group_blocks`] on a precomputed consecutive-KL sequence.
pub fn groups_from_kl(kl: &[f64], k: usize) -> Result<GroupSpec> {
    let l = kl.len() + 1;
    let splits = split_points(kl, k)?;
    let mut ranges = Vec::with_capacity(k);
    let mut start = 0;
    for s in splits {
        ranges.push(start..s + 1);
        start = s + 1;
    }
    ranges.push(start..l);
    let basis = vec![1; ranges.len()];
    GroupSpec::new(ranges, basis, l)
}

/// A model that can report every block's output hidden states.
pub trait BlockProbe {
    /// One `T × d` matrix per block for the given token sequence.
    fn block_outputs(&self, tokens: &[u8]) -> Result<Vec<Matrix>>;

    /// The `d × |Σ|` unembedding used to map hidden states to logits.
    fn output_projection(&self) -> Cow<'_, Matrix>;
}

/// Average each block's hidden state over tokens, project with the output
/// matrix, softmax, then average the pmfs over samples.
pub fn layer_pmfs<M: BlockProbe + ?Sized>(model: &M, samples: &[Vec<u8>]) -> Result<LayerPmfSequence> {
    if samples.is_empty() || samples.iter().any(Vec::is_empty) {
        return Err(MasaError::invalid("calibration set is empty"));
    }
    let w_out = model.output_projection();
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for sample in samples {
        let outputs = model.block_outputs(sample)?;
        let pmfs: Vec<Vec<f64>> = outputs
            .iter()
            .map(|y| {
                let t = y.nrows() as f64;
                let mean = y.row_sum() / t;
                let mut logits: Vec<f64> = (mean * &*w_out).iter().copied().collect();
                softmax_in_place(&mut logits);
                logits
            })
            .collect();
        match acc.as_mut() {
            None => acc = Some(pmfs),
            Some(total) => {
                for (t, p) in total.iter_mut().zip(pmfs) {
                    t.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    let n = samples.len() as f64;
    let mut pmfs = acc.unwrap_or_default();
    for p in pmfs.iter_mut() {
        p.iter_mut().for_each(|v| *v /= n);
    }
    LayerPmfSequence::new(pmfs)
}
