//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MasaError, Result};
use crate::masa::SharingMode;
use crate::model::config::ToyConfig;
use crate::model::forward::{batch_loss, loss_and_gradients};
use crate::model::params::ModelParams;

/// Gradients smaller than this are compared in absolute terms.
pub const DEVIATION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub samples: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            samples: 200,
            eps: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_deviation: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    /// Largest deviation seen per tensor.
    pub per_tensor: BTreeMap<String, f64>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_deviation(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DEVIATION_FLOOR)
}

/// Small shared-attention model used by the `grad-check` command.
pub fn default_check_config() -> ToyConfig {
    let mut c = ToyConfig::new(3, 16, 2, SharingMode::Qkvo, 2);
    c.context = 16;
    c.seed = 11;
    c
}

fn perturbed(params: &ModelParams, name: &str, idx: usize, delta: f64) -> ModelParams {
    let mut p = params.clone();
    p.visit_mut(&mut |n, m| {
        if n == name {
            m.as_mut_slice()[idx] += delta;
        }
    });
    p
}

/// Compares analytic and central-difference gradients on sampled entries.
///
/// Every trainable tensor gets at least one sample; the rest are drawn at
/// random. Token-embedding samples are restricted to rows of tokens that
/// occur in `windows`, since other rows have identically zero gradient.
pub fn gradient_check(
    params: &ModelParams,
    windows: &[&[u8]],
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(params, windows)?;
    let mut shapes = Vec::new();
    params.visit(&mut |n, m| shapes.push((n.to_string(), m.nrows(), m.ncols())));
    if settings.samples < shapes.len() {
        return Err(MasaError::invalid(format!(
            "{} samples cannot cover {} tensors",
            settings.samples,
            shapes.len()
        )));
    }
    let used: Vec<usize> = {
        let mut t: Vec<usize> = windows.iter().flat_map(|w| w.iter().map(|&b| b as usize)).collect();
        t.sort_unstable();
        t.dedup();
        t
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_deviation: 0.0,
        worst: String::new(),
        per_tensor: BTreeMap::new(),
    };
    for i in 0..settings.samples {
        let (name, rows, cols) = if i < shapes.len() {
            shapes[i].clone()
        } else {
            shapes[rng.gen_range(0..shapes.len())].clone()
        };
        let row = if name == "tok_emb" {
            used[rng.gen_range(0..used.len())]
        } else {
            rng.gen_range(0..rows)
        };
        let col = rng.gen_range(0..cols);
        let idx = col * rows + row;
        let plus = batch_loss(&perturbed(params, &name, idx, settings.eps), windows)?;
        let minus = batch_loss(&perturbed(params, &name, idx, -settings.eps), windows)?;
        let numeric = (plus - minus) / (2.0 * settings.eps);
        let analytic = grads
            .get(&name)
            .map(|g| g.as_slice()[idx])
            .ok_or_else(|| MasaError::MissingTensor(name.clone()))?;
        let dev = relative_deviation(analytic, numeric);
        if !dev.is_finite() {
            return Err(MasaError::NonFinite(format!("gradient check of {name}")));
        }
        let entry = report.per_tensor.entry(name.clone()).or_insert(0.0);
        *entry = entry.max(dev);
        if dev > report.max_deviation || report.worst.is_empty() {
            report.max_deviation = report.max_deviation.max(dev);
            report.worst = format!("{name}[{idx}]");
        }
        report.checked += 1;
    }
    Ok(report)
}
