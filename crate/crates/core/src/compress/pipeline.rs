//! End-to-end training-free compression of a dense model.
//!
//! Order of work: choose groups, run Matrix PCA per projection kind and
//! group, then optionally refine each layer's residual in the whitened
//! metric with ranks balanced across paired projections.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::grouping::{group_blocks, layer_pmfs, GroupSpec};
use crate::compress::pca::matrix_pca;
use crate::compress::refine::{
    balanced_rank_allocation, refine_residual, residual_budget, whiten, AutocorrelationAccumulator,
    ResidualFactor,
};
use crate::error::{MasaError, Result};
use crate::linalg::{cholesky, svd, CholeskyFactor, Matrix, RidgePolicy};
use crate::masa::{
    AtomDictionary, CoefficientMatrix, CoefficientSource, ProjectionKind, ProjectionStorage,
    SharedProjection, SharedProjectionSet, SharingMode,
};
use crate::model::config::CoefficientPath;
use crate::model::forward::capture_activations;
use crate::model::params::ModelParams;

/// Environment variable capping the worker threads used for fan-out.
pub const THREADS_ENV: &str = "MASAKIT_THREADS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupSelection {
    /// `k` contiguous groups split at the largest consecutive-layer KL values.
    Auto(usize),
    Explicit(Vec<Range<usize>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PairingPolicy {
    /// `(v, o)` and `(q, k)` residuals share a rank budget per layer.
    #[default]
    Paired,
    /// Every residual keeps its rank from the budget rule.
    Independent,
}

#[derive(Debug, Clone)]
pub struct CompressOptions {
    pub mode: SharingMode,
    pub alpha: f64,
    /// Replaces the per-group residual budget when set.
    pub beta: Option<f64>,
    pub groups: GroupSelection,
    /// One count for every group, or one per group.
    pub basis: Vec<usize>,
    pub pairing: PairingPolicy,
    /// Move budget for the rank balancing walk; `None` walks the full trajectory.
    pub max_steps: Option<usize>,
    pub ridge: RidgePolicy,
    pub threads: Option<usize>,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            mode: SharingMode::Qkvo,
            alpha: 0.5,
            beta: None,
            groups: GroupSelection::Auto(1),
            basis: vec![1],
            pairing: PairingPolicy::Paired,
            max_steps: None,
            ridge: RidgePolicy::default(),
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub projection: ProjectionKind,
    pub group: usize,
    pub layer: usize,
    /// `‖W_l − Ŵ_l‖_F²` after Matrix PCA, before refinement.
    pub pca_error: f64,
    pub residual_rank: usize,
    pub whitening_ridge: f64,
    /// Fraction of this projection's dense parameters removed.
    pub cr_achieved: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub groups: GroupSpec,
    /// Residual budget per group; `0` where refinement is off.
    pub betas: Vec<f64>,
    pub rows: Vec<ReportRow>,
    /// Fraction of all attention parameters removed.
    pub attention_cr: f64,
}

impl CompressionReport {
    pub const CSV_HEADER: &'static str =
        "projection,group,layer,pca_error,residual_rank,whitening_ridge,cr_achieved";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{},{:e},{:.6}",
                r.projection.tag(),
                r.group,
                r.layer,
                r.pca_error,
                r.residual_rank,
                r.whitening_ridge,
                r.cr_achieved
            );
        }
        out
    }
}

/// Worker count from the explicit option or [`THREADS_ENV`].
pub fn thread_cap(explicit: Option<usize>) -> Option<usize> {
    explicit.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
    })
}

fn run_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap(threads) {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| MasaError::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

fn resolve_groups(params: &ModelParams, calib: &[Vec<u8>], opts: &CompressOptions) -> Result<GroupSpec> {
    let l = params.num_layers();
    let spec = match &opts.groups {
        GroupSelection::Explicit(ranges) => {
            let placeholder = ranges.iter().map(|_| 1).collect();
            GroupSpec::new(ranges.clone(), placeholder, l)?
        }
        GroupSelection::Auto(k) if *k == 0 || *k > l => {
            return Err(MasaError::invalid(format!("group count {k} outside [1, {l}]")))
        }
        GroupSelection::Auto(1) => GroupSpec::single(l, 1)?,
        GroupSelection::Auto(k) if *k == l => GroupSpec::new((0..l).map(|i| i..i + 1).collect(), vec![1; l], l)?,
        GroupSelection::Auto(k) => {
            if calib.is_empty() {
                return Err(MasaError::invalid(format!(
                    "automatic grouping into {k} groups needs calibration data"
                )));
            }
            group_blocks(&layer_pmfs(params, calib)?, *k)?
        }
    };
    spec.with_basis(&opts.basis, l)
}

/// Per-group residual budget; zero disables refinement for the group.
fn group_budgets(groups: &GroupSpec, num_layers: usize, opts: &CompressOptions) -> Result<Vec<f64>> {
    groups
        .ranges
        .iter()
        .zip(&groups.basis_counts)
        .enumerate()
        .map(|(g, (range, &b))| {
            if range.len() <= b {
                // singleton groups and full bases are already exact
                return Ok(0.0);
            }
            let beta = match opts.beta {
                Some(beta) if (0.0..=1.0).contains(&beta) => beta,
                Some(beta) => return Err(MasaError::invalid(format!("beta {beta} outside [0, 1]"))),
                None if b >= num_layers => 0.0,
                None => residual_budget(opts.alpha, num_layers, b)?,
            };
            if beta <= 0.0 {
                log::warn!("group {g}: residual budget is zero, refinement disabled");
            }
            Ok(beta)
        })
        .collect()
}

struct Whitening {
    attn_inputs: Vec<CholeskyFactor>,
    ctx: Vec<CholeskyFactor>,
}

fn calibrate(params: &ModelParams, calib: &[Vec<u8>], ridge: &RidgePolicy) -> Result<Whitening> {
    let (l, d) = (params.num_layers(), params.config.model_dim);
    let mut inputs: Vec<_> = (0..l).map(|_| AutocorrelationAccumulator::new(d)).collect();
    let mut ctxs: Vec<_> = (0..l).map(|_| AutocorrelationAccumulator::new(d)).collect();
    for sample in calib {
        let acts = capture_activations(params, sample)?;
        for layer in 0..l {
            inputs[layer].add(&acts.attn_inputs[layer])?;
            ctxs[layer].add(&acts.ctx[layer])?;
        }
    }
    let factor = |acc: AutocorrelationAccumulator, name: String| cholesky(&acc.finish()?, ridge, &name);
    Ok(Whitening {
        attn_inputs: inputs
            .into_iter()
            .enumerate()
            .map(|(i, a)| factor(a, format!("attention-input autocorrelation of block {i}")))
            .collect::<Result<_>>()?,
        ctx: ctxs
            .into_iter()
            .enumerate()
            .map(|(i, a)| factor(a, format!("context autocorrelation of block {i}")))
            .collect::<Result<_>>()?,
    })
}

struct GroupPca {
    kind: ProjectionKind,
    group: usize,
    atoms: Vec<Matrix>,
    /// `B × group_len`
    coeffs: Matrix,
    residuals: Vec<Matrix>,
}

/// Rank from the parameter-count rule `⌊β·m·n/(m+n)⌋`.
fn budget_rank(beta: f64, m: usize, n: usize) -> usize {
    ((beta * (m * n) as f64 / (m + n) as f64).floor() as usize).min(m.min(n))
}

/// Residual ranks for the projections of one layer.
fn layer_ranks(
    mode: SharingMode,
    pairing: PairingPolicy,
    beta: f64,
    d: usize,
    whitened: &[Option<Matrix>; 4],
    max_steps: Option<usize>,
) -> Result<[usize; 4]> {
    let mut ranks = [0usize; 4];
    for kind in ProjectionKind::ALL {
        if mode.shares(kind) {
            ranks[kind.index()] = budget_rank(beta, d, d);
        }
    }
    if pairing == PairingPolicy::Independent || beta >= 1.0 {
        return Ok(ranks);
    }
    for (a, b) in [
        (ProjectionKind::Value, ProjectionKind::Output),
        (ProjectionKind::Query, ProjectionKind::Key),
    ] {
        let (Some(wa), Some(wb)) = (&whitened[a.index()], &whitened[b.index()]) else {
            continue;
        };
        let sa = svd(wa)?.singular_values;
        let sb = svd(wb)?.singular_values;
        let alloc = balanced_rank_allocation(&sa, &sb, d, d, d, 1.0 - beta, max_steps)?;
        ranks[a.index()] = alloc.r_a;
        ranks[b.index()] = alloc.r_b;
    }
    Ok(ranks)
}

/// Compresses the attention of a dense model into grouped shared atoms.
pub fn compress_model(
    params: &ModelParams,
    calib: &[Vec<u8>],
    opts: &CompressOptions,
) -> Result<(ModelParams, CompressionReport)> {
    if params.config.mode != SharingMode::Dense {
        return Err(MasaError::invalid("compression expects a dense checkpoint"));
    }
    if opts.mode == SharingMode::Dense {
        return Err(MasaError::invalid("compression mode must be qkv or qkvo"));
    }
    let (l, d) = (params.num_layers(), params.config.model_dim);
    let groups = resolve_groups(params, calib, opts)?;
    let betas = group_budgets(&groups, l, opts)?;
    let refining = betas.iter().any(|&b| b > 0.0);
    if refining && calib.is_empty() {
        return Err(MasaError::invalid("residual refinement needs calibration data"));
    }

    let kinds: Vec<ProjectionKind> = ProjectionKind::ALL.into_iter().filter(|k| opts.mode.shares(*k)).collect();
    let mut dense: [Vec<Matrix>; 4] = Default::default();
    for kind in ProjectionKind::ALL {
        match params.attention.get(kind) {
            ProjectionStorage::Dense(ws) => dense[kind.index()] = ws.clone(),
            ProjectionStorage::Shared(_) => unreachable!("dense model"),
        }
    }

    let whitening = if refining {
        Some(calibrate(params, calib, &opts.ridge)?)
    } else {
        None
    };

    let jobs: Vec<(ProjectionKind, usize)> = kinds
        .iter()
        .flat_map(|&k| (0..groups.len()).map(move |g| (k, g)))
        .collect();
    let pcas: Vec<GroupPca> = run_pool(opts.threads, || {
        jobs.par_iter()
            .map(|&(kind, g)| {
                let range = groups.ranges[g].clone();
                let ws = &dense[kind.index()][range];
                let res = matrix_pca(ws, groups.basis_counts[g], kind)?;
                let residuals = ws
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w - crate::masa::reconstruct_weight(&res.dictionary, &res.coefficients, i).expect("layer in range"))
                    .collect();
                Ok(GroupPca {
                    kind,
                    group: g,
                    atoms: res.dictionary.into_atoms(),
                    coeffs: res.coefficients.values().clone(),
                    residuals,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;

    // residual per (kind, layer)
    let mut deltas: [Vec<Matrix>; 4] = Default::default();
    for kind in &kinds {
        deltas[kind.index()] = vec![Matrix::zeros(d, d); l];
    }
    for p in &pcas {
        let start = groups.ranges[p.group].start;
        for (i, r) in p.residuals.iter().enumerate() {
            deltas[p.kind.index()][start + i] = r.clone();
        }
    }

    let whitening_for = |kind: ProjectionKind, layer: usize| -> Option<&CholeskyFactor> {
        let w = whitening.as_ref()?;
        Some(match kind {
            ProjectionKind::Output => &w.ctx[layer],
            _ => &w.attn_inputs[layer],
        })
    };

    type LayerResiduals = [Option<ResidualFactor>; 4];
    let refined: Vec<LayerResiduals> = run_pool(opts.threads, || {
        (0..l)
            .into_par_iter()
            .map(|layer| -> Result<LayerResiduals> {
                let g = groups.group_of(layer).expect("groups cover all layers");
                let beta = betas[g];
                let mut out: LayerResiduals = Default::default();
                if beta <= 0.0 {
                    return Ok(out);
                }
                let mut whitened: [Option<Matrix>; 4] = Default::default();
                for &kind in &kinds {
                    let w = whitening_for(kind, layer).expect("calibrated");
                    whitened[kind.index()] = Some(whiten(&deltas[kind.index()][layer], w)?);
                }
                let ranks = layer_ranks(opts.mode, opts.pairing, beta, d, &whitened, opts.max_steps)?;
                for &kind in &kinds {
                    let r = ranks[kind.index()];
                    if r == 0 {
                        continue;
                    }
                    let w = whitening_for(kind, layer).expect("calibrated");
                    out[kind.index()] = Some(refine_residual(&deltas[kind.index()][layer], w, r)?.factor);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })??;

    // assemble block-sparse dictionaries
    let total_atoms = groups.total_atoms();
    let mut projections: [ProjectionStorage; 4] = [0, 1, 2, 3].map(|i| ProjectionStorage::Dense(dense[i].clone()));
    for &kind in &kinds {
        let mut atoms = Vec::with_capacity(total_atoms);
        let mut coeffs = Matrix::zeros(total_atoms, l);
        for p in pcas.iter().filter(|p| p.kind == kind) {
            let offset = groups.atom_offset(p.group);
            let start = groups.ranges[p.group].start;
            atoms.extend(p.atoms.iter().cloned());
            for s in 0..p.coeffs.nrows() {
                for i in 0..p.coeffs.ncols() {
                    coeffs[(offset + s, start + i)] = p.coeffs[(s, i)];
                }
            }
        }
        let dictionary = AtomDictionary::new(atoms, kind)?;
        let mut shared = SharedProjection::new(dictionary, CoefficientSource::Direct(CoefficientMatrix::new(coeffs)?), l);
        shared.layout = Some(groups.clone());
        shared.residuals = refined.iter().map(|r| r[kind.index()].clone()).collect();
        projections[kind.index()] = ProjectionStorage::Shared(shared);
    }

    let mut out = params.clone();
    out.config.mode = opts.mode;
    out.config.num_atoms = total_atoms;
    out.config.coefficient_path = CoefficientPath::Direct;
    out.attention = SharedProjectionSet::new(opts.mode, projections)?;

    let dense_per_kind = (l * d * d) as f64;
    let mut rows = Vec::new();
    for &kind in &kinds {
        let stored = out.attention.get(kind).parameter_count() as f64;
        let cr = 1.0 - stored / dense_per_kind;
        for layer in 0..l {
            let g = groups.group_of(layer).expect("covered");
            let residual_rank = refined[layer][kind.index()].as_ref().map_or(0, |r| r.rank());
            let whitening_ridge = if betas[g] > 0.0 {
                whitening_for(kind, layer).map_or(0.0, |w| w.ridge_used)
            } else {
                0.0
            };
            rows.push(ReportRow {
                projection: kind,
                group: g,
                layer,
                pca_error: deltas[kind.index()][layer].norm_squared(),
                residual_rank,
                whitening_ridge,
                cr_achieved: cr,
            });
        }
    }
    let attention_cr = 1.0 - out.attention_parameter_count() as f64 / out.dense_attention_parameter_count() as f64;
    Ok((
        out,
        CompressionReport {
            groups,
            betas,
            rows,
            attention_cr,
        },
    ))
}
