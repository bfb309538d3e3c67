//! Forward computation, loss and perplexity.
//!
//! Every forward pass is recorded on a [`GradientTape`]; evaluation simply
//! drops the tape. Training and evaluation therefore share one code path.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::ops::Range;

use crate::compress::BlockProbe;
use crate::error::{MasaError, Result};
use crate::linalg::Matrix;
use crate::masa::{CoefficientSource, ProjectionKind, ProjectionStorage};
use crate::model::params::{
    atom_name, coeff_name, dense_weight_name, effective_weight_name, mlp_name, ModelParams,
};
use crate::model::tape::{attention_kernel, Gradients, GradientTape, NodeId};

/// Single-sequence multi-head attention `softmax(QKᵀ/√h_d)·V·W_o`.
pub fn attention_forward(
    h: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    wo: &Matrix,
    causal: bool,
    heads: usize,
) -> Result<Matrix> {
    let d = h.ncols();
    for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv)] {
        if w.nrows() != d {
            return Err(MasaError::shape(format!("{name} has {} rows, input has {d} columns", w.nrows())));
        }
    }
    if wo.nrows() != wv.ncols() {
        return Err(MasaError::shape("wo rows must match wv columns"));
    }
    let (q, k, v) = (h * wq, h * wk, h * wv);
    let (ctx, _) = attention_kernel(&q, &k, &v, heads, &[0..h.nrows()], causal, 0)?;
    Ok(ctx * wo)
}

/// Node ids of interest in one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub logits: NodeId,
    /// Layer-norm output feeding `W_q`, `W_k`, `W_v` in each block.
    pub attn_inputs: Vec<NodeId>,
    /// Head-concatenated context feeding `W_o` in each block.
    pub ctx: Vec<NodeId>,
    /// Residual stream after each block.
    pub block_outputs: Vec<NodeId>,
}

fn check_tokens(params: &ModelParams, seq: &[u8]) -> Result<()> {
    let vocab = params.config.vocab_size;
    if let Some(t) = seq.iter().find(|&&t| t as usize >= vocab) {
        return Err(MasaError::invalid(format!("token {t} >= vocab size {vocab}")));
    }
    Ok(())
}

fn projection_nodes(
    tape: &mut GradientTape,
    ids: &BTreeMap<String, NodeId>,
    params: &ModelParams,
    kind: ProjectionKind,
) -> Result<Vec<NodeId>> {
    let l = params.num_layers();
    match params.attention.get(kind) {
        ProjectionStorage::Dense(_) => Ok((0..l).map(|i| ids[&dense_weight_name(kind, i)]).collect()),
        ProjectionStorage::Shared(sp) => {
            let atoms: Vec<NodeId> = (0..sp.dictionary.len()).map(|s| ids[&atom_name(kind, s)]).collect();
            let coeffs = match &sp.coefficients {
                CoefficientSource::Direct(_) => ids[&coeff_name(kind)],
                CoefficientSource::Mlp { .. } => {
                    let part = |p: &str| ids[&mlp_name(kind, p)];
                    let mlp = [part("w1"), part("b1"), part("w2"), part("b2"), part("w3"), part("b3")];
                    tape.coeff_mlp(part("table"), mlp)?
                }
            };
            let mut out = Vec::with_capacity(l);
            for layer in 0..l {
                let mut w = tape.combine(coeffs, layer, atoms.clone())?;
                if let Some(Some(res)) = sp.residuals.get(layer) {
                    let corr = tape.constant(res.correction()?);
                    w = tape.add(w, corr)?;
                }
                tape.label(w, &effective_weight_name(kind, layer));
                out.push(w);
            }
            Ok(out)
        }
    }
}

/// Records the full model over a batch of independent sequences.
pub fn build_graph(params: &ModelParams, tape: &mut GradientTape, seqs: &[&[u8]]) -> Result<ForwardGraph> {
    let cfg = &params.config;
    if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
        return Err(MasaError::invalid("forward pass needs non-empty sequences"));
    }
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut segments: Vec<Range<usize>> = Vec::with_capacity(seqs.len());
    for seq in seqs {
        check_tokens(params, seq)?;
        if seq.len() > cfg.context {
            return Err(MasaError::invalid(format!(
                "sequence of {} tokens exceeds context {}",
                seq.len(),
                cfg.context
            )));
        }
        let start = tokens.len();
        tokens.extend(seq.iter().map(|&t| t as usize));
        positions.extend(0..seq.len());
        segments.push(start..tokens.len());
    }

    let mut ids = BTreeMap::new();
    params.visit(&mut |name, m| {
        ids.insert(name.to_string(), tape.param(name, m));
    });

    let weights: Vec<Vec<NodeId>> = ProjectionKind::ALL
        .iter()
        .map(|&k| projection_nodes(tape, &ids, params, k))
        .collect::<Result<_>>()?;

    let tok = tape.gather(ids["tok_emb"], tokens)?;
    let pos = tape.gather(ids["pos_emb"], positions)?;
    let mut x = tape.add(tok, pos)?;

    let mut attn_inputs = Vec::with_capacity(cfg.num_layers);
    let mut ctxs = Vec::with_capacity(cfg.num_layers);
    let mut block_outputs = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = |n: &str| ids[&format!("block{l}.{n}")];
        let h = tape.layer_norm(x, p("ln1.gain"), p("ln1.bias"))?;
        let q = tape.matmul(h, weights[0][l])?;
        let k = tape.matmul(h, weights[1][l])?;
        let v = tape.matmul(h, weights[2][l])?;
        let ctx = tape.attention(q, k, v, cfg.num_heads, segments.clone(), true, l)?;
        let a = tape.matmul(ctx, weights[3][l])?;
        x = tape.add(x, a)?;
        let h2 = tape.layer_norm(x, p("ln2.gain"), p("ln2.bias"))?;
        let f1 = tape.matmul(h2, p("ffn.w1"))?;
        let f1 = tape.add_row(f1, p("ffn.b1"))?;
        let f1 = tape.gelu(f1);
        let f2 = tape.matmul(f1, p("ffn.w2"))?;
        let f2 = tape.add_row(f2, p("ffn.b2"))?;
        x = tape.add(x, f2)?;
        attn_inputs.push(h);
        ctxs.push(ctx);
        block_outputs.push(x);
    }
    let xf = tape.layer_norm(x, ids["ln_f.gain"], ids["ln_f.bias"])?;
    let logits = match ids.get("lm_head") {
        Some(&head) => tape.matmul(xf, head)?,
        None => tape.matmul_t(xf, ids["tok_emb"])?,
    };
    Ok(ForwardGraph {
        logits,
        attn_inputs,
        ctx: ctxs,
        block_outputs,
    })
}

/// `T × vocab` next-token logits for one sequence.
pub fn logits(params: &ModelParams, tokens: &[u8]) -> Result<Matrix> {
    let mut tape = GradientTape::new();
    let g = build_graph(params, &mut tape, &[tokens])?;
    Ok(tape.value(g.logits).clone())
}

fn split_windows<'a>(windows: &[&'a [u8]]) -> Result<(Vec<&'a [u8]>, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(windows.len());
    let mut targets = Vec::new();
    for w in windows {
        if w.len() < 2 {
            return Err(MasaError::invalid("next-token loss needs sequences of length >= 2"));
        }
        inputs.push(&w[..w.len() - 1]);
        targets.extend(w[1..].iter().map(|&t| t as usize));
    }
    Ok((inputs, targets))
}

/// Records inputs and next-token cross-entropy; returns the tape and loss node.
pub fn record_loss(params: &ModelParams, windows: &[&[u8]]) -> Result<(GradientTape, NodeId)> {
    let (inputs, targets) = split_windows(windows)?;
    for w in windows {
        check_tokens(params, w)?;
    }
    let mut tape = GradientTape::new();
    let g = build_graph(params, &mut tape, &inputs)?;
    let loss = tape.cross_entropy(g.logits, targets)?;
    Ok((tape, loss))
}

/// Mean next-token negative log-likelihood of one sequence.
pub fn forward_loss(params: &ModelParams, tokens: &[u8]) -> Result<f64> {
    batch_loss(params, &[tokens])
}

/// Mean next-token NLL pooled over all predicted tokens of the batch.
pub fn batch_loss(params: &ModelParams, windows: &[&[u8]]) -> Result<f64> {
    let (tape, loss) = record_loss(params, windows)?;
    Ok(tape.scalar(loss))
}

pub fn loss_and_gradients(params: &ModelParams, windows: &[&[u8]]) -> Result<(f64, Gradients)> {
    let (tape, loss) = record_loss(params, windows)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads))
}

/// `exp` of the mean next-token NLL over `corpus`, read in windows of at
/// most the model context. Every byte after the first is predicted once.
pub fn perplexity(params: &ModelParams, corpus: &[u8]) -> Result<f64> {
    Ok(mean_nll(params, corpus)?.exp())
}

pub fn mean_nll(params: &ModelParams, corpus: &[u8]) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(MasaError::invalid("corpus needs at least two bytes"));
    }
    let span = params.config.context;
    let windows = crate::corpus::eval_windows(corpus, span);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(8) {
        let n: usize = chunk.iter().map(|w| w.len() - 1).sum();
        total += batch_loss(params, chunk)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Per-block projection inputs for one sequence.
#[derive(Debug, Clone)]
pub struct Activations {
    pub attn_inputs: Vec<Matrix>,
    pub ctx: Vec<Matrix>,
    pub block_outputs: Vec<Matrix>,
}

pub fn capture_activations(params: &ModelParams, tokens: &[u8]) -> Result<Activations> {
    let mut tape = GradientTape::new();
    let g = build_graph(params, &mut tape, &[tokens])?;
    let take = |ids: &[NodeId]| ids.iter().map(|&i| tape.value(i).clone()).collect();
    Ok(Activations {
        attn_inputs: take(&g.attn_inputs),
        ctx: take(&g.ctx),
        block_outputs: take(&g.block_outputs),
    })
}

impl BlockProbe for ModelParams {
    fn block_outputs(&self, tokens: &[u8]) -> Result<Vec<Matrix>> {
        Ok(capture_activations(self, tokens)?.block_outputs)
    }

    fn output_projection(&self) -> Cow<'_, Matrix> {
        self.output_matrix()
    }
}
