//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over
//! the node list visits every node exactly once after all of its consumers.
//! Ops are coarse (fused attention, layer norm, cross-entropy, coefficient
//! MLP) with hand-written adjoints.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::activation::{gelu, gelu_grad, softmax_in_place};
use crate::error::{MasaError, Result};
use crate::linalg::{frobenius_dot, Matrix};
use crate::masa::{affine_row, combine_atoms};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + 1·bias` with `bias` a `1 × n` row.
    AddRow(NodeId, NodeId),
    Gelu(NodeId),
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<Range<usize>>,
        probs: Vec<Matrix>,
    },
    /// `Σ_s C[s, layer] · atom_s`
    Combine {
        coeffs: NodeId,
        layer: usize,
        atoms: Vec<NodeId>,
    },
    /// Coefficient MLP evaluated for every table row; output is `S × L`.
    CoeffMlp {
        table: NodeId,
        params: [NodeId; 6],
        z1: Matrix,
        h1: Matrix,
        z2: Matrix,
        h2: Matrix,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Mean negative log-likelihood, `1 × 1`.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Matrix,
    },
    /// `½‖x‖_F²`, `1 × 1`.
    HalfSquaredNorm(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
}

fn row_matrix(values: impl IntoIterator<Item = f64>, n: usize) -> Matrix {
    Matrix::from_iterator(1, n, values)
}

fn column_sums(m: &Matrix) -> Matrix {
    row_matrix(m.column_iter().map(|c| c.sum()), m.ncols())
}

fn add_row_broadcast(a: &Matrix, bias: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(bias[(0, j)]);
    }
    out
}

/// Row-wise layer norm; returns output, normalized input and `1/σ` per row.
pub(crate) fn layer_norm_forward(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            xhat[(i, j)] = (x[(i, j)] - mean) * inv;
        }
    }
    let mut y = xhat.clone();
    for j in 0..d {
        let (g, b) = (gain[(0, j)], bias[(0, j)]);
        y.column_mut(j).iter_mut().for_each(|v| *v = *v * g + b);
    }
    (y, xhat, inv_std)
}

/// Multi-head scaled dot-product attention over independent row segments.
///
/// Returns the concatenated head contexts and every `T × T` probability
/// matrix (segment-major, head-minor). `block` only labels errors.
pub(crate) fn attention_kernel(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    segments: &[Range<usize>],
    causal: bool,
    block: usize,
) -> Result<(Matrix, Vec<Matrix>)> {
    let (n, d) = q.shape();
    if k.shape() != (n, d) || v.shape() != (n, d) || heads == 0 || d % heads != 0 {
        return Err(MasaError::shape(format!(
            "attention inputs q{:?} k{:?} v{:?} with {heads} heads",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(segments.len() * heads);
    for seg in segments {
        let t = seg.len();
        for h in 0..heads {
            let qh = q.view((seg.start, h * hd), (t, hd));
            let kh = k.view((seg.start, h * hd), (t, hd));
            let vh = v.view((seg.start, h * hd), (t, hd));
            let mut scores = qh * kh.transpose() * scale;
            if scores.iter().any(|s| s.is_nan()) {
                return Err(MasaError::NanLogits { block });
            }
            let mut p = Matrix::zeros(t, t);
            let mut row = vec![0.0; t];
            for i in 0..t {
                let visible = if causal { i + 1 } else { t };
                for j in 0..t {
                    row[j] = if j < visible { scores[(i, j)] } else { f64::NEG_INFINITY };
                }
                softmax_in_place(&mut row);
                for j in 0..t {
                    p[(i, j)] = row[j];
                }
            }
            scores.fill(0.0);
            ctx.view_mut((seg.start, h * hd), (t, hd))
                .copy_from(&(&p * vh));
            probs.push(p);
        }
    }
    Ok((ctx, probs))
}

/// Forward pass of the coefficient MLP for every table row.
#[allow(clippy::type_complexity)]
fn coeff_mlp_forward(table: &Matrix, p: [&Matrix; 6]) -> (Matrix, Matrix, Matrix, Matrix, Matrix) {
    let [w1, b1, w2, b2, w3, b3] = p;
    let l = table.nrows();
    let (hid, s) = (w1.ncols(), w3.ncols());
    let mut z1 = Matrix::zeros(l, hid);
    let mut h1 = Matrix::zeros(l, hid);
    let mut z2 = Matrix::zeros(l, hid);
    let mut h2 = Matrix::zeros(l, hid);
    let mut out = Matrix::zeros(s, l);
    for r in 0..l {
        let x: Vec<f64> = table.row(r).iter().copied().collect();
        let a1 = affine_row(&x, w1, b1);
        let g1: Vec<f64> = a1.iter().map(|v| gelu(*v)).collect();
        let a2 = affine_row(&g1, w2, b2);
        let g2: Vec<f64> = a2.iter().map(|v| gelu(*v)).collect();
        let c = affine_row(&g2, w3, b3);
        for j in 0..hid {
            z1[(r, j)] = a1[j];
            h1[(r, j)] = g1[j];
            z2[(r, j)] = a2[j];
            h2[(r, j)] = g2[j];
        }
        out.column_mut(r).copy_from_slice(&c);
    }
    (out, z1, h1, z2, h2)
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[(0, 0)]
    }

    /// A named trainable leaf; its gradient is retrievable by name.
    pub fn param(&mut self, name: &str, value: &Matrix) -> NodeId {
        let id = self.push(value.clone(), Op::Leaf);
        self.names.insert(name.to_string(), id);
        id
    }

    /// Makes an intermediate node's gradient retrievable by name.
    pub fn label(&mut self, id: NodeId, name: &str) {
        self.names.insert(name.to_string(), id);
    }

    /// An unnamed leaf (inputs, frozen tensors).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn check(&self, cond: bool, what: &str) -> Result<()> {
        if cond {
            Ok(())
        } else {
            Err(MasaError::shape(what.to_string()))
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        self.check(va.ncols() == vb.nrows(), "matmul inner dimensions")?;
        let v = va * vb;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        self.check(va.ncols() == vb.ncols(), "matmul_t inner dimensions")?;
        let v = va * vb.transpose();
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(self.value(a).shape() == self.value(b).shape(), "add shapes")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        self.check(vb.nrows() == 1 && vb.ncols() == va.ncols(), "bias row shape")?;
        let v = add_row_broadcast(va, vb);
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).ncols();
        self.check(
            self.value(gain).shape() == (1, d) && self.value(bias).shape() == (1, d),
            "layer norm parameter shapes",
        )?;
        let (y, xhat, inv_std) = layer_norm_forward(self.value(x), self.value(gain), self.value(bias));
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<Range<usize>>,
        causal: bool,
        block: usize,
    ) -> Result<NodeId> {
        let (ctx, probs) = attention_kernel(
            self.value(q),
            self.value(k),
            self.value(v),
            heads,
            &segments,
            causal,
            block,
        )?;
        if !causal {
            // non-causal attention is only exercised by tests of the kernel
            log::debug!("recording non-causal attention");
        }
        Ok(self.push(
            ctx,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
        ))
    }

    pub fn combine(&mut self, coeffs: NodeId, layer: usize, atoms: Vec<NodeId>) -> Result<NodeId> {
        let c = self.value(coeffs);
        self.check(c.nrows() == atoms.len() && layer < c.ncols(), "combine coefficient shape")?;
        let col: Vec<f64> = c.column(layer).iter().copied().collect();
        let values: Vec<Matrix> = atoms.iter().map(|a| self.value(*a).clone()).collect();
        let v = combine_atoms(&values, &col);
        Ok(self.push(
            v,
            Op::Combine {
                coeffs,
                layer,
                atoms,
            },
        ))
    }

    /// `params` = `[w1, b1, w2, b2, w3, b3]`.
    pub fn coeff_mlp(&mut self, table: NodeId, params: [NodeId; 6]) -> Result<NodeId> {
        let p = params.map(|id| self.value(id));
        self.check(
            self.value(table).ncols() == p[0].nrows()
                && p[0].ncols() == p[2].nrows()
                && p[2].ncols() == p[4].nrows(),
            "coefficient mlp shapes",
        )?;
        let (out, z1, h1, z2, h2) = coeff_mlp_forward(self.value(table), p);
        Ok(self.push(
            out,
            Op::CoeffMlp {
                table,
                params,
                z1,
                h1,
                z2,
                h2,
            },
        ))
    }

    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= t.nrows()) {
            return Err(MasaError::invalid(format!(
                "row {bad} out of range for table with {} rows",
                t.nrows()
            )));
        }
        let mut v = Matrix::zeros(ids.len(), t.ncols());
        for (r, &i) in ids.iter().enumerate() {
            v.set_row(r, &t.row(i));
        }
        Ok(self.push(v, Op::Gather { table, ids }))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let lv = self.value(logits);
        self.check(lv.nrows() == targets.len(), "one target per logit row")?;
        if let Some(bad) = targets.iter().find(|&&t| t >= lv.ncols()) {
            return Err(MasaError::invalid(format!("target {bad} >= vocab {}", lv.ncols())));
        }
        let (n, vocab) = lv.shape();
        let mut probs = Matrix::zeros(n, vocab);
        let mut total = 0.0;
        let mut row = vec![0.0; vocab];
        for i in 0..n {
            for j in 0..vocab {
                row[j] = lv[(i, j)];
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
            for j in 0..vocab {
                probs[(i, j)] = (row[j] - lse).exp();
            }
        }
        let loss = Matrix::from_element(1, 1, total / n as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    pub fn half_squared_norm(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::from_element(1, 1, 0.5 * self.value(a).norm_squared());
        self.push(v, Op::HalfSquaredNorm(a))
    }

    /// Back-propagates from a `1 × 1` output node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(MasaError::shape("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::from_element(1, 1, 1.0));
        let mut visited = 0usize;

        fn acc(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
            match &mut grads[id.0] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            visited += 1;
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.value(*b).transpose();
                    let gb = self.value(*a).tr_mul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = g.tr_mul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, bias) => {
                    acc(&mut grads, *bias, column_sums(&g));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let ga = g.zip_map(x, |gv, xv| gv * gelu_grad(xv));
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, &g * *f),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (n, d) = xhat.shape();
                    acc(&mut grads, *bias, column_sums(&g));
                    acc(&mut grads, *gain, column_sums(&g.component_mul(xhat)));
                    let mut gx = Matrix::zeros(n, d);
                    for i in 0..n {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = g[(i, j)] * gv[(0, j)];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[(i, j)];
                        }
                        let k = inv_std[i] / d as f64;
                        for j in 0..d {
                            let dxh = g[(i, j)] * gv[(0, j)];
                            gx[(i, j)] = k * (d as f64 * dxh - sum_dxhat - xhat[(i, j)] * sum_dxhat_xhat);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segments,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut gq = Matrix::zeros(n, d);
                    let mut gk = Matrix::zeros(n, d);
                    let mut gvv = Matrix::zeros(n, d);
                    let mut pi = 0;
                    for seg in segments {
                        let t = seg.len();
                        for h in 0..*heads {
                            let p = &probs[pi];
                            pi += 1;
                            let at = (seg.start, h * hd);
                            let gctx = g.view(at, (t, hd));
                            let qh = qv.view(at, (t, hd));
                            let kh = kv.view(at, (t, hd));
                            let vh = vv.view(at, (t, hd));
                            gvv.view_mut(at, (t, hd)).copy_from(&p.tr_mul(&gctx));
                            let gp = gctx * vh.transpose();
                            let mut gs = Matrix::zeros(t, t);
                            for i in 0..t {
                                let mut dot = 0.0;
                                for j in 0..t {
                                    dot += gp[(i, j)] * p[(i, j)];
                                }
                                for j in 0..t {
                                    gs[(i, j)] = p[(i, j)] * (gp[(i, j)] - dot) * scale;
                                }
                            }
                            gq.view_mut(at, (t, hd)).copy_from(&(&gs * kh));
                            gk.view_mut(at, (t, hd)).copy_from(&(gs.tr_mul(&qh)));
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gvv);
                }
                Op::Combine {
                    coeffs,
                    layer,
                    atoms,
                } => {
                    let c = self.value(*coeffs);
                    let mut gc = Matrix::zeros(c.nrows(), c.ncols());
                    for (s, atom) in atoms.iter().enumerate() {
                        gc[(s, *layer)] = frobenius_dot(&g, self.value(*atom));
                        acc(&mut grads, *atom, &g * c[(s, *layer)]);
                    }
                    acc(&mut grads, *coeffs, gc);
                }
                Op::CoeffMlp {
                    table,
                    params,
                    z1,
                    h1,
                    z2,
                    h2,
                } => {
                    let [w1, _b1, w2, _b2, w3, _b3] = params.map(|id| self.value(id));
                    let gout = g.transpose();
                    let gw3 = h2.tr_mul(&gout);
                    let gb3 = column_sums(&gout);
                    let gh2 = &gout * w3.transpose();
                    let gz2 = gh2.zip_map(z2, |a, z| a * gelu_grad(z));
                    let gw2 = h1.tr_mul(&gz2);
                    let gb2 = column_sums(&gz2);
                    let gh1 = &gz2 * w2.transpose();
                    let gz1 = gh1.zip_map(z1, |a, z| a * gelu_grad(z));
                    let gw1 = self.value(*table).tr_mul(&gz1);
                    let gb1 = column_sums(&gz1);
                    let gtable = &gz1 * w1.transpose();
                    for (id, gp) in params.iter().zip([gw1, gb1, gw2, gb2, gw3, gb3]) {
                        acc(&mut grads, *id, gp);
                    }
                    acc(&mut grads, *table, gtable);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.nrows(), t.ncols());
                    for (r, &i) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(i);
                        row += g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = targets.len() as f64;
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[(i, t)] -= 1.0;
                    }
                    gl *= g[(0, 0)] / n;
                    acc(&mut grads, *logits, gl);
                }
                Op::HalfSquaredNorm(a) => {
                    let ga = self.value(*a) * g[(0, 0)];
                    acc(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (name, id) in &self.names {
            let grad = grads[id.0]
                .clone()
                .unwrap_or_else(|| Matrix::zeros(self.value(*id).nrows(), self.value(*id).ncols()));
            by_name.insert(name.clone(), grad);
        }
        Ok(Gradients { by_name, visited })
    }
}

/// Parameter gradients keyed by leaf name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Matrix>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a named leaf. Leaves unreachable from the output get zeros.
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn global_norm(&self) -> f64 {
        self.by_name.values().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.by_name.values_mut().for_each(|g| *g *= factor);
    }

    /// Number of tape nodes the reverse sweep passed over.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of every entry of the named leaves.
    fn check<F>(params: &[(&str, Matrix)], build: F, tol: f64)
    where
        F: Fn(&mut GradientTape, &[NodeId]) -> NodeId,
    {
        let run = |vals: &[(&str, Matrix)]| {
            let mut tape = GradientTape::new();
            let ids: Vec<NodeId> = vals.iter().map(|(n, m)| tape.param(n, m)).collect();
            let out = build(&mut tape, &ids);
            (tape, out)
        };
        let (tape, out) = run(params);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.visited(), tape.len());
        let eps = 1e-5;
        for (pi, (name, m)) in params.iter().enumerate() {
            for idx in 0..m.len() {
                let mut plus = params.to_vec();
                plus[pi].1.as_mut_slice()[idx] += eps;
                let mut minus = params.to_vec();
                minus[pi].1.as_mut_slice()[idx] -= eps;
                let (tp, op) = run(&plus);
                let (tm, om) = run(&minus);
                let fd = (tp.scalar(op) - tm.scalar(om)) / (2.0 * eps);
                let an = grads.get(name).unwrap().as_slice()[idx];
                assert!(
                    (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn matmul_bias_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = [
            ("x", random(3, 4, &mut rng)),
            ("w", random(4, 2, &mut rng)),
            ("b", random(1, 2, &mut rng)),
            ("u", random(3, 2, &mut rng)),
        ];
        check(
            &params,
            |t, ids| {
                let xw = t.matmul(ids[0], ids[1]).unwrap();
                let z = t.add_row(xw, ids[2]).unwrap();
                let a = t.gelu(z);
                let m = t.matmul_t(a, ids[3]).unwrap();
                let s = t.scale(m, 0.7);
                t.half_squared_norm(s)
            },
            1e-7,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = [
            ("x", random(3, 5, &mut rng)),
            ("g", random(1, 5, &mut rng)),
            ("b", random(1, 5, &mut rng)),
            ("w", random(5, 5, &mut rng)),
        ];
        check(
            &params,
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
                let z = t.matmul(y, ids[3]).unwrap();
                t.half_squared_norm(z)
            },
            1e-7,
        );
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = [
            ("q", random(5, 4, &mut rng)),
            ("k", random(5, 4, &mut rng)),
            ("v", random(5, 4, &mut rng)),
            ("w", random(4, 3, &mut rng)),
        ];
        for causal in [true, false] {
            check(
                &params,
                |t, ids| {
                    let c = t
                        .attention(ids[0], ids[1], ids[2], 2, vec![0..3, 3..5], causal, 0)
                        .unwrap();
                    let z = t.matmul(c, ids[3]).unwrap();
                    t.half_squared_norm(z)
                },
                1e-7,
            );
        }
    }

    #[test]
    fn combine_and_mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = [
            ("table", random(3, 2, &mut rng)),
            ("w1", random(2, 4, &mut rng)),
            ("b1", random(1, 4, &mut rng)),
            ("w2", random(4, 4, &mut rng)),
            ("b2", random(1, 4, &mut rng)),
            ("w3", random(4, 2, &mut rng)),
            ("b3", random(1, 2, &mut rng)),
            ("d0", random(3, 3, &mut rng)),
            ("d1", random(3, 3, &mut rng)),
        ];
        check(
            &params,
            |t, ids| {
                let c = t
                    .coeff_mlp(ids[0], [ids[1], ids[2], ids[3], ids[4], ids[5], ids[6]])
                    .unwrap();
                let w0 = t.combine(c, 0, vec![ids[7], ids[8]]).unwrap();
                let w2 = t.combine(c, 2, vec![ids[7], ids[8]]).unwrap();
                let p = t.matmul(w0, w2).unwrap();
                t.half_squared_norm(p)
            },
            1e-7,
        );
    }

    #[test]
    fn gather_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = [("emb", random(4, 3, &mut rng)), ("out", random(3, 4, &mut rng))];
        check(
            &params,
            |t, ids| {
                let x = t.gather(ids[0], vec![1, 3, 1, 0]).unwrap();
                let logits = t.matmul(x, ids[1]).unwrap();
                t.cross_entropy(logits, vec![2, 0, 3, 3]).unwrap()
            },
            1e-7,
        );
    }

    #[test]
    fn half_norm_coefficient_gradient_is_frobenius_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let atoms = [random(3, 2, &mut rng), random(3, 2, &mut rng)];
        let c = random(2, 3, &mut rng);
        let mut tape = GradientTape::new();
        let cid = tape.param("c", &c);
        let a0 = tape.param("d0", &atoms[0]);
        let a1 = tape.param("d1", &atoms[1]);
        let w = tape.combine(cid, 1, vec![a0, a1]).unwrap();
        let loss = tape.half_squared_norm(w);
        let g = tape.backward(loss).unwrap();
        let what = tape.value(w).clone();
        for s in 0..2 {
            let expected = frobenius_dot(&what, &atoms[s]);
            assert!((g.get("c").unwrap()[(s, 1)] - expected).abs() < 1e-10);
            assert_eq!(g.get("c").unwrap()[(s, 0)], 0.0);
        }
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = GradientTape::new();
        let a = tape.param("a", &Matrix::from_element(2, 2, 1.0));
        let _b = tape.param("b", &Matrix::from_element(3, 1, 1.0));
        let loss = tape.half_squared_norm(a);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("b").unwrap(), &Matrix::zeros(3, 1));
    }

    #[test]
    fn cross_entropy_rejects_out_of_vocab() {
        let mut tape = GradientTape::new();
        let l = tape.constant(Matrix::zeros(2, 3));
        assert!(tape.cross_entropy(l, vec![0, 3]).is_err());
    }
}
