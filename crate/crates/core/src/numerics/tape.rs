//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! Every primitive appends one node whose inputs have strictly smaller ids,
//! so construction order is a topological order and [`Tape::backward`] can
//! replay the nodes in reverse exactly once.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Tensor};
use super::NumericsError;
use crate::rng::derive_seed;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, factor: f32 },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu { a: Var },
    Dropout { a: Var, mask: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    MeanRows { a: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    WeightedCe { logits: Var, targets: Vec<usize>, weights: Vec<f32>, probs: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive ops for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    dropout_seed: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; exact zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::matrix(r, c, g.clone()),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match self.grads[v.0].take() {
            Some(g) => Tensor::matrix(r, c, g),
            None => Tensor::zeros(r, c),
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            dropout_seed: 0,
        }
    }

    /// Training tape; dropout masks derive from `(dropout_seed, node index)`.
    pub fn training(dropout_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            dropout_seed,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![m, k],
                found: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out).check_finite("matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![m, k],
                found: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out).check_finite("matmul_nt")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMulNt { a, b }, rg))
    }

    /// Elementwise sum; `b` may also be a `[1, cols]` row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ra, ca) = dims(self.value(a));
        let (rb, cb) = dims(self.value(b));
        let broadcast = if (ra, ca) == (rb, cb) {
            false
        } else if rb == 1 && cb == ca {
            true
        } else {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![ra, ca],
                found: vec![rb, cb],
            });
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = av.to_vec();
        if broadcast {
            for row in out.chunks_mut(ca) {
                for (o, &x) in row.iter_mut().zip(bv) {
                    *o += x;
                }
            }
        } else {
            for (o, &x) in out.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let t = Tensor::matrix(ra, ca, out).check_finite("add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b, broadcast }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var, NumericsError> {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| x * factor).collect();
        let t = Tensor::matrix(r, c, out).check_finite("scale")?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Scale { a, factor }, rg))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// to zero probability (square score matrices only).
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var, NumericsError> {
        let (r, c) = dims(self.value(a));
        if causal && r != c {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![r, r],
                found: vec![r, c],
            });
        }
        let mut out = self.value(a).data().to_vec();
        if !out.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite("softmax input"));
        }
        for (i, row) in out.chunks_mut(c).enumerate() {
            if causal {
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
            } else {
                softmax_in_place(row);
            }
        }
        let t = Tensor::matrix(r, c, out).check_finite("softmax")?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax { a }, rg))
    }

    /// Row-wise layer normalization with affine `gain`/`bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (r, c) = dims(self.value(x));
        for v in [gain, bias] {
            if dims(self.value(v)) != (1, c) {
                return Err(NumericsError::ShapeMismatch {
                    expected: vec![1, c],
                    found: self.value(v).shape().to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0f32; r * c];
        let mut rstd = vec![0.0f32; r];
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs as f32;
            for j in 0..c {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::matrix(r, c, out).check_finite("layer_norm")?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::matrix(r, c, out).check_finite("gelu")?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Gelu { a }, rg))
    }

    /// Inverted dropout with rate `p`; identity on inference tapes.
    pub fn dropout(&mut self, a: Var, p: f32) -> Result<Var, NumericsError> {
        if !self.training || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(NumericsError::BadDropout(p));
        }
        let (r, c) = dims(self.value(a));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.dropout_seed,
            "dropout",
            self.nodes.len() as u64,
        ));
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..r * c)
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let t = Tensor::matrix(r, c, out);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Dropout { a, mask }, rg))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (v, d) = dims(self.value(table));
        if ids.is_empty() {
            return Err(NumericsError::Empty("embedding ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange { index: id, len: v });
            }
            out.extend_from_slice(self.value(table).row_slice(id));
        }
        let t = Tensor::matrix(ids.len(), d, out);
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, c) = dims(self.value(a));
        let mut acc = vec![0.0f64; c];
        for row in self.value(a).data().chunks(c) {
            for (s, &x) in acc.iter_mut().zip(row) {
                *s += x as f64;
            }
        }
        let out = acc.into_iter().map(|s| (s / r as f64) as f32).collect();
        let t = Tensor::matrix(1, c, out);
        let rg = self.rg(a);
        Ok(self.push(t, Op::MeanRows { a }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty("concat_rows"))?;
        let c = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = dims(self.value(p));
            if pc != c {
                return Err(NumericsError::ShapeMismatch {
                    expected: vec![pr, c],
                    found: vec![pr, pc],
                });
            }
            out.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(rows, c, out),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty("concat_cols"))?;
        let r = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = dims(self.value(p));
            if pr != r {
                return Err(NumericsError::ShapeMismatch {
                    expected: vec![r, pc],
                    found: vec![pr, pc],
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(r, total, out),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = dims(self.value(a));
        if len == 0 || start + len > r {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: r,
            });
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(len, c, out), Op::SliceRows { a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = dims(self.value(a));
        if len == 0 || start + len > c {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                len: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(a).row_slice(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, len, out), Op::SliceCols { a, start }, rg))
    }

    /// Mean over rows of `-w[target] · log softmax(logits_row)[target]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: &[f32],
    ) -> Result<Var, NumericsError> {
        let (r, c) = dims(self.value(logits));
        if targets.len() != r {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![r],
                found: vec![targets.len()],
            });
        }
        if class_weights.len() != c {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![c],
                found: vec![class_weights.len()],
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        if !probs.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite("cross_entropy input"));
        }
        let mut total = 0.0f64;
        for (i, row) in self.value(logits).data().chunks(c).enumerate() {
            let t = targets[i];
            if t >= c {
                return Err(NumericsError::IndexOutOfRange { index: t, len: c });
            }
            let lse = super::tensor::log_sum_exp(row);
            total += class_weights[t] as f64 * (lse - row[t] as f64);
            softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        let loss = Tensor::scalar((total / r as f64) as f32).check_finite("cross_entropy")?;
        let rg = self.rg(logits);
        Ok(self.push(
            loss,
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                weights: class_weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.nodes.is_empty() {
            return Err(NumericsError::Empty("tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let n = loss.0 + 1;
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|nd| dims(&nd.value)).collect();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let (r, c) = shapes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = shapes[a.0];
                    let nn = shapes[b.0].1;
                    if self.rg(*a) {
                        let ga = grad_buf(&mut grads, a.0, m * k);
                        gemm_nt(&g, self.value(*b).data(), ga, m, nn, k);
                    }
                    if self.rg(*b) {
                        let gb = grad_buf(&mut grads, b.0, k * nn);
                        gemm_tn(self.value(*a).data(), &g, gb, m, k, nn);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (m, k) = shapes[a.0];
                    let nn = shapes[b.0].0;
                    if self.rg(*a) {
                        let ga = grad_buf(&mut grads, a.0, m * k);
                        gemm_nn(&g, self.value(*b).data(), ga, m, nn, k);
                    }
                    if self.rg(*b) {
                        let gb = grad_buf(&mut grads, b.0, nn * k);
                        gemm_tn(&g, self.value(*a).data(), gb, m, nn, k);
                    }
                }
                Op::Add { a, b, broadcast } => {
                    if self.rg(*a) {
                        axpy(grad_buf(&mut grads, a.0, r * c), &g, 1.0);
                    }
                    if self.rg(*b) {
                        if *broadcast {
                            let gb = grad_buf(&mut grads, b.0, c);
                            for row in g.chunks(c) {
                                for (o, &x) in gb.iter_mut().zip(row) {
                                    *o += x;
                                }
                            }
                        } else {
                            axpy(grad_buf(&mut grads, b.0, r * c), &g, 1.0);
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    if self.rg(*a) {
                        axpy(grad_buf(&mut grads, a.0, r * c), &g, *factor);
                    }
                }
                Op::Softmax { a } => {
                    if self.rg(*a) {
                        let y = node.value.data();
                        let ga = grad_buf(&mut grads, a.0, r * c);
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let s: f64 = yr.iter().zip(gr).map(|(&p, &q)| p as f64 * q as f64).sum();
                            let s = s as f32;
                            for j in 0..c {
                                ga[i * c + j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain).data();
                    if self.rg(*gain) {
                        let gg = grad_buf(&mut grads, gain.0, c);
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    if self.rg(*bias) {
                        let gb = grad_buf(&mut grads, bias.0, c);
                        for row in g.chunks(c) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    if self.rg(*x) {
                        let gx = grad_buf(&mut grads, x.0, r * c);
                        for i in 0..r {
                            let mut mean_dh = 0.0f64;
                            let mut mean_dh_h = 0.0f64;
                            for j in 0..c {
                                let dh = (g[i * c + j] * gv[j]) as f64;
                                mean_dh += dh;
                                mean_dh_h += dh * xhat[i * c + j] as f64;
                            }
                            mean_dh /= c as f64;
                            mean_dh_h /= c as f64;
                            for j in 0..c {
                                let dh = (g[i * c + j] * gv[j]) as f64;
                                let h = xhat[i * c + j] as f64;
                                gx[i * c + j] +=
                                    (rstd[i] as f64 * (dh - mean_dh - h * mean_dh_h)) as f32;
                            }
                        }
                    }
                }
                Op::Gelu { a } => {
                    if self.rg(*a) {
                        let xv = self.value(*a).data();
                        let ga = grad_buf(&mut grads, a.0, r * c);
                        for j in 0..r * c {
                            ga[j] += g[j] * gelu_grad(xv[j]);
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    if self.rg(*a) {
                        let ga = grad_buf(&mut grads, a.0, r * c);
                        for j in 0..r * c {
                            ga[j] += g[j] * mask[j];
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.rg(*table) {
                        let (v, d) = shapes[table.0];
                        let gt = grad_buf(&mut grads, table.0, v * d);
                        for (i, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] += g[i * d + j];
                            }
                        }
                    }
                }
                Op::MeanRows { a } => {
                    if self.rg(*a) {
                        let (ar, ac) = shapes[a.0];
                        let inv = 1.0 / ar as f32;
                        let ga = grad_buf(&mut grads, a.0, ar * ac);
                        for row in ga.chunks_mut(ac) {
                            for (o, &x) in row.iter_mut().zip(&g) {
                                *o += x * inv;
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = shapes[p.0];
                        if self.rg(*p) {
                            axpy(
                                grad_buf(&mut grads, p.0, pr * pc),
                                &g[offset..offset + pr * pc],
                                1.0,
                            );
                        }
                        offset += pr * pc;
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut col = 0;
                    for p in parts {
                        let (pr, pc) = shapes[p.0];
                        if self.rg(*p) {
                            let gp = grad_buf(&mut grads, p.0, pr * pc);
                            for i in 0..pr {
                                for j in 0..pc {
                                    gp[i * pc + j] += g[i * c + col + j];
                                }
                            }
                        }
                        col += pc;
                    }
                }
                Op::SliceRows { a, start } => {
                    if self.rg(*a) {
                        let (ar, ac) = shapes[a.0];
                        let ga = grad_buf(&mut grads, a.0, ar * ac);
                        axpy(&mut ga[start * ac..(start + r) * ac], &g, 1.0);
                    }
                }
                Op::SliceCols { a, start } => {
                    if self.rg(*a) {
                        let (ar, ac) = shapes[a.0];
                        let ga = grad_buf(&mut grads, a.0, ar * ac);
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * ac + start + j] += g[i * c + j];
                            }
                        }
                    }
                }
                Op::WeightedCe {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    if self.rg(*logits) {
                        let (lr, lc) = shapes[logits.0];
                        let scale = g[0] / lr as f32;
                        let gl = grad_buf(&mut grads, logits.0, lr * lc);
                        for i in 0..lr {
                            let w = weights[targets[i]] * scale;
                            for j in 0..lc {
                                let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                                gl[i * lc + j] += w * (probs[i * lc + j] - onehot);
                            }
                        }
                    }
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn grad_buf(grads: &mut [Option<Vec<f32>>], idx: usize, len: usize) -> &mut [f32] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f32], src: &[f32], alpha: f32) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.matmul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn disconnected_parameter_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::row(vec![5.0, -1.0]));
        let m = tape.mean_rows(x).unwrap();
        let w = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]));
        let loss = tape.matmul(m, w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NonScalarLoss(_))
        ));
        assert!(matches!(
            Tape::new().backward(Var(0)),
            Err(NumericsError::Empty(_))
        ));
    }

    #[test]
    fn non_finite_forward_raises() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![f32::MAX, f32::MAX]));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(NumericsError::NonFinite(_))
        ));
        let y = tape.constant(Tensor::row(vec![f32::NAN, 0.0]));
        assert!(tape.softmax(y, false).is_err());
    }

    #[test]
    fn weighted_ce_values() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::row(vec![0.0, 0.0]));
        let l = tape.weighted_cross_entropy(z, &[1], &[1.0, 3.0]).unwrap();
        assert!((tape.value(l).item() as f64 - 3.0 * 2f64.ln()).abs() < 1e-6);
        let l0 = tape.weighted_cross_entropy(z, &[0], &[1.0, 1.0]).unwrap();
        assert!((tape.value(l0).item() as f64 - 2f64.ln()).abs() < 1e-6);
        let confident = tape.constant(Tensor::row(vec![-30.0, 30.0]));
        let l1 = tape
            .weighted_cross_entropy(confident, &[1], &[1.0, 1.0])
            .unwrap();
        assert!(tape.value(l1).item() < 1e-12);
        assert!(matches!(
            tape.weighted_cross_entropy(z, &[2], &[1.0, 1.0]),
            Err(NumericsError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn dropout_mask_is_reproducible_and_inference_identity() {
        let input = Tensor::full(4, 8, 1.0);
        let run = |seed| {
            let mut tape = Tape::training(seed);
            let x = tape.param(input.clone());
            let d = tape.dropout(x, 0.5).unwrap();
            tape.value(d).data().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let d = tape.dropout(x, 0.5).unwrap();
        assert_eq!(d, x);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::matrix(2, 2, vec![1.0, 5.0, 0.0, 0.0]));
        let p = tape.softmax(s, true).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.5, 0.5]);
    }
}
