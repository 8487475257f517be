//! Layer helpers shared by the language model and the uncertainty head.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub(crate) fn normal_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("valid std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Multi-head self-attention core over independent row segments.
///
/// `qkv` is `[N, 3d]` with queries, keys and values side by side; each
/// `(start, len)` segment attends only within itself. Returns `[N, d]`.
pub(crate) fn segmented_attention(
    tape: &mut Tape,
    qkv: Var,
    segments: &[(usize, usize)],
    d_model: usize,
    n_heads: usize,
    causal: bool,
) -> Result<Var, NumericsError> {
    let dh = d_model / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut seg_out = Vec::with_capacity(segments.len());
    for &(start, len) in segments {
        let block = if segments.len() == 1 && start == 0 && tape.value(qkv).rows() == len {
            qkv
        } else {
            tape.slice_rows(qkv, start, len)?
        };
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let q = tape.slice_cols(block, h * dh, dh)?;
            let k = tape.slice_cols(block, d_model + h * dh, dh)?;
            let v = tape.slice_cols(block, 2 * d_model + h * dh, dh)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale)?;
            let p = tape.softmax(s, causal)?;
            heads.push(tape.matmul(p, v)?);
        }
        seg_out.push(if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        });
    }
    if seg_out.len() == 1 {
        Ok(seg_out[0])
    } else {
        tape.concat_rows(&seg_out)
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub(crate) fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
