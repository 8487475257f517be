use super::model::{
    LanguageModel, B_FF1, B_FF2, B_O, B_QKV, LN1_B, LN1_G, LN2_B, LN2_G, W_FF1, W_FF2, W_O, W_QKV,
};
use super::LmError;
use crate::numerics::{dot, gelu, gemm_nn, softmax_in_place, Tensor};

/// Output of feeding one token.
#[derive(Debug, Clone)]
pub struct DecoderStep {
    /// Next-token logits at this position.
    pub logits: Vec<f32>,
    /// Full attention row of this position's query, one per (layer, head),
    /// layer-major; each row has `position + 1` entries.
    pub attention: Vec<Vec<f32>>,
    /// Final-layer (post layer norm) hidden state.
    pub hidden: Vec<f32>,
}

/// Incremental decoder with a key/value cache. Arithmetic mirrors the tape
/// forward pass row by row.
#[derive(Debug, Clone)]
pub struct Decoder<'m> {
    model: &'m LanguageModel,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

fn layer_norm(x: &[f32], g: &Tensor, b: &Tensor) -> Vec<f32> {
    let c = x.len();
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
    let var = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / c as f64;
    let rs = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, &v)| ((v as f64 - mean) * rs) as f32 * g.data()[j] + b.data()[j])
        .collect()
}

fn affine(x: &[f32], w: &Tensor, b: &Tensor) -> Vec<f32> {
    let n = w.cols();
    let mut out = vec![0.0; n];
    gemm_nn(x, w.data(), &mut out, 1, x.len(), n);
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    out
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m LanguageModel) -> Self {
        let l = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    /// Number of tokens fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn model(&self) -> &'m LanguageModel {
        self.model
    }

    pub fn step(&mut self, token: usize) -> Result<DecoderStep, LmError> {
        let m = self.model;
        let cfg = &m.config;
        if self.len >= cfg.context {
            return Err(LmError::ContextOverflow {
                len: self.len + 1,
                context: cfg.context,
            });
        }
        if token >= cfg.vocab_size {
            return Err(LmError::UnknownToken(token));
        }
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f32).sqrt();
        let pos = self.len;
        let mut x: Vec<f32> = m
            .tok_emb()
            .row_slice(token)
            .iter()
            .zip(m.pos_emb().row_slice(pos))
            .map(|(a, b)| a + b)
            .collect();
        let mut attention = Vec::with_capacity(cfg.n_layers * nh);
        for l in 0..cfg.n_layers {
            let h = layer_norm(&x, m.layer(l, LN1_G), m.layer(l, LN1_B));
            let qkv = affine(&h, m.layer(l, W_QKV), m.layer(l, B_QKV));
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..3 * d]);
            let keys = &self.keys[l];
            let values = &self.values[l];
            let mut concat = vec![0.0f32; d];
            for head in 0..nh {
                let q = &qkv[head * dh..(head + 1) * dh];
                let mut row: Vec<f32> = (0..=pos)
                    .map(|j| dot(q, &keys[j * d + head * dh..j * d + (head + 1) * dh]) * scale)
                    .collect();
                softmax_in_place(&mut row);
                let out = &mut concat[head * dh..(head + 1) * dh];
                for (j, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let v = &values[j * d + head * dh..j * d + (head + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
                attention.push(row);
            }
            let a = affine(&concat, m.layer(l, W_O), m.layer(l, B_O));
            for (xv, av) in x.iter_mut().zip(&a) {
                *xv += av;
            }
            let h = layer_norm(&x, m.layer(l, LN2_G), m.layer(l, LN2_B));
            let mut f = affine(&h, m.layer(l, W_FF1), m.layer(l, B_FF1));
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let f = affine(&f, m.layer(l, W_FF2), m.layer(l, B_FF2));
            for (xv, fv) in x.iter_mut().zip(&f) {
                *xv += fv;
            }
        }
        let hidden = layer_norm(&x, m.final_block(0), m.final_block(1));
        let logits = affine(&hidden, m.final_block(2), m.final_block(3));
        self.len += 1;
        Ok(DecoderStep {
            logits,
            attention,
            hidden,
        })
    }
}
