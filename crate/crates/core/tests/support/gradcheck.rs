//! Random small expression graphs evaluated two ways: on the `f32` tape
//! (for reverse-mode gradients) and by an independent `f64` reference
//! interpreter (for central finite differences).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steplab::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub enum Expr {
    Param(usize),
    Const(Tensor),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Scale(usize, f32),
    Softmax(usize, bool),
    LayerNorm(usize, usize, usize),
    Gelu(usize),
    Embedding(usize, Vec<usize>),
    MeanRows(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    WeightedCe(usize, Vec<usize>, Vec<f32>),
}

#[derive(Clone, Debug)]
pub struct Graph {
    pub params: Vec<Tensor>,
    pub nodes: Vec<Expr>,
}

#[derive(Clone, Debug)]
struct Mat {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl Mat {
    fn from(t: &Tensor) -> Self {
        Mat {
            r: t.rows(),
            c: t.cols(),
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }
}

fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl Graph {
    /// Reference forward in `f64`; returns the final node's scalar.
    pub fn eval_f64(&self, params: &[Vec<f64>]) -> f64 {
        let mut vals: Vec<Mat> = Vec::new();
        for e in &self.nodes {
            let v = match e {
                Expr::Param(i) => {
                    let p = &self.params[*i];
                    Mat {
                        r: p.rows(),
                        c: p.cols(),
                        d: params[*i].clone(),
                    }
                }
                Expr::Const(t) => Mat::from(t),
                Expr::MatMul(a, b) => {
                    let (a, b) = (&vals[*a], &vals[*b]);
                    let mut d = vec![0.0; a.r * b.c];
                    for i in 0..a.r {
                        for j in 0..b.c {
                            d[i * b.c + j] = (0..a.c).map(|p| a.at(i, p) * b.at(p, j)).sum();
                        }
                    }
                    Mat { r: a.r, c: b.c, d }
                }
                Expr::MatMulNt(a, b) => {
                    let (a, b) = (&vals[*a], &vals[*b]);
                    let mut d = vec![0.0; a.r * b.r];
                    for i in 0..a.r {
                        for j in 0..b.r {
                            d[i * b.r + j] = (0..a.c).map(|p| a.at(i, p) * b.at(j, p)).sum();
                        }
                    }
                    Mat { r: a.r, c: b.r, d }
                }
                Expr::Add(a, b) => {
                    let (a, b) = (&vals[*a], &vals[*b]);
                    let d = (0..a.r * a.c)
                        .map(|k| a.d[k] + if b.r == 1 { b.d[k % a.c] } else { b.d[k] })
                        .collect();
                    Mat { r: a.r, c: a.c, d }
                }
                Expr::Scale(a, f) => {
                    let a = &vals[*a];
                    Mat {
                        r: a.r,
                        c: a.c,
                        d: a.d.iter().map(|x| x * *f as f64).collect(),
                    }
                }
                Expr::Softmax(a, causal) => {
                    let a = &vals[*a];
                    let mut d = vec![0.0; a.r * a.c];
                    for i in 0..a.r {
                        let lim = if *causal { i + 1 } else { a.c };
                        let m = (0..lim).map(|j| a.at(i, j)).fold(f64::MIN, f64::max);
                        let s: f64 = (0..lim).map(|j| (a.at(i, j) - m).exp()).sum();
                        for j in 0..lim {
                            d[i * a.c + j] = (a.at(i, j) - m).exp() / s;
                        }
                    }
                    Mat { r: a.r, c: a.c, d }
                }
                Expr::LayerNorm(x, g, b) => {
                    let (x, g, b) = (&vals[*x], &vals[*g], &vals[*b]);
                    let mut d = vec![0.0; x.r * x.c];
                    for i in 0..x.r {
                        let mean = (0..x.c).map(|j| x.at(i, j)).sum::<f64>() / x.c as f64;
                        let var = (0..x.c).map(|j| (x.at(i, j) - mean).powi(2)).sum::<f64>()
                            / x.c as f64;
                        let rs = 1.0 / (var + 1e-5).sqrt();
                        for j in 0..x.c {
                            d[i * x.c + j] = (x.at(i, j) - mean) * rs * g.d[j] + b.d[j];
                        }
                    }
                    Mat { r: x.r, c: x.c, d }
                }
                Expr::Gelu(a) => {
                    let a = &vals[*a];
                    Mat {
                        r: a.r,
                        c: a.c,
                        d: a.d.iter().map(|&x| gelu64(x)).collect(),
                    }
                }
                Expr::Embedding(t, ids) => {
                    let t = &vals[*t];
                    let mut d = Vec::new();
                    for &id in ids {
                        d.extend_from_slice(&t.d[id * t.c..(id + 1) * t.c]);
                    }
                    Mat {
                        r: ids.len(),
                        c: t.c,
                        d,
                    }
                }
                Expr::MeanRows(a) => {
                    let a = &vals[*a];
                    let d = (0..a.c)
                        .map(|j| (0..a.r).map(|i| a.at(i, j)).sum::<f64>() / a.r as f64)
                        .collect();
                    Mat { r: 1, c: a.c, d }
                }
                Expr::ConcatRows(ps) => {
                    let c = vals[ps[0]].c;
                    let mut d = Vec::new();
                    let mut r = 0;
                    for p in ps {
                        d.extend_from_slice(&vals[*p].d);
                        r += vals[*p].r;
                    }
                    Mat { r, c, d }
                }
                Expr::ConcatCols(ps) => {
                    let r = vals[ps[0]].r;
                    let c: usize = ps.iter().map(|p| vals[*p].c).sum();
                    let mut d = Vec::new();
                    for i in 0..r {
                        for p in ps {
                            let m = &vals[*p];
                            d.extend_from_slice(&m.d[i * m.c..(i + 1) * m.c]);
                        }
                    }
                    Mat { r, c, d }
                }
                Expr::SliceRows(a, s, l) => {
                    let a = &vals[*a];
                    Mat {
                        r: *l,
                        c: a.c,
                        d: a.d[s * a.c..(s + l) * a.c].to_vec(),
                    }
                }
                Expr::SliceCols(a, s, l) => {
                    let a = &vals[*a];
                    let mut d = Vec::new();
                    for i in 0..a.r {
                        d.extend_from_slice(&a.d[i * a.c + s..i * a.c + s + l]);
                    }
                    Mat { r: a.r, c: *l, d }
                }
                Expr::WeightedCe(z, targets, w) => {
                    let z = &vals[*z];
                    let mut total = 0.0;
                    for i in 0..z.r {
                        let m = (0..z.c).map(|j| z.at(i, j)).fold(f64::MIN, f64::max);
                        let lse = m + (0..z.c).map(|j| (z.at(i, j) - m).exp()).sum::<f64>().ln();
                        total += w[targets[i]] as f64 * (lse - z.at(i, targets[i]));
                    }
                    Mat {
                        r: 1,
                        c: 1,
                        d: vec![total / z.r as f64],
                    }
                }
            };
            vals.push(v);
        }
        vals.last().unwrap().d[0]
    }

    /// Builds the graph on a tape; returns (param vars, loss var).
    pub fn build(&self, tape: &mut Tape) -> (Vec<Var>, Var) {
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let mut vars: Vec<Var> = Vec::new();
        for e in &self.nodes {
            let v = match e {
                Expr::Param(i) => params[*i],
                Expr::Const(t) => tape.constant(t.clone()),
                Expr::MatMul(a, b) => tape.matmul(vars[*a], vars[*b]).unwrap(),
                Expr::MatMulNt(a, b) => tape.matmul_nt(vars[*a], vars[*b]).unwrap(),
                Expr::Add(a, b) => tape.add(vars[*a], vars[*b]).unwrap(),
                Expr::Scale(a, f) => tape.scale(vars[*a], *f).unwrap(),
                Expr::Softmax(a, c) => tape.softmax(vars[*a], *c).unwrap(),
                Expr::LayerNorm(x, g, b) => tape.layer_norm(vars[*x], vars[*g], vars[*b]).unwrap(),
                Expr::Gelu(a) => tape.gelu(vars[*a]).unwrap(),
                Expr::Embedding(t, ids) => tape.embedding(vars[*t], ids).unwrap(),
                Expr::MeanRows(a) => tape.mean_rows(vars[*a]).unwrap(),
                Expr::ConcatRows(ps) => {
                    let vs: Vec<Var> = ps.iter().map(|p| vars[*p]).collect();
                    tape.concat_rows(&vs).unwrap()
                }
                Expr::ConcatCols(ps) => {
                    let vs: Vec<Var> = ps.iter().map(|p| vars[*p]).collect();
                    tape.concat_cols(&vs).unwrap()
                }
                Expr::SliceRows(a, s, l) => tape.slice_rows(vars[*a], *s, *l).unwrap(),
                Expr::SliceCols(a, s, l) => tape.slice_cols(vars[*a], *s, *l).unwrap(),
                Expr::WeightedCe(z, t, w) => tape.weighted_cross_entropy(vars[*z], t, w).unwrap(),
            };
            vars.push(v);
        }
        (params, *vars.last().unwrap())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f32) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect())
}

struct Builder {
    params: Vec<Tensor>,
    nodes: Vec<Expr>,
    shapes: Vec<(usize, usize)>,
}

impl Builder {
    fn push(&mut self, e: Expr, shape: (usize, usize)) -> usize {
        self.nodes.push(e);
        self.shapes.push(shape);
        self.nodes.len() - 1
    }
    fn param(&mut self, t: Tensor) -> usize {
        let shape = (t.rows(), t.cols());
        self.params.push(t);
        let i = self.params.len() - 1;
        self.push(Expr::Param(i), shape)
    }
    fn constant(&mut self, t: Tensor) -> usize {
        let shape = (t.rows(), t.cols());
        self.push(Expr::Const(t), shape)
    }
    fn linear(&mut self, rng: &mut ChaCha8Rng, x: usize, out: usize) -> usize {
        let (r, c) = self.shapes[x];
        let w = self.param(rand_tensor(rng, c, out, 0.8));
        let b = self.param(rand_tensor(rng, 1, out, 0.3));
        let m = self.push(Expr::MatMul(x, w), (r, out));
        self.push(Expr::Add(m, b), (r, out))
    }
    fn layer_norm(&mut self, rng: &mut ChaCha8Rng, x: usize) -> usize {
        let (r, c) = self.shapes[x];
        let g = self.param(Tensor::matrix(
            1,
            c,
            (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
        ));
        let b = self.param(rand_tensor(rng, 1, c, 0.2));
        self.push(Expr::LayerNorm(x, g, b), (r, c))
    }
    fn finish_ce(&mut self, rng: &mut ChaCha8Rng, logits: usize) -> Graph {
        let (r, c) = self.shapes[logits];
        let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
        let weights: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5..3.0)).collect();
        self.push(Expr::WeightedCe(logits, targets, weights), (1, 1));
        Graph {
            params: std::mem::take(&mut self.params),
            nodes: std::mem::take(&mut self.nodes),
        }
    }
}

/// Random graph `index` of the suite. Templates rotate through an MLP, an
/// attention block over embeddings, and a slice/concat mixer.
pub fn random_graph(seed: u64, index: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut b = Builder {
        params: vec![],
        nodes: vec![],
        shapes: vec![],
    };
    match index % 3 {
        0 => {
            // 2-layer MLP with layer norm and GeLU
            let n = rng.gen_range(2..5);
            let din = rng.gen_range(2..6);
            let h = rng.gen_range(4..8);
            let classes = rng.gen_range(2..5);
            let x = b.constant(rand_tensor(&mut rng, n, din, 1.0));
            let h1 = b.linear(&mut rng, x, h);
            let h1 = if rng.gen_bool(0.7) { b.layer_norm(&mut rng, h1) } else { h1 };
            let a = b.push(Expr::Gelu(h1), (n, h));
            let z = b.linear(&mut rng, a, classes);
            b.finish_ce(&mut rng, z)
        }
        1 => {
            // embedding -> single-head attention -> mean pool -> classifier
            let vocab = rng.gen_range(4..8);
            let d = rng.gen_range(4..7);
            let t = rng.gen_range(2..5);
            let table = b.param(rand_tensor(&mut rng, vocab, d, 1.0));
            let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(0..vocab)).collect();
            let x = b.push(Expr::Embedding(table, ids), (t, d));
            let wq = b.param(rand_tensor(&mut rng, d, d, 0.5));
            let wk = b.param(rand_tensor(&mut rng, d, d, 0.5));
            let wv = b.param(rand_tensor(&mut rng, d, d, 0.7));
            let q = b.push(Expr::MatMul(x, wq), (t, d));
            let k = b.push(Expr::MatMul(x, wk), (t, d));
            let v = b.push(Expr::MatMul(x, wv), (t, d));
            let s = b.push(Expr::MatMulNt(q, k), (t, t));
            let s = b.push(Expr::Scale(s, 1.0 / (d as f32).sqrt()), (t, t));
            let causal = rng.gen_bool(0.5);
            let p = b.push(Expr::Softmax(s, causal), (t, t));
            let o = b.push(Expr::MatMul(p, v), (t, d));
            let o = b.push(Expr::Add(o, x), (t, d));
            let o = b.layer_norm(&mut rng, o);
            let pooled = b.push(Expr::MeanRows(o), (1, d));
            let classes = rng.gen_range(2..4);
            let z = b.linear(&mut rng, pooled, classes);
            b.finish_ce(&mut rng, z)
        }
        _ => {
            // slice / concat plumbing around a linear map
            let n = rng.gen_range(3..6);
            let c = rng.gen_range(4..7);
            let x = b.param(rand_tensor(&mut rng, n, c, 1.0));
            let top = b.push(Expr::SliceRows(x, 0, 2), (2, c));
            let rest = b.push(Expr::SliceRows(x, 2, n - 2), (n - 2, c));
            let left = b.push(Expr::SliceCols(x, 0, 2), (n, 2));
            let right = b.push(Expr::SliceCols(x, 2, c - 2), (n, c - 2));
            let swapped = b.push(Expr::ConcatCols(vec![right, left]), (n, c));
            let stacked = b.push(Expr::ConcatRows(vec![rest, top]), (n, c));
            let mixed = b.push(Expr::Add(swapped, stacked), (n, c));
            let act = b.push(Expr::Gelu(mixed), (n, c));
            let p = b.push(Expr::Softmax(act, false), (n, c));
            let z = b.linear(&mut rng, p, 3);
            b.finish_ce(&mut rng, z)
        }
    }
}

/// Worst per-parameter relative error `‖g_ad − g_fd‖ / max(‖g_fd‖, ‖g_ad‖, 1e-8)`
/// between tape gradients and central differences (`h`) of the reference.
pub fn max_relative_error(g: &Graph, h: f64) -> f64 {
    let mut tape = Tape::new();
    let (params, loss) = g.build(&mut tape);
    let grads = tape.backward(loss).unwrap();
    let base: Vec<Vec<f64>> = g
        .params
        .iter()
        .map(|p| p.data().iter().map(|&v| v as f64).collect())
        .collect();
    let mut worst = 0.0f64;
    for (pi, var) in params.iter().enumerate() {
        let ad = grads.get(*var);
        let mut num = 0.0;
        let mut den_fd = 0.0;
        let mut den_ad = 0.0;
        for j in 0..base[pi].len() {
            let mut plus = base.clone();
            plus[pi][j] += h;
            let mut minus = base.clone();
            minus[pi][j] -= h;
            let fd = (g.eval_f64(&plus) - g.eval_f64(&minus)) / (2.0 * h);
            let a = ad.data()[j] as f64;
            num += (a - fd).powi(2);
            den_fd += fd * fd;
            den_ad += a * a;
        }
        let rel = num.sqrt() / den_fd.sqrt().max(den_ad.sqrt()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
