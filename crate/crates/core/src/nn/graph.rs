//! Minimal reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every parameter that took part in the computation.
//! Multi-head attention and layer normalisation are fused ops with
//! hand-written adjoints so a transformer block stays a few dozen nodes.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call.
///
/// Queries are `batches * q_len` rows; keys and values are `kv_len` rows per
/// batch, or a single shared block of `kv_len` rows when `kv_shared` is set.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub heads: usize,
    pub batches: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub kv_shared: bool,
    pub causal: bool,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Cols(Var, usize, usize),
    ConcatCols(Var, Var),
    TakeRows(Var, Vec<usize>),
    RowSum(Var),
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Option<Mat>,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId::from_index(i), g)))
    }

    /// Global L2 norm across all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl<'p> Graph<'p> {
    /// Evaluation graph: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training graph: dropout draws its masks from `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Returns the dropout generator so the caller can continue its stream.
    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.dropout_rng
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant matrix (weight masks, dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let out = self.value(a) * &c;
        self.push(out, Op::MulConst(a, c), &[a])
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Adds a `t x n` block to every consecutive group of `t` rows of `a`.
    pub fn add_tiled(&mut self, a: Var, tile: Var) -> Var {
        let t = self.value(tile).nrows();
        let mut out = self.value(a).clone();
        assert_eq!(out.nrows() % t, 0, "add_tiled: rows not a multiple of tile");
        let tile_val = self.value(tile);
        for mut chunk in out.axis_chunks_iter_mut(Axis(0), t) {
            chunk += tile_val;
        }
        self.push(out, Op::AddTiled(a, tile), &[a, tile])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        self.push(out, Op::Cols(a, start, end), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row mismatch");
        self.push(out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn take_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let out = self.value(a).select(Axis(0), &rows);
        self.push(out, Op::TakeRows(a, rows), &[a])
    }

    /// Sum across columns: `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSum(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Inverted dropout. Identity on evaluation graphs or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        let keep = 1.0 / (1.0 - p);
        let mask = Array2::from_shape_fn((r, c), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        self.mul_const(a, mask)
    }

    /// Row-wise layer normalisation with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * inv;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Fused scaled dot-product attention over `heads` heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.ncols();
        assert_eq!(d % shape.heads, 0, "attention: width not divisible by heads");
        assert_eq!(qv.nrows(), shape.batches * shape.q_len, "attention: query rows");
        let kv_batches = if shape.kv_shared { 1 } else { shape.batches };
        assert_eq!(kv.nrows(), kv_batches * shape.kv_len, "attention: key rows");
        let hd = d / shape.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk) = (shape.q_len, shape.kv_len);
        let offset = tk as isize - tq as isize;
        let qs = qv.as_slice().expect("standard layout");
        let ks = kv.as_slice().expect("standard layout");
        let vs = vv.as_slice().expect("standard layout");
        let mut out = vec![0.0; qv.nrows() * d];
        let mut probs = vec![0.0; shape.batches * shape.heads * tq * tk];
        let mut scores = vec![0.0; tk];
        for b in 0..shape.batches {
            let kb = if shape.kv_shared { 0 } else { b };
            for h in 0..shape.heads {
                let c0 = h * hd;
                for i in 0..tq {
                    let qrow = (b * tq + i) * d + c0;
                    let limit = if shape.causal {
                        ((i as isize + offset + 1).max(0) as usize).min(tk)
                    } else {
                        tk
                    };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        let krow = (kb * tk + j) * d + c0;
                        let mut s = 0.0;
                        for c in 0..hd {
                            s += qs[qrow + c] * ks[krow + c];
                        }
                        s *= scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut().take(limit) {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let pbase = ((b * shape.heads + h) * tq + i) * tk;
                    for j in 0..limit {
                        let p = scores[j] / total;
                        probs[pbase + j] = p;
                        let vrow = (kb * tk + j) * d + c0;
                        for c in 0..hd {
                            out[qrow + c] += p * vs[vrow + c];
                        }
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((qv.nrows(), d), out).expect("attention output shape");
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar node");
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        let mut param_grads: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut param_grads[id.index()], g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, -&g);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let ga = &g * self.value(*b);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = &g * self.value(*a);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::MulConst(a, c) => self.acc(&mut grads, *a, &g * c),
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *row, gr);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::AddTiled(a, tile) => {
                    if self.rg(*tile) {
                        let t = self.value(*tile).nrows();
                        let mut gt = Array2::zeros(self.value(*tile).dim());
                        for chunk in g.axis_chunks_iter(Axis(0), t) {
                            gt += &chunk;
                        }
                        self.acc(&mut grads, *tile, gt);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => self.acc(&mut grads, *a, g * *s),
                Op::Gelu(a) => {
                    let ga = &g * &self.value(*a).mapv(gelu_grad);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * self.value(Var(idx));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = &g * &(self.value(*a) * 2.0);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x < *lo || x > *hi {
                            *gv = 0.0;
                        }
                    });
                    self.acc(&mut grads, *a, ga);
                }
                Op::Cols(a, start, end) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    self.acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(*a).1;
                    if self.rg(*b) {
                        let gb = g.slice(ndarray::s![.., ca..]).to_owned();
                        self.acc(&mut grads, *b, gb);
                    }
                    if self.rg(*a) {
                        let ga = g.slice(ndarray::s![.., ..ca]).to_owned();
                        self.acc(&mut grads, *a, ga);
                    }
                }
                Op::TakeRows(a, rows) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let (n, m) = self.shape(*a);
                    let ga = Array2::from_shape_fn((n, m), |(i, _)| g[[i, 0]]);
                    self.acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    self.acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *beta, gb);
                    }
                    if self.rg(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *gamma, gg);
                    }
                    if self.rg(*x) {
                        let gamma_v = self.value(*gamma);
                        let dxhat = &g * gamma_v;
                        let (n, d) = dxhat.dim();
                        let mut gx = Array2::zeros((n, d));
                        for i in 0..n {
                            let row = dxhat.row(i);
                            let xr = xhat.row(i);
                            let s1: f64 = row.sum();
                            let s2: f64 = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
                            let inv = inv_std[i] / d as f64;
                            for j in 0..d {
                                gx[[i, j]] = inv * (d as f64 * row[j] - s1 - xr[j] * s2);
                            }
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    probs,
                } => {
                    let (gq, gk, gv) = self.attention_backward(&g, *q, *k, *v, shape, probs);
                    if self.rg(*q) {
                        self.acc(&mut grads, *q, gq);
                    }
                    if self.rg(*k) {
                        self.acc(&mut grads, *k, gk);
                    }
                    if self.rg(*v) {
                        self.acc(&mut grads, *v, gv);
                    }
                }
            }
        }
        Gradients { grads: param_grads }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn attention_backward(
        &self,
        g: &Mat,
        q: Var,
        k: Var,
        v: Var,
        shape: &AttnShape,
        probs: &[f64],
    ) -> (Mat, Mat, Mat) {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.ncols();
        let hd = d / shape.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (tq, tk) = (shape.q_len, shape.kv_len);
        let qs = qv.as_slice().expect("standard layout");
        let ks = kv.as_slice().expect("standard layout");
        let vs = vv.as_slice().expect("standard layout");
        let g = g.as_standard_layout();
        let gs = g.as_slice().expect("standard layout");
        let mut gq = vec![0.0; qs.len()];
        let mut gk = vec![0.0; ks.len()];
        let mut gv = vec![0.0; vs.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..shape.batches {
            let kb = if shape.kv_shared { 0 } else { b };
            for h in 0..shape.heads {
                let c0 = h * hd;
                for i in 0..tq {
                    let qrow = (b * tq + i) * d + c0;
                    let pbase = ((b * shape.heads + h) * tq + i) * tk;
                    let mut dot = 0.0;
                    for j in 0..tk {
                        let p = probs[pbase + j];
                        if p == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = (kb * tk + j) * d + c0;
                        let mut s = 0.0;
                        for c in 0..hd {
                            s += gs[qrow + c] * vs[vrow + c];
                            gv[vrow + c] += p * gs[qrow + c];
                        }
                        dp[j] = s;
                        dot += p * s;
                    }
                    for j in 0..tk {
                        let p = probs[pbase + j];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let krow = (kb * tk + j) * d + c0;
                        for c in 0..hd {
                            gq[qrow + c] += ds * ks[krow + c];
                            gk[krow + c] += ds * qs[qrow + c];
                        }
                    }
                }
            }
        }
        (
            Array2::from_shape_vec(qv.dim(), gq).expect("shape"),
            Array2::from_shape_vec(kv.dim(), gk).expect("shape"),
            Array2::from_shape_vec(vv.dim(), gv).expect("shape"),
        )
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    /// Central finite differences of `f` with respect to every entry of every parameter.
    fn check_grads(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let analytic = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            let grads = g.backward(loss);
            store
                .ids()
                .map(|id| grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(store.get(id).dim())))
                .collect::<Vec<_>>()
        };
        let eval = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let l = f(&mut g);
            g.value(l)[[0, 0]]
        };
        let h = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let (r, c) = store.get(id).dim();
            for i in 0..r {
                for j in 0..c {
                    let orig = store.get(id)[[i, j]];
                    store.get_mut(id)[[i, j]] = orig + h;
                    let up = eval(store);
                    store.get_mut(id)[[i, j]] = orig - h;
                    let down = eval(store);
                    store.get_mut(id)[[i, j]] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = analytic[pi][[i, j]];
                    let err = (fd - an).abs() / (1e-6 + fd.abs().max(an.abs()));
                    assert!(err < 1e-5, "param {pi} [{i},{j}]: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let a = store.add("a", randn(&mut rng, 3, 4));
        let b = store.add("b", randn(&mut rng, 4, 2));
        let bias = store.add("bias", randn(&mut rng, 1, 2));
        let tile = store.add("tile", randn(&mut rng, 3, 2));
        let x = randn(&mut rng, 6, 3);
        let mask = Array2::from_shape_fn((3, 4), |(i, j)| ((i + j) % 2) as f64);
        check_grads(&mut store, |g| {
            let xi = g.input(x.clone());
            let av = g.param(a);
            let am = g.mul_const(av, mask.clone());
            let h = g.matmul(xi, am);
            let h = g.gelu(h);
            let bv = g.param(b);
            let o = g.matmul(h, bv);
            let br = g.param(bias);
            let o = g.add_row(o, br);
            let t = g.param(tile);
            let o = g.add_tiled(o, t);
            let e = g.clamp(o, -1.5, 1.5);
            let e = g.exp(e);
            let s = g.square(o);
            let m = g.mul(e, s);
            let c0 = g.cols(m, 0, 1);
            let c1 = g.cols(o, 1, 2);
            let cc = g.concat_cols(c0, c1);
            let tr = g.take_rows(cc, vec![5, 0, 0, 3]);
            let rs = g.row_sum(tr);
            let d = g.sub(rs, rs);
            let d = g.add(d, rs);
            let d = g.scale(d, 0.7);
            g.mean_all(d)
        });
    }

    #[test]
    fn layer_norm_and_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let wq = store.add("wq", randn(&mut rng, 4, 4));
        let wk = store.add("wk", randn(&mut rng, 4, 4));
        let gamma = store.add("gamma", randn(&mut rng, 1, 4));
        let beta = store.add("beta", randn(&mut rng, 1, 4));
        let x = randn(&mut rng, 6, 4);
        let mem = randn(&mut rng, 2, 4);
        let w = randn(&mut rng, 4, 1);
        for &(causal, shared) in &[(true, false), (false, true)] {
            check_grads(&mut store, |g| {
                let xi = g.input(x.clone());
                let q = g.param(wq);
                let q = g.matmul(xi, q);
                let (kvsrc, kv_len) = if shared { (g.input(mem.clone()), 2) } else { (xi, 3) };
                let k = g.param(wk);
                let k = g.matmul(kvsrc, k);
                let shape = AttnShape {
                    heads: 2,
                    batches: 2,
                    q_len: 3,
                    kv_len,
                    kv_shared: shared,
                    causal,
                };
                let a = g.attention(q, k, k, shape);
                let gm = g.param(gamma);
                let bt = g.param(beta);
                let n = g.layer_norm(a, gm, bt);
                let wv = g.input(w.clone());
                let o = g.matmul(n, wv);
                let o = g.square(o);
                g.sum_all(o)
            });
        }
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::default();
        let x = randn(&mut rng, 4, 4);
        let mut y = x.clone();
        y[[3, 0]] += 5.0;
        let shape = AttnShape {
            heads: 2,
            batches: 1,
            q_len: 4,
            kv_len: 4,
            kv_shared: false,
            causal: true,
        };
        let run = |m: &Mat| {
            let mut g = Graph::new(&store);
            let v = g.input(m.clone());
            let o = g.attention(v, v, v, shape);
            g.value(o).clone()
        };
        let (a, b) = (run(&x), run(&y));
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.input(Array2::ones((3, 3)));
        let y = g.dropout(x, 0.5);
        assert_eq!(x, y);
        let mut g = Graph::training(&store, ChaCha8Rng::seed_from_u64(0));
        let x = g.input(Array2::ones((50, 50)));
        let y = g.dropout(x, 0.5);
        let zeros = g.value(y).iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 1000 && zeros < 1500);
    }
}
