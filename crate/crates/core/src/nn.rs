//! Dense building blocks with hand-written backward passes.
//!
//! Every layer works on token matrices of shape `(tokens, channels)`.
//! `forward` returns the output together with whatever the matching
//! `backward` needs; `backward` accumulates parameter gradients into a
//! zero-initialised twin of the layer and returns the input gradient.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

/// Visitor over named parameter tensors.
///
/// Visiting order is fixed, so two structurally equal modules (a model and
/// its gradient twin) enumerate tensors in the same order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => x.mapv(|v| v.max(0.0)),
            Activation::Gelu => x.mapv(gelu),
        }
    }

    pub fn derivative(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Gelu => x.mapv(gelu_grad),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Fully connected layer, `y = x W^T + b` with `W` stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform fan-in initialisation, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform(rng, output, input, bound),
            bias: Array1::from_shape_fn(output, |_| rng.random_range(-bound..=bound)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view().into_dyn());
        f(&join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), self.weight.view_mut().into_dyn());
        f(&join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / dim;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / dim;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dim = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / dim;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / dim;
        let mut dx = dxhat;
        Zip::from(dx.rows_mut())
            .and(cache.xhat.rows())
            .and(&mean_dxhat)
            .and(&mean_dxhat_xhat)
            .and(&cache.inv_std)
            .for_each(|mut row, xh, &m1, &m2, &is| {
                Zip::from(&mut row).and(&xh).for_each(|d, &xv| {
                    *d = is * (*d - m1 - xv * m2);
                });
            });
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "gamma"), self.gamma.view_mut().into_dyn());
        f(&join(prefix, "beta"), self.beta.view_mut().into_dyn());
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    x: Array2<f64>,
    qkv: Array2<f64>,
    /// per-head attention probabilities, `(tokens, tokens)`
    pub probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn init(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "width {dim} not divisible by {heads} heads"
        );
        Self {
            qkv: Linear::init(dim, 3 * dim, rng),
            proj: Linear::init(dim, dim, rng),
            heads,
        }
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            qkv: Linear::zeros(dim, 3 * dim),
            proj: Linear::zeros(dim, dim),
            heads,
        }
    }

    fn dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let dim = self.dim();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut concat = Array2::zeros((x.nrows(), dim));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let q = qkv.slice(s![.., lo..hi]);
            let k = qkv.slice(s![.., dim + lo..dim + hi]);
            let v = qkv.slice(s![.., 2 * dim + lo..2 * dim + hi]);
            let p = softmax_rows(&(q.dot(&k.t()) * scale));
            concat.slice_mut(s![.., lo..hi]).assign(&p.dot(&v));
            probs.push(p);
        }
        let out = self.proj.forward(&concat);
        (
            out,
            AttentionCache {
                x: x.clone(),
                qkv,
                probs,
                concat,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        grad: &mut MultiHeadAttention,
    ) -> Array2<f64> {
        let dim = self.dim();
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let d_concat = self.proj.backward(&cache.concat, dy, &mut grad.proj);
        let mut d_qkv = Array2::zeros(cache.qkv.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let q = cache.qkv.slice(s![.., lo..hi]);
            let k = cache.qkv.slice(s![.., dim + lo..dim + hi]);
            let v = cache.qkv.slice(s![.., 2 * dim + lo..2 * dim + hi]);
            let d_o = d_concat.slice(s![.., lo..hi]);
            let d_p = d_o.dot(&v.t());
            let d_v = p.t().dot(&d_o);
            let row_dot = (&d_p * p).sum_axis(Axis(1));
            let d_scores = p * &(d_p - &row_dot.insert_axis(Axis(1))) * scale;
            let d_q = d_scores.dot(&k);
            let d_k = d_scores.t().dot(&q);
            d_qkv.slice_mut(s![.., lo..hi]).assign(&d_q);
            d_qkv.slice_mut(s![.., dim + lo..dim + hi]).assign(&d_k);
            d_qkv
                .slice_mut(s![.., 2 * dim + lo..2 * dim + hi])
                .assign(&d_v);
        }
        self.qkv.backward(&cache.x, &d_qkv, &mut grad.qkv)
    }
}

impl Params for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Pre-normalisation transformer encoder layer:
/// `x + Attn(LN(x))` followed by `x + FFN(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

pub struct TransformerCache {
    ln1: LayerNormCache,
    pub attn: AttentionCache,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    f1: Array2<f64>,
    r: Array2<f64>,
}

impl TransformerLayer {
    pub fn init(
        dim: usize,
        heads: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::init(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::init(dim, hidden, rng),
            fc2: Linear::init(hidden, dim, rng),
            activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let dim = self.fc1.input_dim();
        let hidden = self.fc1.output_dim();
        Self {
            ln1: LayerNorm::zeros(dim),
            attn: MultiHeadAttention::zeros(dim, self.attn.heads),
            ln2: LayerNorm::zeros(dim),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
            activation: self.activation,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, TransformerCache) {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1);
        let x1 = x + &a;
        let (h2, ln2) = self.ln2.forward(&x1);
        let f1 = self.fc1.forward(&h2);
        let r = self.activation.apply(&f1);
        let y = x1 + &self.fc2.forward(&r);
        (
            y,
            TransformerCache {
                ln1,
                attn,
                ln2,
                h2,
                f1,
                r,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &TransformerCache,
        dy: &Array2<f64>,
        grad: &mut TransformerLayer,
    ) -> Array2<f64> {
        let d_r = self.fc2.backward(&cache.r, dy, &mut grad.fc2);
        let d_f1 = d_r * &self.activation.derivative(&cache.f1);
        let d_h2 = self.fc1.backward(&cache.h2, &d_f1, &mut grad.fc1);
        let d_x1 = dy + &self.ln2.backward(&cache.ln2, &d_h2, &mut grad.ln2);
        let d_h1 = self.attn.backward(&cache.attn, &d_x1, &mut grad.attn);
        d_x1 + &self.ln1.backward(&cache.ln1, &d_h1, &mut grad.ln1)
    }
}

impl Params for TransformerLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "ffn/fc1"), f);
        self.fc2.visit(&join(prefix, "ffn/fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "ffn/fc1"), f);
        self.fc2.visit_mut(&join(prefix, "ffn/fc2"), f);
    }
}

/// Linear interpolation weights for resizing a length-`input` axis to
/// `output` samples, half-pixel centres, edge-clamped. Shape `(output, input)`.
pub fn bilinear_weights(output: usize, input: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += 1.0 - frac;
        m[[o, i1]] += frac;
    }
    m
}

/// Bilinear resize of a `(channels, h, w)` stack.
pub fn resize_bilinear(
    x: &ndarray::Array3<f64>,
    out_h: usize,
    out_w: usize,
) -> ndarray::Array3<f64> {
    let (c, h, w) = x.dim();
    let rows = bilinear_weights(out_h, h);
    let cols = bilinear_weights(out_w, w);
    let mut out = ndarray::Array3::zeros((c, out_h, out_w));
    for (mut dst, src) in out.outer_iter_mut().zip(x.outer_iter()) {
        dst.assign(&rows.dot(&src).dot(&cols.t()));
    }
    out
}

/// Adjoint of [`resize_bilinear`]: maps a gradient at the output size back
/// to the `(h, w)` input grid.
pub fn resize_bilinear_backward(
    dy: &ndarray::Array3<f64>,
    h: usize,
    w: usize,
) -> ndarray::Array3<f64> {
    let (c, out_h, out_w) = dy.dim();
    let rows = bilinear_weights(out_h, h);
    let cols = bilinear_weights(out_w, w);
    let mut out = ndarray::Array3::zeros((c, h, w));
    for (mut dst, src) in out.outer_iter_mut().zip(dy.outer_iter()) {
        dst.assign(&rows.t().dot(&src).dot(&cols));
    }
    out
}
