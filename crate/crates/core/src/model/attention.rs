//! Top-k sparse causal multi-head attention.
//!
//! For each head and query `i`, scores against keys `0..=i` are ranked and
//! only the `k` best (lower key index wins ties) enter the softmax. The
//! selection is a constant of the forward pass, so the backward pass is the
//! exact gradient of softmax attention restricted to the chosen keys.

use ndarray::{s, Array2};

use super::ops::{softmax, top_k_indices, Rope};
use super::weights::Attention;

/// Selected key indices, indexed `[head][query]`, ascending.
pub type KeySelection = Vec<Vec<Vec<usize>>>;

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub input: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per head, row-stochastic `n x n` weights (zero outside the selection).
    pub probs: Vec<Array2<f64>>,
    pub context: Array2<f64>,
    pub selection: KeySelection,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
}

/// Public entry point: positions are `0..n`, rotary phases optional.
pub fn sparse_causal_attention(
    hidden: &Array2<f64>,
    params: &Attention,
    n_heads: usize,
    k: usize,
    rope: Option<&Rope>,
) -> AttentionOutput {
    let (output, cache) = attention_forward(hidden.clone(), params, n_heads, k, rope, None);
    AttentionOutput {
        output,
        probs: cache.probs,
    }
}

pub(crate) fn attention_forward(
    x: Array2<f64>,
    params: &Attention,
    n_heads: usize,
    k: usize,
    rope: Option<&Rope>,
    frozen: Option<&KeySelection>,
) -> (Array2<f64>, AttentionCache) {
    let n = x.nrows();
    let d = x.ncols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut q = x.dot(&params.query);
    let mut kmat = x.dot(&params.key);
    let v = x.dot(&params.value);
    if let Some(rope) = rope {
        rope.apply(&mut q, false);
        rope.apply(&mut kmat, false);
    }
    let mut context = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    let mut selection = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let scores = q.slice(cols).dot(&kmat.slice(cols).t()) * scale;
        let mut p = Array2::zeros((n, n));
        let mut head_sel = Vec::with_capacity(n);
        for i in 0..n {
            let row = scores.row(i);
            let keys = match frozen {
                Some(sel) => sel[h][i].clone(),
                None => top_k_indices(&row.as_slice().expect("contiguous")[..=i], k),
            };
            let picked = ndarray::Array1::from_iter(keys.iter().map(|&j| row[j]));
            let w = softmax(picked.view());
            for (&j, &wj) in keys.iter().zip(w.iter()) {
                p[[i, j]] = wj;
            }
            head_sel.push(keys);
        }
        let ctx = p.dot(&v.slice(cols));
        context.slice_mut(cols).assign(&ctx);
        probs.push(p);
        selection.push(head_sel);
    }
    let output = context.dot(&params.output);
    (
        output,
        AttentionCache {
            input: x,
            q,
            k: kmat,
            v,
            probs,
            context,
            selection,
        },
    )
}

pub(crate) fn attention_backward(
    cache: &AttentionCache,
    params: &Attention,
    n_heads: usize,
    rope: Option<&Rope>,
    dout: &Array2<f64>,
    grad: &mut Attention,
) -> Array2<f64> {
    let d = cache.input.ncols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    grad.output += &cache.context.t().dot(dout);
    let dctx = dout.dot(&params.output.t());
    let mut dq = Array2::zeros(cache.q.dim());
    let mut dk = Array2::zeros(cache.k.dim());
    let mut dv = Array2::zeros(cache.v.dim());
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let dctx_h = dctx.slice(cols);
        let mut dp = dctx_h.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        for (mut dp_row, p_row) in dp.outer_iter_mut().zip(p.outer_iter()) {
            let inner: f64 = dp_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
            dp_row.zip_mut_with(&p_row, |g, &pij| *g = pij * (*g - inner));
        }
        let ds = dp;
        dq.slice_mut(cols)
            .assign(&(ds.dot(&cache.k.slice(cols)) * scale));
        dk.slice_mut(cols)
            .assign(&(ds.t().dot(&cache.q.slice(cols)) * scale));
    }
    if let Some(rope) = rope {
        rope.apply(&mut dq, true);
        rope.apply(&mut dk, true);
    }
    let x = &cache.input;
    grad.query += &x.t().dot(&dq);
    grad.key += &x.t().dot(&dk);
    grad.value += &x.t().dot(&dv);
    dq.dot(&params.query.t()) + dk.dot(&params.key.t()) + dv.dot(&params.value.t())
}
