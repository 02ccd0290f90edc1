//! Dense building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::weights::{FeedForward, Linear};

pub const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

pub fn linear_forward(x: &Array2<f64>, lin: &Linear) -> Array2<f64> {
    x.dot(&lin.weight) + &lin.bias
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub fn linear_backward(
    x: &Array2<f64>,
    lin: &Linear,
    dy: &Array2<f64>,
    grad: &mut Linear,
) -> Array2<f64> {
    grad.weight += &x.t().dot(dy);
    grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&lin.weight.t())
}

/// Gain-only RMS normalization per row. Returns the output and `1/rms` per row.
pub fn rmsnorm_forward(x: &Array2<f64>, gain: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in y.outer_iter_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        row.zip_mut_with(&gain.row(0), |v, &g| *v *= r * g);
    }
    (y, inv)
}

pub fn rmsnorm_backward(
    x: &Array2<f64>,
    gain: &Array2<f64>,
    inv_rms: &[f64],
    dy: &Array2<f64>,
    dgain: &mut Array2<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let g = gain.row(0);
    let mut dx = Array2::zeros(x.dim());
    for (i, ((xr, dyr), mut dxr)) in x
        .outer_iter()
        .zip(dy.outer_iter())
        .zip(dx.outer_iter_mut())
        .enumerate()
    {
        let r = inv_rms[i];
        let mut dot = 0.0;
        for j in 0..xr.len() {
            dgain[[0, j]] += dyr[j] * xr[j] * r;
            dot += g[j] * dyr[j] * xr[j];
        }
        let coef = dot * r * r * r / d;
        for j in 0..xr.len() {
            dxr[j] = g[j] * dyr[j] * r - xr[j] * coef;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` from a single `exp`; libm's `tanh` dominated the forward pass.
/// Saturates to +-1 without overflow.
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// GELU applied element-wise, also returning the derivative at each input
/// so backward does not evaluate tanh again.
pub fn gelu_with_slope(pre: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut slope = pre.mapv(|x| tanh(GELU_C * (x + GELU_A * x * x * x)));
    let act = ndarray::Zip::from(pre)
        .and(&slope)
        .map_collect(|&x, &t| 0.5 * x * (1.0 + t));
    ndarray::Zip::from(&mut slope).and(pre).for_each(|s, &x| {
        let t = *s;
        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
        *s = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    });
    (act, slope)
}

pub struct FfnCache {
    pub input: Array2<f64>,
    pub slope: Array2<f64>,
    pub act: Array2<f64>,
}

pub fn ffn_forward(x: Array2<f64>, ffn: &FeedForward) -> (Array2<f64>, FfnCache) {
    let pre = linear_forward(&x, &ffn.up);
    let (act, slope) = gelu_with_slope(&pre);
    let out = linear_forward(&act, &ffn.down);
    (
        out,
        FfnCache {
            input: x,
            slope,
            act,
        },
    )
}

pub fn ffn_backward(
    cache: &FfnCache,
    ffn: &FeedForward,
    dy: &Array2<f64>,
    grad: &mut FeedForward,
) -> Array2<f64> {
    let mut dact = linear_backward(&cache.act, &ffn.down, dy, &mut grad.down);
    dact *= &cache.slope;
    linear_backward(&cache.input, &ffn.up, &dact, &mut grad.up)
}

/// Rotary phase tables for `positions x head_dim/2`.
#[derive(Debug, Clone)]
pub struct Rope {
    cos: Array2<f64>,
    sin: Array2<f64>,
    head_dim: usize,
}

impl Rope {
    pub fn new(positions: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Array2::zeros((positions, half));
        let mut sin = Array2::zeros((positions, half));
        for pos in 0..positions {
            for m in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * m as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos[[pos, m]] = angle.cos();
                sin[[pos, m]] = angle.sin();
            }
        }
        Self { cos, sin, head_dim }
    }

    pub fn positions(&self) -> usize {
        self.cos.nrows()
    }

    /// Rotates every head of `x: n x d` in place; `inverse` applies the transpose.
    pub fn apply(&self, x: &mut Array2<f64>, inverse: bool) {
        let sign = if inverse { -1.0 } else { 1.0 };
        let hd = self.head_dim;
        for (pos, mut row) in x.outer_iter_mut().enumerate() {
            for head in 0..row.len() / hd {
                for m in 0..hd / 2 {
                    let (c, s) = (self.cos[[pos, m]], sign * self.sin[[pos, m]]);
                    let a = head * hd + 2 * m;
                    let (x0, x1) = (row[a], row[a + 1]);
                    row[a] = x0 * c - x1 * s;
                    row[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Indices of the `k` largest values, ties resolved toward the lower index.
/// Returned in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    if k == values.len() {
        return (0..k).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    // best-first list kept by insertion; a later index only displaces on a
    // strictly larger value
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, v) in values.iter().enumerate() {
        if best.len() == k && v.total_cmp(&values[best[k - 1]]).is_le() {
            continue;
        }
        let at = best
            .iter()
            .position(|&b| v.total_cmp(&values[b]).is_gt())
            .unwrap_or(best.len());
        best.insert(at, i);
        best.truncate(k);
    }
    best.sort_unstable();
    best
}

pub fn softmax(values: ArrayView1<f64>) -> Array1<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = values.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}
