//! Full dual-path forward pass and its exact reverse-mode gradient.

use ndarray::{s, Array2};

use super::attention::{attention_backward, attention_forward, AttentionCache, KeySelection};
use super::config::ModelConfig;
use super::moe::{moe_backward, moe_forward, MoeCache, Routing};
use super::ops::{linear_backward, linear_forward, rmsnorm_backward, rmsnorm_forward, Rope};
use super::weights::{GradientSet, ModelWeights};
use crate::error::{Error, Result};
use crate::tokenize::{AlignedTokenSequence, Targets};
use crate::train::loss::{huber_grad, joint_loss, LossBreakdown};

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Prediction at position `j` targets patch `j + 1`: `(n - 1) x P`.
    pub time_predictions: Array2<f64>,
    pub wavelet_predictions: Array2<f64>,
    /// Predictions made at the last position (the first unseen patch).
    pub next_time_patch: Vec<f64>,
    pub next_wavelet_patch: Vec<f64>,
    /// `[layer][position]`
    pub router_assignments: Vec<Vec<Routing>>,
    /// Mean of the per-layer balance losses.
    pub load_balance_loss: f64,
}

/// Every discrete choice made by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Selections {
    /// `[layer] -> (time, wavelet)` key selections.
    pub attention: Vec<(KeySelection, KeySelection)>,
    /// `[layer][position]` expert ids.
    pub routing: Vec<Vec<Vec<usize>>>,
}

struct PathLayerCache {
    attn_in: Array2<f64>,
    attn_inv: Vec<f64>,
    attn: AttentionCache,
}

struct LayerCache {
    time: PathLayerCache,
    wavelet: PathLayerCache,
    moe: MoeCache,
}

pub(crate) struct ForwardCache {
    time_tokens: Array2<f64>,
    wavelet_tokens: Array2<f64>,
    layers: Vec<LayerCache>,
    time_final_in: Array2<f64>,
    wavelet_final_in: Array2<f64>,
    time_final_inv: Vec<f64>,
    wavelet_final_inv: Vec<f64>,
    time_final: Array2<f64>,
    wavelet_final: Array2<f64>,
    rope: Rope,
}

impl ForwardCache {
    pub(crate) fn selections(&self) -> Selections {
        Selections {
            attention: self
                .layers
                .iter()
                .map(|l| (l.time.attn.selection.clone(), l.wavelet.attn.selection.clone()))
                .collect(),
            routing: self
                .layers
                .iter()
                .map(|l| l.moe.routings.iter().map(|r| r.experts.clone()).collect())
                .collect(),
        }
    }

    /// Attention weights `[layer] -> (time heads, wavelet heads)`.
    pub(crate) fn attention_probs(&self) -> Vec<(&[Array2<f64>], &[Array2<f64>])> {
        self.layers
            .iter()
            .map(|l| (l.time.attn.probs.as_slice(), l.wavelet.attn.probs.as_slice()))
            .collect()
    }
}

fn check_tokens(tokens: &AlignedTokenSequence, config: &ModelConfig) -> Result<()> {
    let p = config.patch_length;
    let n = tokens.n_patches;
    if tokens.patch_length != p
        || tokens.time_patches.dim() != (n, p)
        || tokens.wavelet_patches.dim() != (n, p)
    {
        return Err(Error::contract(format!(
            "token shapes {:?}/{:?} do not match {n} patches of length {p}",
            tokens.time_patches.dim(),
            tokens.wavelet_patches.dim()
        )));
    }
    if n == 0 {
        return Err(Error::contract("empty token sequence"));
    }
    Ok(())
}

fn path_attention(
    h: &Array2<f64>,
    gain: &Array2<f64>,
    params: &super::weights::Attention,
    config: &ModelConfig,
    rope: &Rope,
    frozen: Option<&KeySelection>,
) -> (Array2<f64>, PathLayerCache) {
    let (normed, inv) = rmsnorm_forward(h, gain);
    let (out, attn) = attention_forward(
        normed,
        params,
        config.n_heads,
        config.top_k_attention,
        Some(rope),
        frozen,
    );
    (
        h + &out,
        PathLayerCache {
            attn_in: h.clone(),
            attn_inv: inv,
            attn,
        },
    )
}

pub(crate) fn forward_cached(
    tokens: &AlignedTokenSequence,
    weights: &ModelWeights,
    config: &ModelConfig,
    frozen: Option<&Selections>,
) -> Result<(ForwardTrace, ForwardCache)> {
    check_tokens(tokens, config)?;
    if weights.layers.len() != config.n_layers {
        return Err(Error::contract("weights do not match the model config"));
    }
    let n = tokens.n_patches;
    let rope = Rope::new(n, config.head_dim());
    let mut ht = linear_forward(&tokens.time_patches, &weights.time_embed);
    let mut hw = linear_forward(&tokens.wavelet_patches, &weights.wavelet_embed);
    let mut layers = Vec::with_capacity(config.n_layers);
    for (l, layer) in weights.layers.iter().enumerate() {
        let fz = frozen.map(|f| &f.attention[l]);
        let (t1, tc) = path_attention(
            &ht,
            &layer.time_attn_norm,
            &layer.time_attention,
            config,
            &rope,
            fz.map(|f| &f.0),
        );
        let (w1, wc) = path_attention(
            &hw,
            &layer.wavelet_attn_norm,
            &layer.wavelet_attention,
            config,
            &rope,
            fz.map(|f| &f.1),
        );
        let (t2, w2, moe) = moe_forward(
            t1,
            w1,
            layer,
            config,
            frozen.map(|f| f.routing[l].as_slice()),
        );
        ht = t2;
        hw = w2;
        layers.push(LayerCache {
            time: tc,
            wavelet: wc,
            moe,
        });
    }
    let (time_final, time_final_inv) = rmsnorm_forward(&ht, &weights.time_final_norm);
    let (wavelet_final, wavelet_final_inv) = rmsnorm_forward(&hw, &weights.wavelet_final_norm);
    let time_all = linear_forward(&time_final, &weights.time_head);
    let wavelet_all = linear_forward(&wavelet_final, &weights.wavelet_head);

    let balance =
        layers.iter().map(|l| l.moe.balance).sum::<f64>() / config.n_layers as f64;
    let trace = ForwardTrace {
        time_predictions: time_all.slice(s![..n - 1, ..]).to_owned(),
        wavelet_predictions: wavelet_all.slice(s![..n - 1, ..]).to_owned(),
        next_time_patch: time_all.row(n - 1).to_vec(),
        next_wavelet_patch: wavelet_all.row(n - 1).to_vec(),
        router_assignments: layers.iter().map(|l| l.moe.routings.clone()).collect(),
        load_balance_loss: balance,
    };
    let cache = ForwardCache {
        time_tokens: tokens.time_patches.clone(),
        wavelet_tokens: tokens.wavelet_patches.clone(),
        layers,
        time_final_in: ht,
        wavelet_final_in: hw,
        time_final_inv,
        wavelet_final_inv,
        time_final,
        wavelet_final,
        rope,
    };
    Ok((trace, cache))
}

pub fn forward(
    tokens: &AlignedTokenSequence,
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<ForwardTrace> {
    Ok(forward_cached(tokens, weights, config, None)?.0)
}

/// Forward pass that also reports the discrete selections it made.
pub fn forward_with_selections(
    tokens: &AlignedTokenSequence,
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<(ForwardTrace, Selections)> {
    let (trace, cache) = forward_cached(tokens, weights, config, None)?;
    Ok((trace, cache.selections()))
}

/// Attention weight matrices per layer: `(time heads, wavelet heads)`.
pub fn attention_maps(
    tokens: &AlignedTokenSequence,
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<Vec<(Vec<Array2<f64>>, Vec<Array2<f64>>)>> {
    let (_, cache) = forward_cached(tokens, weights, config, None)?;
    Ok(cache
        .attention_probs()
        .into_iter()
        .map(|(t, w)| (t.to_vec(), w.to_vec()))
        .collect())
}

/// Joint loss evaluated with every top-k choice pinned to `selections`.
pub fn loss_with_selections(
    tokens: &AlignedTokenSequence,
    targets: &Targets,
    weights: &ModelWeights,
    config: &ModelConfig,
    huber_delta: f64,
    selections: &Selections,
) -> Result<LossBreakdown> {
    let (trace, _) = forward_cached(tokens, weights, config, Some(selections))?;
    joint_loss(&trace, targets, config, huber_delta)
}

/// Exact gradient of the joint loss for one sequence. Top-k selections in
/// attention and routing are held fixed at their forward-pass values.
pub fn gradients(
    tokens: &AlignedTokenSequence,
    targets: &Targets,
    weights: &ModelWeights,
    config: &ModelConfig,
    huber_delta: f64,
) -> Result<(LossBreakdown, GradientSet)> {
    let (trace, cache) = forward_cached(tokens, weights, config, None)?;
    let loss = joint_loss(&trace, targets, config, huber_delta)?;
    let mut grad = weights.zeros_like();
    backward(&trace, &cache, targets, weights, config, huber_delta, &mut grad);
    if !grad.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient (loss {:?})",
            loss
        )));
    }
    Ok((loss, grad))
}

fn backward(
    trace: &ForwardTrace,
    cache: &ForwardCache,
    targets: &Targets,
    weights: &ModelWeights,
    config: &ModelConfig,
    huber_delta: f64,
    grad: &mut GradientSet,
) {
    let n = cache.time_final.nrows();
    let p = config.patch_length;
    let mut dtime_pred = Array2::zeros((n, p));
    let mut dwave_pred = Array2::zeros((n, p));
    dtime_pred.slice_mut(s![..n - 1, ..]).assign(&huber_grad(
        &trace.time_predictions,
        &targets.time,
        huber_delta,
        &targets.time_mask,
        1.0,
    ));
    dwave_pred.slice_mut(s![..n - 1, ..]).assign(&huber_grad(
        &trace.wavelet_predictions,
        &targets.wavelet,
        huber_delta,
        &targets.wavelet_mask,
        config.wavelet_loss_weight,
    ));

    let dtf = linear_backward(&cache.time_final, &weights.time_head, &dtime_pred, &mut grad.time_head);
    let dwf = linear_backward(
        &cache.wavelet_final,
        &weights.wavelet_head,
        &dwave_pred,
        &mut grad.wavelet_head,
    );
    let mut dht = rmsnorm_backward(
        &cache.time_final_in,
        &weights.time_final_norm,
        &cache.time_final_inv,
        &dtf,
        &mut grad.time_final_norm,
    );
    let mut dhw = rmsnorm_backward(
        &cache.wavelet_final_in,
        &weights.wavelet_final_norm,
        &cache.wavelet_final_inv,
        &dwf,
        &mut grad.wavelet_final_norm,
    );

    let balance_grad = config.load_balance_coeff / config.n_layers as f64;
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let layer = &weights.layers[l];
        let g = &mut grad.layers[l];
        let (dt, dw) = moe_backward(&lc.moe, layer, &dht, &dhw, balance_grad, g);
        dht = path_attention_backward(
            &lc.time,
            &layer.time_attn_norm,
            &layer.time_attention,
            config,
            &cache.rope,
            &dt,
            &mut g.time_attn_norm,
            &mut g.time_attention,
        );
        dhw = path_attention_backward(
            &lc.wavelet,
            &layer.wavelet_attn_norm,
            &layer.wavelet_attention,
            config,
            &cache.rope,
            &dw,
            &mut g.wavelet_attn_norm,
            &mut g.wavelet_attention,
        );
    }
    linear_backward(&cache.time_tokens, &weights.time_embed, &dht, &mut grad.time_embed);
    linear_backward(
        &cache.wavelet_tokens,
        &weights.wavelet_embed,
        &dhw,
        &mut grad.wavelet_embed,
    );
}

#[allow(clippy::too_many_arguments)]
fn path_attention_backward(
    cache: &PathLayerCache,
    gain: &Array2<f64>,
    params: &super::weights::Attention,
    config: &ModelConfig,
    rope: &Rope,
    dout: &Array2<f64>,
    dgain: &mut Array2<f64>,
    dparams: &mut super::weights::Attention,
) -> Array2<f64> {
    let dnormed = attention_backward(&cache.attn, params, config.n_heads, Some(rope), dout, dparams);
    rmsnorm_backward(&cache.attn_in, gain, &cache.attn_inv, &dnormed, dgain) + dout
}
