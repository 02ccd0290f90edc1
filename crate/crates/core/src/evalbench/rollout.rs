use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelWeights};
use crate::tokenize::{
    check_context_alignment, instance_normalize, tokenize, unpatchify_wavelet, NormStats,
};
use crate::wavelet::{build_filter_bank, idwt_multi, FilterBank};

/// How the point forecast is formed from the two heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Time-head patch only; the wavelet head is decoded for monitoring.
    #[default]
    Time,
    /// Average of the time-head patch and the IDWT-decoded wavelet-head patch.
    Mean,
}

impl FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Fusion::Time),
            "mean" => Ok(Fusion::Mean),
            other => Err(Error::config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Point forecast in the input's original scale.
    pub values: Vec<f64>,
    /// The same forecast in the context-normalized space.
    pub normalized: Vec<f64>,
    /// Wavelet-head predictions decoded to the time domain (normalized space).
    pub wavelet_decoded: Vec<f64>,
    pub stats: NormStats,
    pub steps: usize,
}

/// Decodes a predicted next wavelet token: the shifted token sequence with the
/// prediction appended is inverted, and its final patch is returned.
fn decode_wavelet_patch(
    wavelet_patches: &ndarray::Array2<f64>,
    predicted: &[f64],
    bank: &FilterBank,
) -> Result<Vec<f64>> {
    let p = predicted.len();
    let next = ndarray::Array2::from_shape_vec((1, p), predicted.to_vec()).expect("1 x P");
    let shifted = concatenate![Axis(0), wavelet_patches.slice(s![1.., ..]), next];
    let signal = idwt_multi(&unpatchify_wavelet(&shifted)?, bank)?;
    Ok(signal[signal.len() - p..].to_vec())
}

/// Autoregressive forecast of `horizon` values from `context`.
///
/// Non-finite context values are masked. Each step tokenizes the most recent
/// `context.len()` values (original context plus generated patches, which
/// keeps every step aligned), runs the model and appends one patch. The
/// normalization statistics stay those of the original context.
pub fn rollout(
    weights: &ModelWeights,
    config: &ModelConfig,
    context: &[f64],
    horizon: usize,
    fusion: Fusion,
) -> Result<Forecast> {
    let p = config.patch_length;
    let c = context.len();
    check_context_alignment(c, p)?;
    if horizon == 0 || horizon % p != 0 {
        return Err(Error::contract(format!(
            "horizon {horizon} is not a positive multiple of the patch length {p}"
        )));
    }
    let bank = build_filter_bank(&config.wavelet)?;
    let mask: Vec<bool> = context.iter().map(|v| v.is_finite()).collect();
    let cleaned: Vec<f64> = context
        .iter()
        .map(|&v| if v.is_finite() { v } else { 0.0 })
        .collect();
    let (normalized, stats) = instance_normalize(&cleaned, &mask)?;

    let steps = horizon / p;
    let mut seq = normalized;
    let mut seq_mask = mask;
    let mut generated = Vec::with_capacity(horizon);
    let mut decoded = Vec::with_capacity(horizon);
    for _ in 0..steps {
        let start = seq.len() - c;
        let tokens = tokenize(&seq[start..], &seq_mask[start..], &bank, p)?;
        let trace = forward(&tokens, weights, config)?;
        let wave = decode_wavelet_patch(&tokens.wavelet_patches, &trace.next_wavelet_patch, &bank)?;
        let patch: Vec<f64> = match fusion {
            Fusion::Time => trace.next_time_patch.clone(),
            Fusion::Mean => trace
                .next_time_patch
                .iter()
                .zip(&wave)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        };
        if patch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite forecast patch".into()));
        }
        seq.extend_from_slice(&patch);
        seq_mask.extend(std::iter::repeat_n(true, p));
        generated.extend_from_slice(&patch);
        decoded.extend_from_slice(&wave);
    }
    Ok(Forecast {
        values: generated.iter().map(|&z| stats.denormalize(z)).collect(),
        normalized: generated,
        wavelet_decoded: decoded,
        stats,
        steps,
    })
}
