use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, ModelConfig};
use crate::tokenize::Targets;

fn check_shapes(pred: &Array2<f64>, target: &Array2<f64>, mask: &Array2<bool>) -> Result<()> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() {
        return Err(Error::contract(format!(
            "huber shapes differ: pred {:?}, target {:?}, mask {:?}",
            pred.dim(),
            target.dim(),
            mask.dim()
        )));
    }
    Ok(())
}

/// Mean Huber loss over mask-valid entries; 0 when nothing is valid.
pub fn huber(pred: &Array2<f64>, target: &Array2<f64>, delta: f64, mask: &Array2<bool>) -> Result<f64> {
    check_shapes(pred, target, mask)?;
    if !(delta > 0.0) {
        return Err(Error::contract("huber delta must be positive"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&p, &t), &m) in pred.iter().zip(target).zip(mask) {
        if !m {
            continue;
        }
        let r = (p - t).abs();
        sum += if r <= delta {
            0.5 * r * r
        } else {
            delta * (r - 0.5 * delta)
        };
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// `d huber / d pred`, scaled by `weight`.
pub fn huber_grad(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    delta: f64,
    mask: &Array2<bool>,
    weight: f64,
) -> Array2<f64> {
    let count = mask.iter().filter(|&&m| m).count();
    let mut out = Array2::zeros(pred.dim());
    if count == 0 || weight == 0.0 {
        return out;
    }
    let scale = weight / count as f64;
    for (((o, &p), &t), &m) in out.iter_mut().zip(pred).zip(target).zip(mask) {
        if m {
            let r = p - t;
            *o = scale * r.clamp(-delta, delta);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub time: f64,
    pub wavelet: f64,
    /// Raw (unweighted) load-balance loss.
    pub balance: f64,
}

impl LossBreakdown {
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for l in items {
            out.total += l.total;
            out.time += l.time;
            out.wavelet += l.wavelet;
            out.balance += l.balance;
        }
        out.total /= n;
        out.time /= n;
        out.wavelet /= n;
        out.balance /= n;
        out
    }
}

/// `huber(time) + lambda_w * huber(wavelet) + balance_coeff * balance`.
pub fn joint_loss(
    trace: &ForwardTrace,
    targets: &Targets,
    config: &ModelConfig,
    huber_delta: f64,
) -> Result<LossBreakdown> {
    let time = huber(&trace.time_predictions, &targets.time, huber_delta, &targets.time_mask)?;
    let wavelet = huber(
        &trace.wavelet_predictions,
        &targets.wavelet,
        huber_delta,
        &targets.wavelet_mask,
    )?;
    let balance = trace.load_balance_loss;
    let mut total = time;
    if config.wavelet_loss_weight != 0.0 {
        total += config.wavelet_loss_weight * wavelet;
    }
    if config.load_balance_coeff != 0.0 {
        total += config.load_balance_coeff * balance;
    }
    let out = LossBreakdown {
        total,
        time,
        wavelet,
        balance,
    };
    if ![total, time, wavelet, balance].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss component: {out:?}")));
    }
    Ok(out)
}
