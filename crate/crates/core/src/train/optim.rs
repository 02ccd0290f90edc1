use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at, LossBreakdown};
use crate::error::{Error, Result};
use crate::model::weights::round_f32;
use crate::model::{GradientSet, ModelWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_ratio: f64,
    pub huber_delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Length of the random crop taken from each window per sample.
    pub context_length: usize,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2e-4,
            batch_size: 128,
            total_steps: 100_000,
            warmup_ratio: 0.1,
            huber_delta: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            seed: 0,
            context_length: 512,
            log_interval: 100,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if !(self.base_lr > 0.0) || !(self.huber_delta > 0.0) || !(self.eps > 0.0) {
            return bad("base_lr, huber_delta and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("weight_decay must be >= 0 and grad_clip_norm > 0");
        }
        if self.batch_size == 0 || self.log_interval == 0 || self.checkpoint_interval == 0 {
            return bad("batch_size and intervals must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub weights: ModelWeights,
    pub m: ModelWeights,
    pub v: ModelWeights,
    pub rng: ChaCha8Rng,
    /// Exponential moving average of batch losses (factor 0.98).
    pub running: LossBreakdown,
}

impl TrainState {
    pub fn new(weights: ModelWeights, seed: u64) -> Self {
        TrainState {
            step: 0,
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            weights,
            rng: ChaCha8Rng::seed_from_u64(seed),
            running: LossBreakdown::default(),
        }
    }

    pub fn record_loss(&mut self, loss: &LossBreakdown) {
        if self.step == 0 {
            self.running = *loss;
            return;
        }
        let a = 0.02;
        let r = &mut self.running;
        r.total += a * (loss.total - r.total);
        r.time += a * (loss.time - r.time);
        r.wavelet += a * (loss.wavelet - r.wavelet);
        r.balance += a * (loss.balance - r.balance);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// One AdamW update in full precision: global-norm clipping, bias-corrected
/// moments, decoupled weight decay. Increments `state.step`.
pub fn adamw_update(
    state: &mut TrainState,
    grads: &GradientSet,
    config: &TrainConfig,
    lr: f64,
) -> Result<StepInfo> {
    let grad_norm = grads.sum_squares().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {grad_norm}")));
    }
    let clip_scale = if grad_norm > config.grad_clip_norm {
        config.grad_clip_norm / grad_norm
    } else {
        1.0
    };
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);
    let decay = 1.0 - lr * config.weight_decay;

    let mut weights = state.weights.tensors_mut();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (((_, w), (_, m)), ((_, v), (_, g))) in weights
        .iter_mut()
        .zip(ms.iter_mut())
        .zip(vs.iter_mut().zip(grads.tensors()))
    {
        ndarray::Zip::from(&mut **w)
            .and(&mut **m)
            .and(&mut **v)
            .and(g)
            .for_each(|w, m, v, &g| {
                let g = g * clip_scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + config.eps);
                *w = *w * decay - lr * update;
            });
    }
    drop((weights, ms, vs));
    if !state.weights.all_finite() {
        return Err(Error::Numeric("non-finite weights after update".into()));
    }
    state.step += 1;
    Ok(StepInfo {
        lr,
        grad_norm,
        clip_scale,
    })
}

/// Scheduled AdamW step. Weights and moments are rounded to the f32 grid
/// afterwards so checkpoints are exact and resumed runs match bitwise.
pub fn adamw_step(
    state: &mut TrainState,
    grads: &GradientSet,
    config: &TrainConfig,
) -> Result<StepInfo> {
    let lr = lr_at(state.step + 1, config)?;
    let info = adamw_update(state, grads, config, lr)?;
    for set in [&mut state.weights, &mut state.m, &mut state.v] {
        for (_, t) in set.tensors_mut() {
            t.mapv_inplace(round_f32);
        }
    }
    Ok(info)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn state() -> (TrainState, ModelConfig) {
        let c = ModelConfig::tiny();
        (TrainState::new(init_model(&c).unwrap(), 1), c)
    }

    fn one_tensor(set: &ModelWeights) -> f64 {
        set.get_flat(0, 0)
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let (mut s, _) = state();
        let before = s.weights.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = s.weights.zeros_like();
        adamw_update(&mut s, &g, &cfg, 1e-3).unwrap();
        assert_eq!(s.weights, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_sign_step() {
        let (mut s, _) = state();
        let w0 = one_tensor(&s.weights);
        let mut g = s.weights.zeros_like();
        g.set_flat(0, 0, 1.0);
        let cfg = TrainConfig {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            grad_clip_norm: 10.0,
            ..Default::default()
        };
        let lr = 1e-3;
        adamw_update(&mut s, &g, &cfg, lr).unwrap();
        // m = 0.1, v = 0.001; bias-corrected both to 1
        let m_hat: f64 = 0.1 / (1.0 - 0.9);
        let v_hat: f64 = 0.001 / (1.0 - 0.999);
        let expected = w0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((one_tensor(&s.weights) - expected).abs() < 1e-12);
        assert!((one_tensor(&s.weights) - (w0 - lr)).abs() < 1e-10);
        // untouched parameters stay put
        assert_eq!(s.weights.get_flat(0, 1), state().0.weights.get_flat(0, 1));
    }

    #[test]
    fn decoupled_decay() {
        let (mut s, _) = state();
        let w0 = one_tensor(&s.weights);
        let g = s.weights.zeros_like();
        let cfg = TrainConfig::default();
        for k in 1..=3 {
            adamw_update(&mut s, &g, &cfg, 0.5).unwrap();
            let expected = w0 * (1.0f64 - 0.5 * 0.1).powi(k);
            assert!((one_tensor(&s.weights) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn clipping_scales_gradient() {
        let (mut s, _) = state();
        let mut g = s.weights.zeros_like();
        g.set_flat(0, 0, 3.0);
        g.set_flat(0, 1, 4.0);
        let info = adamw_update(&mut s, &g, &TrainConfig::default(), 1e-3).unwrap();
        assert_eq!(info.grad_norm, 5.0);
        assert!((info.clip_scale - 0.2).abs() < 1e-15);
        assert!((s.m.get_flat(0, 0) - 0.1 * 0.6).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_errors() {
        let (mut s, _) = state();
        let mut g = s.weights.zeros_like();
        g.set_flat(0, 0, f64::NAN);
        assert!(matches!(
            adamw_update(&mut s, &g, &TrainConfig::default(), 1e-3),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn scheduled_step_is_rounded_update() {
        let (s0, _) = state();
        let mut g = s0.weights.zeros_like();
        g.set_flat(2, 3, 0.37);
        g.set_flat(0, 5, -1.3);
        let cfg = TrainConfig {
            total_steps: 10,
            ..Default::default()
        };
        let mut exact = s0.clone();
        adamw_update(&mut exact, &g, &cfg, lr_at(1, &cfg).unwrap()).unwrap();
        let mut stepped = s0.clone();
        adamw_step(&mut stepped, &g, &cfg).unwrap();
        for ((_, a), (_, b)) in stepped.weights.tensors().iter().zip(exact.weights.tensors()) {
            assert!(a.iter().zip(b).all(|(&x, &y)| x == round_f32(y)));
        }
    }

    #[test]
    fn quadratic_toy_decreases() {
        // loss = 0.5 * sum w^2, gradient = w
        let (mut s, _) = state();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let before = s.weights.sum_squares();
        let g = s.weights.clone();
        adamw_update(&mut s, &g, &cfg, 1e-4).unwrap();
        assert!(s.weights.sum_squares() < before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_ratio: 1.5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
