use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adamw_step, save_checkpoint, LossBreakdown, TrainConfig, TrainState};
use crate::data::{balanced_batch, CorpusManifest, Window};
use crate::error::{Error, Result};
use crate::model::{gradients, init_model, GradientSet, ModelConfig};
use crate::tokenize::{
    check_context_alignment, instance_normalize, make_training_targets, tokenize,
    AlignedTokenSequence, Targets,
};
use crate::wavelet::{build_filter_bank, FilterBank};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss.jsonl";

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub time_loss: f64,
    pub wavelet_loss: f64,
    pub balance_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Batch loss of every step taken in this call, before its update.
    pub history: Vec<LossRecord>,
}

/// Normalizes a raw crop and builds model inputs plus shifted targets.
pub fn prepare_sample(
    values: &[f64],
    mask: &[bool],
    bank: &FilterBank,
    patch_length: usize,
) -> Result<(AlignedTokenSequence, Targets)> {
    let (normalized, _) = instance_normalize(values, mask)?;
    let tokens = tokenize(&normalized, mask, bank, patch_length)?;
    let targets = make_training_targets(&tokens)?;
    Ok((tokens, targets))
}

struct Sample {
    values: Vec<f64>,
    mask: Vec<bool>,
}

fn draw_batch(
    state: &mut TrainState,
    manifest: &CorpusManifest,
    windows: &[Window],
    config: &TrainConfig,
) -> Result<Vec<Sample>> {
    let picks = balanced_batch(manifest, config.batch_size, &mut state.rng)?;
    let c = config.context_length;
    Ok(picks
        .into_iter()
        .map(|i| {
            let w = &windows[i];
            let start = state.rng.random_range(0..=w.values.len() - c);
            Sample {
                values: w.values[start..start + c].iter().map(|&v| v as f64).collect(),
                mask: w.mask[start..start + c].to_vec(),
            }
        })
        .collect())
}

/// Mean loss and gradient over the batch. Per-sample work runs on the rayon
/// pool; results are reduced in batch order, so the sum does not depend on
/// the worker count. Fully masked crops are skipped.
fn batch_gradients(
    samples: &[Sample],
    state: &TrainState,
    model: &ModelConfig,
    config: &TrainConfig,
    bank: &FilterBank,
) -> Result<Option<(LossBreakdown, GradientSet)>> {
    let per_sample: Vec<Result<Option<(LossBreakdown, GradientSet)>>> = samples
        .par_iter()
        .map(|s| {
            let (tokens, targets) =
                match prepare_sample(&s.values, &s.mask, bank, model.patch_length) {
                    Ok(x) => x,
                    Err(Error::DegenerateWindow) => return Ok(None),
                    Err(e) => return Err(e),
                };
            gradients(&tokens, &targets, &state.weights, model, config.huber_delta).map(Some)
        })
        .collect();
    let mut losses = Vec::with_capacity(samples.len());
    let mut total: Option<GradientSet> = None;
    for r in per_sample {
        if let Some((loss, grad)) = r? {
            losses.push(loss);
            match total.as_mut() {
                Some(t) => t.add_scaled(&grad, 1.0),
                None => total = Some(grad),
            }
        }
    }
    Ok(total.map(|mut g| {
        g.scale(1.0 / losses.len() as f64);
        (LossBreakdown::mean(&losses), g)
    }))
}

fn log_record(path: &Path, record: &LossRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record).expect("record serializes"))?;
    Ok(())
}

/// Runs from `resume` (or a fresh initialization) up to
/// `config.total_steps`. With an output directory, appends to the loss log
/// every `log_interval` steps and rewrites the checkpoint every
/// `checkpoint_interval` steps and at the end. On numeric failure the last
/// good state is checkpointed before the error is returned.
pub fn train_loop(
    windows: &[Window],
    model: &ModelConfig,
    config: &TrainConfig,
    resume: Option<TrainState>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_context_alignment(config.context_length, model.patch_length)?;
    if let Some(short) = windows.iter().find(|w| w.values.len() < config.context_length) {
        return Err(Error::contract(format!(
            "window of length {} is shorter than the context length {}",
            short.values.len(),
            config.context_length
        )));
    }
    let bank = build_filter_bank(&model.wavelet)?;
    let manifest = CorpusManifest::from_windows(windows);
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(init_model(model)?, config.seed),
    };
    let ckpt_path: Option<PathBuf> = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let log_path: Option<PathBuf> = out_dir.map(|d| d.join(LOSS_LOG_FILE));
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let save = |state: &TrainState| -> Result<()> {
        match &ckpt_path {
            Some(p) => save_checkpoint(model, state, p),
            None => Ok(()),
        }
    };

    let started = Instant::now();
    let mut history = Vec::new();
    while state.step < config.total_steps {
        let good = state.clone();
        let samples = draw_batch(&mut state, &manifest, windows, config)?;
        let result = batch_gradients(&samples, &state, model, config, &bank).and_then(|bg| {
            match bg {
                Some((loss, grad)) => {
                    state.record_loss(&loss);
                    let info = adamw_step(&mut state, &grad, config)?;
                    Ok((loss, info.lr))
                }
                None => {
                    // every crop fully masked: count the step, change nothing
                    state.step += 1;
                    Ok((LossBreakdown::default(), 0.0))
                }
            }
        });
        let (loss, lr) = match result {
            Ok(x) => x,
            Err(e @ Error::Numeric(_)) => {
                log::error!("step {}: {e}; keeping last good state", good.step + 1);
                save(&good)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };

        let record = LossRecord {
            step: state.step,
            lr,
            total: loss.total,
            time_loss: loss.time,
            wavelet_loss: loss.wavelet,
            balance_loss: loss.balance,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        history.push(record);
        if state.step % config.log_interval == 0 {
            log::info!(
                "step {} lr {:.3e} loss {:.5} (time {:.5}, wavelet {:.5}, balance {:.4})",
                record.step,
                lr,
                loss.total,
                loss.time,
                loss.wavelet,
                loss.balance
            );
            if let Some(p) = &log_path {
                log_record(p, &record)?;
            }
        }
        if state.step % config.checkpoint_interval == 0 && state.step < config.total_steps {
            save(&state)?;
        }
    }
    save(&state)?;
    Ok(TrainOutcome { state, history })
}
