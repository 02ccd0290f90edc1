//! Joint loss, AdamW with a warmup/cosine schedule, checkpoints and the
//! training loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::{huber, huber_grad, joint_loss, LossBreakdown};
pub use optim::{adamw_step, adamw_update, StepInfo, TrainConfig, TrainState};
pub use schedule::{lr_at, warmup_steps};
pub use trainer::{prepare_sample, train_loop, LossRecord, TrainOutcome, CHECKPOINT_FILE, LOSS_LOG_FILE};
