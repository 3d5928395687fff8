//! Optimization loop, checkpoints and hyperparameter sweeps.

pub mod checkpoint;
pub mod sweep;
pub mod trainer;

pub use crate::config::{lr_at, TrainConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, CheckpointContents,
    StoredTensor, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use sweep::{hyper_sweep, write_sweep, SweepAxis, SweepCell, SweepGrid, SweepResult, SweepRow, SWEEP_HEADER};
pub use trainer::{resume, train, EpochRecord, StopReason, TrainData, TrainOutcome, Trainer, METRICS_HEADER};
