//! Two-stage training: a full-attention teacher, then retention gates on the
//! frozen teacher. Also the optimizer, config parser and checkpoint format.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, MAGIC,
};
pub use config::{parse_kv, Budget, DistillPositions, RunConfig, Stage, TrainConfig};
pub use optim::{adam_step, AdamConfig, AdamState, Param};
pub use trainer::{
    forward_accuracy, held_out, train_gates, train_teacher, EvalPoint, StepEvent, StepLog, TrainOutcome,
};

#[cfg(test)]
mod tests;
