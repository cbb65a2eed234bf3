//! Optimization, regularization, persistence, and the training loop.

mod checkpoint;
mod config;
mod dropout;
mod optim;
mod store;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use config::{Profile, TrainConfig, CONFIG_KEYS};
pub use dropout::{apply_dropout, dropout_mask, Mode};
pub use optim::{adam_step, clip_gradients, AdamConfig};
pub use store::{ParamEntry, ParamId, ParameterStore};
pub use trainer::{
    epoch_order, samples, steps_per_epoch, train, train_epoch, train_steps, EpochStats,
};
