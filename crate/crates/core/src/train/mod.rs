//! Mini-batch training, fine-tuning, and checkpoint IO.

mod adam;
mod config;
mod trainer;

pub use adam::{adam_step, Adam, AdamSlot};
pub use config::{TrainConfig, TrainMode};
pub use trainer::{finetune, train, train_logged, EpochRecord, TrainHistory};

// Checkpoint IO realizes the model-storage interface; the format lives with
// the codec definition.
pub use crate::codec::{load_checkpoint, save_checkpoint};
