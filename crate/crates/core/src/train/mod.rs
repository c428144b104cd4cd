//! Training engine: configuration, optimizer, sharded workers, the
//! two-phase trainer and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod parallel;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{Phase, TrainConfig};
pub use optim::Adam;
pub use trainer::{load_generator, train_gan, train_resnet, StepLog, Trainer, UpdateAudit, UpdateKind};
