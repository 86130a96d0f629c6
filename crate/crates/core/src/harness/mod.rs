//! Training, evaluation, gradient checking and persistence.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use eval::{evaluate, flip_discrepancy, predict, restore, score_image, EvalReport};
pub use gradcheck::{gradcheck, GradReport};
pub use train::{EpochLog, Trainer};
