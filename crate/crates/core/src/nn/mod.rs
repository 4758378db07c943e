//! Layers, losses and the significance-guarded optimizer.

pub mod adam;
pub mod functional;
pub mod layers;
pub mod train;

pub use adam::{significance_check, Adam, AdamConfig, SignificanceReport, Verdict};
pub use layers::{LayerSpec, LossKind, Model, Param};
pub use train::{StepOutcome, StepRecord, Trainer, TrainerConfig};
