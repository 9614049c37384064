//! Optimizers and the joint refinement driver.

mod adam;
mod stage2;

pub use adam::{adam_step, adam_uniform_step, AdamState, BETA1, BETA2, EPS, WEIGHT_DECAY};
pub use stage2::{run_stage2, write_checkpoint, LogEntry, OptimizerState, PeriodicWeights, Stage2Output, StageConfig};
