//! Adam training on segment triples, the synthetic data generator and the
//! run configuration.

mod adam;
mod config;
mod synth;
mod trainer;

pub use adam::{adam_step, named_gradients, AdamState, NamedGrads};
pub use config::TrainConfig;
pub use synth::{synth_clip, synth_dataset, synth_dataset_with, NoiseKind, SynthClip, SynthConfig};
pub use trainer::{stack_batch, train, train_observed, Batch, TrainOutcome};
