//! Layers, parameter storage, the Adam optimizer and checkpoint files.

mod adam;
pub mod checkpoint;
mod layers;
mod params;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{embedding_lookup, linear, linear_named, residual_mlp};
pub use params::{Bound, GradMap, Init, ParameterStore};
