//! Synthetic benchmark substrate: scenes, a tiny regressor and training.

pub mod model;
pub mod scene;
pub mod train;

pub use model::{Architecture, TinyModel};
pub use scene::{generate_scene, parse_manifest, Scene, SceneConfig};
pub use train::{train, Checkpoint, SceneStream, TrainConfig, TrainOutcome};
