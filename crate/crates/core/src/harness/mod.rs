//! Everything around the model: synthetic scenes, configuration, the
//! assembled pipeline, training, evaluation, persistence and benchmarks.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod export;
pub mod gradcheck;
pub mod model;
pub mod scene;
pub mod train;

pub use config::RunConfig;
pub use model::{ClipOutput, ForwardOptions, Model};
pub use scene::{generate_scene, SceneGeometry, Suite, SyntheticScene};
pub use train::{Prepared, Split, Trainer};
