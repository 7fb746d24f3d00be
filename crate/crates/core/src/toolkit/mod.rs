//! Synthetic data, evaluation, persistence and file formats.

pub mod dataset;
mod eval;
pub mod pnm;
mod scene;
pub mod weights;

pub use dataset::{read_dataset, write_dataset};
pub use eval::{evaluate_detections, match_image, EvalReport, ImageMatches};
pub use scene::{generate_scene, GenConfig, SceneSample};
pub use weights::{load_weights, save_weights};
