//! Synthetic street scenes: camera geometry, rendering and datasets.

pub mod dataset;
pub mod geometry;
pub mod render;

pub use dataset::{generate_dataset, Dataset, DatasetConfig, ManifestEntry, Split};
pub use geometry::{billboard_homography, Billboard, CameraPose, Homography, Projection};
pub use render::{
    render_scene, RenderStyle, SceneId, SceneLayout, SceneSample, AD_DIMS, CLASS_BILLBOARD, CLASS_NAMES,
    NUM_CLASSES,
};
