//! Adversarial patch crafting and evaluation against a compact,
//! differentiable semantic-segmentation network on synthetic street scenes.

pub mod attack;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod patch;
pub mod rng;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
