//! Vision Transformer inference with an astrocytic attention projection,
//! Grad-CAM style explanations, and heatmap alignment evaluation.

pub mod astro;
pub mod cam;
pub mod container;
pub mod error;
pub mod eval;
pub mod grid;
pub mod manifest;
pub mod metrics;
pub mod preprocess;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
