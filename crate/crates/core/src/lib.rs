//! Audio+text multiple-choice comprehension with inter/intra-modality
//! attention fusion and multimodal knowledge distillation, on a small
//! tape-based reverse-mode engine.

pub mod adam;
pub mod autodiff;
pub mod data;
pub mod config;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
