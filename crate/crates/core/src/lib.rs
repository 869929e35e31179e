//! Motion stitching and in-betweening toolkit.
//!
//! Generates a full fixed-length human motion sequence from a sparse set of
//! keyframe poses placed anywhere inside the window, using a diffusion model
//! with a two-stack transformer denoiser. Ships the complete pipeline:
//! BVH ingestion and preprocessing, training, sampling, and quantitative
//! evaluation (FID / Diversity / Multimodality).

pub mod data;
pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod kinematics;
pub mod losses;
pub mod rotation;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::CoreError;
pub use tensor::Real;

pub type Result<T> = std::result::Result<T, CoreError>;
