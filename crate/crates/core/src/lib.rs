//! Pose-conditioned latent diffusion for turning a top-down egocentric image
//! of a person into a frontal T-pose image, with the dataset tooling and
//! evaluation protocol around it.
//!
//! The framework-free parts (noise schedule, sampler, data pipeline,
//! metrics, toy data) build without default features; the trainable
//! networks live behind the `neural` feature.

#[cfg(feature = "neural")]
pub mod codec;
#[cfg(feature = "neural")]
pub mod condition;
#[cfg(feature = "neural")]
pub mod config;
pub mod datapipe;
#[cfg(feature = "neural")]
pub mod denoiser;
pub mod error;
#[cfg(feature = "neural")]
pub mod evaluate;
#[cfg(feature = "neural")]
pub mod model;
#[cfg(feature = "neural")]
pub mod nn;
#[cfg(feature = "neural")]
pub mod objective;
pub mod quality;
pub mod schedule;
pub mod tensor;
pub mod toy;

#[cfg(feature = "neural")]
pub use config::RunConfig;
pub use error::{Error, Result};
#[cfg(feature = "neural")]
pub use model::EgoFront;
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use tensor::{BinaryMask, ImageTensor, LatentTensor, PoseMask, ValueRange};
