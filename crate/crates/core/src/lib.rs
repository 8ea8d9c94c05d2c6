//! Desk-scale dexterous world model: a procedural hand/scene simulator that
//! renders aligned (interaction, static scene, hand) videos, a latent video
//! diffusion model conditioned on the static and hand renderings, and the
//! metrics and action-ranking procedure used to evaluate it.

pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod nn;
pub mod rng;
pub mod trainlog;
pub mod video;
pub mod worldsim;

pub use error::{Error, Result};
pub use video::{Frame, VideoTensor};
