pub mod error;
pub mod fast;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod gridworld;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod planner;
pub mod rng;
pub mod slow;
pub mod slowfast;
pub mod video;

pub use error::{Error, Result};
