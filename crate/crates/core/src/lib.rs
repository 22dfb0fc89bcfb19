//! Latent video planning for visuomotor imitation, end to end at desk
//! scale: episodic dataset store, per-view VQ autoencoders, an
//! observation-conditioned latent video diffusion planner, a frame-pair
//! action policy with receding-horizon execution, a toy push environment,
//! and the metrics/benchmark harness that evaluates the stack.

pub mod autoencoder;
pub mod dataset;
pub mod diffusion;
pub mod env;
pub mod metrics;
pub mod planner;
pub mod policy;
pub mod unet;
pub mod error;
pub mod harness;
pub mod util;

pub use error::{Error, Result};
