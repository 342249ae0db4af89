pub mod acquisition;
pub mod baselines;
pub mod checkpoint;
pub mod conditioning;
pub mod diffusion;
pub mod encoding;
mod error;
pub mod inr;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod volume;

pub use error::{Error, Result};
