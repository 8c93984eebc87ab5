pub mod checkpoint;
pub mod denoiser;
pub mod error;
pub mod experts;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod schedules;
pub mod synthdata;
pub mod training;
pub mod video;

pub use error::{Error, Result};
