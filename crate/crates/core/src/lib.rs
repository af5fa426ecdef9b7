pub mod autodiff;
pub mod diffusion;
pub mod downstream;
pub mod embed;
pub mod error;
pub mod graphcond;
pub mod image;
pub mod interventions;
pub mod maskgraph;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod util;

pub use error::{Error, Result};
