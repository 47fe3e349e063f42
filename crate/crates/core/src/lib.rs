//! Multi-touch attribution from member journeys: synthetic data, path
//! processing, impression imputation, an attention conversion model,
//! credit assignment and validation.

pub mod crediting;
pub mod error;
pub mod journey;
pub mod imputation;
pub mod kvconf;
pub mod metrics;
pub mod model;
pub mod pathproc;
pub mod pipeline;
pub mod seeds;
pub mod synthgen;
pub mod validate;

pub use error::{Error, Result};
