//! Purchase-intent prediction from clickstream sessions with recurrent
//! networks over learned event embeddings.

pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod store;
pub mod synth;
pub mod trainer;
pub mod transform;
pub mod vocab;

pub use error::{Error, Result};
