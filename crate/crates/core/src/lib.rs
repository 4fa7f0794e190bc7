//! Multi-view video / report contrastive retrieval on a seeded synthetic
//! echocardiography benchmark.

pub mod contrastive;
pub mod data;
mod dd;
pub mod encoders;
pub mod error;
pub mod io;
pub mod math;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
