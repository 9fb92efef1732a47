pub mod backbone;
pub mod bias;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod explainer;
pub mod optim;
pub mod plot;
pub mod probe;
pub mod synth;

pub use error::{Error, Result};
