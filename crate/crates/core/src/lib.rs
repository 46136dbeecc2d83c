pub mod autodiff;
pub mod dataset;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod run;
pub mod sweep;
pub mod synth;
mod jsonl;
pub mod textproc;
pub mod training;

pub use error::{Error, Result};
