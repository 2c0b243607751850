pub mod engine;
pub mod error;
pub mod headid;
pub mod metrics;
pub mod model;
pub mod rgtrain;
pub mod synthcorpus;
pub mod tokenizer;

pub use error::{Error, Result};
