pub mod actors;
pub mod checkpoint;
pub mod cli;
pub mod decoding;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod numkit;
pub mod optim;
pub mod rng;
pub mod seq2seq;
pub mod textio;

pub use error::{Error, Result};
