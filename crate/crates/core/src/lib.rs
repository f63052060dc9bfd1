//! Feature visualization by matching per-channel activation distributions of
//! a synthesized image to those of real reference images.

pub mod archive;
pub mod attribution;
pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod imageops;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod reference;
pub mod sortmatch;
pub mod synthesis;

pub use error::{Error, Result};
