//! Weight-space learning on heterogeneous model zoos.

pub mod arch;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evalharness;
pub mod lap;
pub mod losses;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod sampler;
pub mod sane_model;
pub mod tokenizer;
pub mod trainer;
pub mod zoo_store;
pub mod zoogen;

pub use error::{Error, Result};
