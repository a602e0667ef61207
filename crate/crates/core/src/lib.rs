//! Simulation and analysis toolkit for low-communication data-parallel
//! training where every node updates only a fixed slice of the parameters.
//!
//! * [`model`]: toy transformer with a partial backward pass.
//! * [`slicing`]: trainable sets per node, count vector, sync groups.
//! * [`optim`]: masked AdamW inner optimizer and Nesterov outer optimizer.
//! * [`data`]: synthetic corpora and sharding.
//! * [`orchestrator`]: executes the training loop over simulated nodes.
//! * [`costmodel`]: analytic FLOPs, memory and communication models.

pub mod costmodel;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod optim;
pub mod orchestrator;
pub mod slicing;
pub mod tensor;

pub use error::{Error, Result};
