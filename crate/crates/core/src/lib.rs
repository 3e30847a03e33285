//! Filter pruning for plain CNNs by sub-network multi-objective evolution.
//!
//! Each conv layer is pruned by running a constrained NSGA-II over binary
//! filter masks. The two objectives are the fraction of retained filters
//! and the intensity-compensated reconstruction error of the two-layer
//! sub-network that starts at that conv. Layers are pruned group by group
//! from the deepest group upward, with fine-tuning after every group.

pub mod config;
pub mod data;
pub mod error;
pub mod evolution;
pub mod export;
pub mod model_io;
pub mod network;
pub mod objectives;
pub mod parallel;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
