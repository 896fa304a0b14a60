//! Completion of incomplete internal ice-layer thickness stacks.
//!
//! Each radargram is a stack of `T` layer graphs over `N` along-track nodes.
//! A GraphSAGE spatial encoder embeds each node from its coordinates and
//! climate-model covariates, a pre-norm transformer mixes information across
//! layers, and a scalar head predicts thickness everywhere. Training uses a
//! Huber loss restricted to observed entries; completion keeps observed
//! values and fills only the gaps.

pub mod covsync;
pub mod datasyn;
pub mod downstream;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod model;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use graph::{AdjacencySpec, LayerStackSample};
pub use tensor::{Tape, Tensor, Var};
