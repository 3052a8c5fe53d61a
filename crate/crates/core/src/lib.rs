//! In-context reinforcement learning workbench.
//!
//! The pipeline has three stages: run source RL algorithms (UCB, a batched
//! advantage actor-critic) across task distributions and record their full
//! learning histories; train a causal sequence model to predict actions from
//! across-episodic context windows sampled from those histories; evaluate the
//! frozen model by letting it populate its own context queue in held-out
//! tasks, where any return improvement happens purely in-context.

pub mod error;
pub mod rng;
pub mod tensor;

pub mod env;
pub mod history;
pub mod checkpoint;
pub mod model;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod source;
pub mod trainer;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
