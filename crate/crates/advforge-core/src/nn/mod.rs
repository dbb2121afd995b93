//! Minimal differentiable layer engine.
//!
//! A model is an ordered layer stack ending in softmax. The engine offers
//! exact reverse-mode gradients with respect to both parameters and inputs;
//! a backward pass always produces both (uniform cost), which keeps the
//! relative expense of the training regimes honest when comparing them.

pub mod config;
pub mod init;
pub mod io;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;

pub use config::{LayerSpec, ModelConfig};
pub use loss::{
    cross_entropy, cross_entropy_per_example, CategoricalBatch, LabelBatch, PROB_FLOOR,
};
pub use model::{Gradients, Model};
pub use optim::{Optimizer, OptimizerSpec};
