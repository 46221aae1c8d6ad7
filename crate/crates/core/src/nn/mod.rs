//! Minimal dense-network engine: matrices, layers, reverse-mode gradients,
//! optimizers and the finite-difference oracle.

pub mod gradcheck;
pub mod layer;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod rng;

pub use gradcheck::{finite_diff_grad, finite_diff_masked, relative_error, Probe};
pub use layer::{sigmoid, Activation, DenseLayer, LayerGrads};
pub use matrix::{dot, squared_distance, Matrix};
pub use mlp::{MlpNetwork, NetGrads};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use rng::Rng;
