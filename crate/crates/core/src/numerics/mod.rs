//! Small dense numerics: row-major matrices, feed-forward networks with
//! hand-written backpropagation, the Adam optimizer and a seeded RNG.
//!
//! Everything is `f64`. The networks here are small enough that precision
//! is cheaper than chasing drift in finite-difference checks.

mod matrix;
mod net;
mod optim;
mod rng;

pub use matrix::Matrix;
pub use net::{Activation, FeedForwardNet, ForwardCache, Layer, LayerGradients, NetGradients, ParamKind};
pub use optim::{AdamConfig, OptimizerState};
pub use rng::Rng;
