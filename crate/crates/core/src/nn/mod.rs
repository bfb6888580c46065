//! Minimal dense-network engine: layers, explicit backpropagation, Adam and a
//! finite-difference gradient checker.

mod adam;
mod dense;
pub mod gradcheck;

pub use adam::{Adam, AdamConfig};
pub use dense::{sigmoid, Activation, DenseLayer, DenseNet, ForwardCache, NetGrads, LEAKY_SLOPE};
pub use gradcheck::{check_gradient, grad_check, GradCheckReport};

/// Nonlinearity of every hidden layer in the encoder, decoder and estimator.
pub const HIDDEN_ACTIVATION: Activation = Activation::LeakyRelu;
