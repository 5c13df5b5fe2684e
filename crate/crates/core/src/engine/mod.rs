//! Dense-network substrate shared by the VAE and GAN: fully-connected layers,
//! inverted dropout, L2 weight decay, losses, manual backpropagation and Adam.
//! Everything runs in `f64`.

pub mod adam;
pub mod loss;
pub mod net;
pub mod rng;

pub use adam::{AdamConfig, AdamState};
pub use net::{sigmoid, Activation, DenseLayer, DenseNet, Gradients, Mode, Tape};
pub use rng::RngStream;
