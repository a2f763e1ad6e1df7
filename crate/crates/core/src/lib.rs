//! Mixtures of Wasserstein GANs on synthetic distributions with known ground
//! truth: networks with exact first- and second-order gradients, Adam, the
//! datasets, mixture losses and training schedule, evaluation metrics and
//! plane projections.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod mixgan;
pub mod net;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod runner;
pub mod viz;

pub use error::{Error, Result};
pub use net::{GradientSet, Matrix, Network, NetworkSpec, Vector};
