//! Evolving latent space models for dynamic networks.

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod io;
pub mod model;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use generator::{generate, generate_network, EdgeEmission, GeneratorConfig, GeneratorOutput};
pub use model::{DynamicNetwork, HyperParams, LatentTrajectory};
pub use rng::{SeedTree, Stream};
