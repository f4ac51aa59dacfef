//! Selective state-space multiple-instance learning on grid-structured
//! token sequences.
//!
//! The crate is generic over the floating-point [`Scalar`]; the aliases at
//! the root fix it to `f64`, which every test and the command-line tool use.

pub mod analysis;
pub mod autodiff;
mod binio;
pub mod config;
pub mod cts;
pub mod error;
pub mod metrics;
pub mod model;
pub mod s2pe;
pub mod scalar;
pub mod scanning;
pub mod ssm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type SsmParams = ssm::SsmParams<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type BagView = model::BagView<f64>;
pub type BagPrediction = model::BagPrediction<f64>;
pub type StripeEncoderParams = s2pe::StripeEncoderParams<f64>;
pub type InstanceLearner = cts::InstanceLearner<f64>;
