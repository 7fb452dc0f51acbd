//! Federated learning simulation engine.
//!
//! The crate is organised around the round structure of federated training:
//! a server samples a cohort of clients, broadcasts its parameters, every
//! client trains locally on its own examples, and the server aggregates the
//! resulting deltas into one update.
//!
//! - [`tensor`], [`tree`] and [`rng`] hold the numeric primitives: dense
//!   tensors, nested parameter trees with structural arithmetic, and a
//!   splittable counter-based generator.
//! - [`data`] models federated datasets and the three batching strategies
//!   (plain, padded to shape buckets, shuffled and repeated).
//! - [`models`] and [`optim`] supply models with analytic gradients, masked
//!   per-example metrics and first-order optimizers.
//! - [`runner`] executes per-client work on a sequential or parallel backend
//!   with identical results.
//! - [`fedalgs`] implements federated averaging, its server-optimizer
//!   variant and the aggregators.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`, which is what the experiment
//! tooling uses.

pub mod data;
pub mod error;
pub mod fedalgs;
pub mod models;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod tensor;
pub mod tree;

pub use error::{Error, Result};
pub use rng::{Label, Rng};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type ParamTree = tree::ParamTree<f64>;
pub type ClientDataset = data::ClientDataset<f64>;
pub type FederatedData = data::FederatedData<f64>;
pub type Batch = data::Batch<f64>;
pub type OptState = optim::OptState<f64>;
pub type RoundState = fedalgs::RoundState<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamTree32 = tree::ParamTree<f32>;
pub type FederatedData32 = data::FederatedData<f32>;
