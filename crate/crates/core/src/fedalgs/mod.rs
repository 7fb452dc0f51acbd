//! Federated averaging, its server-optimizer variant and the aggregators.
//!
//! Randomness of round `t` is addressed from the root generator:
//!
//! ```text
//! round/t/sample                 cohort selection
//! round/t/client/<id>/batches    local shuffling
//! round/t/aggregate              quantization, noise
//! ```

mod aggregators;
mod client;
mod trainer;

pub use aggregators::{Aggregator, ClipNoiseAggregator, MeanAggregator, QuantizeAggregator};
pub use client::{client_update, ClientUpdate, ClientUpdateConfig, FedAvgClient, LocalOutput, LocalState};
pub use trainer::{fed_avg, fed_opt, FedAlgConfig, FederatedTrainer, RoundDiagnostics, RoundState};
