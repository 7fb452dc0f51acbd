use thiserror::Error;

use crate::data::ClientId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeMismatch { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("incongruent parameter trees at `{path}`: {reason}")]
    IncongruentTrees { path: String, reason: String },

    #[error("weighted sum over an empty term list")]
    EmptyTermList,

    #[error("duplicate key `{0}`")]
    DuplicateKey(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dataset has no examples")]
    EmptyDataset,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("invalid batch spec: {0}")]
    InvalidBatchSpec(String),

    #[error("final batch of {remainder} examples exceeds the largest bucket {max_bucket}")]
    NoBucketFits { remainder: usize, max_bucket: usize },

    #[error("cohort of {requested} clients requested from {available}")]
    CohortTooLarge { requested: usize, available: usize },

    #[error("invalid model input: {0}")]
    InvalidInput(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("aggregation over an empty cohort")]
    EmptyCohort,

    #[error("total client weight is zero")]
    ZeroTotalWeight,

    #[error("client `{client}` failed: {source}")]
    ClientFailed {
        client: ClientId,
        #[source]
        source: Box<Error>,
    },

    #[error("client `{0}` appears more than once in the work list")]
    DuplicateClient(ClientId),

    #[error("non-finite server parameters after round {round}")]
    NonFiniteParams { round: u64 },
}
