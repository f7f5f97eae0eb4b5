//! Federated recommendation with on-device update logs and fast unlearning.
//!
//! The crate trains NCF or LightGCN recommenders with federated averaging,
//! keeps a filtered history of each client's updates on the client, and
//! uses that history to remove clients (for example, poisoning attackers)
//! from a trained model without a full retrain.

pub mod adversary;
pub mod dataset;
pub mod devicelog;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod negsample;
pub mod rng;
pub mod unlearn;

pub use adversary::AttackConfig;
pub use dataset::{LocalDataset, SplitDataset};
pub use devicelog::{DeviceLog, LogConfig, LogEntry, SelectionMode};
pub use error::{Error, Result};
pub use evalkit::{ExperimentReport, Metrics, RankingTask, Recommender};
pub use federation::{
    AggregatedDelta, ClientState, FederationConfig, SelectionTrace, ServerUpdate, TrainOptions,
    TrainOutcome, UpdateRecord,
};
pub use model::{GlobalParameters, ModelKind, PrivateParameters, TrainConfig};
pub use negsample::{SamplingConfig, SamplingStrategy};
pub use unlearn::{UnlearnConfig, UnlearnMode};
