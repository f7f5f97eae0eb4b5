//! Model parameters, scoring functions, loss and local optimization.

pub mod checkpoint;
pub mod lightgcn;
pub mod local;
pub mod loss;
pub mod ncf;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lightgcn::{lightgcn_propagate, lightgcn_score, Propagated};
pub use local::{local_train_step, Gradients, LocalModel, Sample};
pub use loss::{local_loss, sigmoid};
pub use ncf::{ncf_score, ncf_scores};
pub use params::{DenseLayer, DenseWeights, GlobalParameters, ModelKind, PrivateParameters};

fn default_embedding_size() -> usize {
    64
}
fn default_ffn_dims() -> Vec<usize> {
    vec![128, 256, 128, 64]
}
fn default_lightgcn_layers() -> usize {
    1
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    64
}
fn default_local_epochs() -> usize {
    20
}
fn default_global_rounds() -> usize {
    200
}
fn default_client_fraction() -> f64 {
    10.0
}

/// Federated training hyperparameters. `client_fraction` is a percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    #[serde(default = "default_embedding_size")]
    pub embedding_size: usize,
    #[serde(default = "default_ffn_dims")]
    pub ffn_dims: Vec<usize>,
    #[serde(default = "default_lightgcn_layers")]
    pub lightgcn_layers: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_global_rounds")]
    pub global_rounds: usize,
    #[serde(default = "default_client_fraction")]
    pub client_fraction: f64,
    /// Negatives per positive before shrinking; 4 for NCF and 1 for LightGCN when unset.
    #[serde(default)]
    pub negative_ratio: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelKind) -> Self {
        Self {
            model,
            embedding_size: default_embedding_size(),
            ffn_dims: default_ffn_dims(),
            lightgcn_layers: default_lightgcn_layers(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            local_epochs: default_local_epochs(),
            global_rounds: default_global_rounds(),
            client_fraction: default_client_fraction(),
            negative_ratio: None,
            seed: 0,
        }
    }

    pub fn negative_ratio(&self) -> usize {
        self.negative_ratio.unwrap_or(match self.model {
            ModelKind::Ncf => 4,
            ModelKind::LightGcn => 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.embedding_size == 0 {
            return fail("embedding_size must be positive");
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 100.0) {
            return fail("client_fraction must be in (0, 100]");
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.negative_ratio() == 0 {
            return fail("negative_ratio must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("learning_rate must be finite and non-negative");
        }
        if self.ffn_dims.contains(&0) {
            return fail("ffn_dims entries must be positive");
        }
        Ok(())
    }
}
