//! Losses, the optimizer, the per-sample training graph and the train/eval
//! loops.

mod eval;
mod losses;
mod optim;
mod state;
mod step;
mod trainer;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memory::validate_size;
use crate::model::ModelConfig;

pub use eval::{
    evaluate, evaluate_with, inference, inference_trace, EvalReport, InferenceTrace, PairMetrics, PositionStats, CD_REPORT_SCALE,
    FSCORE_THRESHOLD,
};
pub use losses::{alignment_loss, total_loss, LossWeights};
pub use optim::{Adam, AdamConfig, Moments};
pub use state::TrainState;
pub use step::{dense_bank_grad, query_branch, query_cloud, sample_pass, Ablation, LossValues, Objective, Retrieval, SamplePass};
pub use trainer::{train, training_step, GradNorms, StepOutcome, StepReport, TrainOutcome};

/// How the confidence temperature is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauPolicy {
    /// Mean retrieval squared distance over the previous epoch.
    RunningMean,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub use_pm: bool,
    pub use_de: bool,
    pub weights: LossWeights,
    /// Number of prototypes.
    pub k: usize,
    pub tau: TauPolicy,
    /// Rows retrieved fewer times than this in an epoch are reseeded.
    pub min_hits: u64,
    /// Consecutive rejected steps tolerated before aborting.
    pub max_rejections: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            use_pm: true,
            use_de: true,
            weights: LossWeights::default(),
            k: 64,
            tau: TauPolicy::RunningMean,
            min_hits: 1,
            max_rejections: 10,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        self.adam().validate()?;
        self.weights.validate()?;
        validate_size(self.k)?;
        if let TauPolicy::Fixed(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config("tau", "must be > 0"));
            }
        }
        if self.max_rejections == 0 {
            return Err(Error::config("max_rejections", "must be >= 1"));
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation { use_pm: self.use_pm, use_de: self.use_de }
    }
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Seed streams derived from the run seed.
pub(crate) mod streams {
    pub const MODEL: u64 = 1;
    pub const BANK: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const RESEED: u64 = 4;
}
