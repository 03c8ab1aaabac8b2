use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    /// Transport plan rows used as soft targets.
    Soft,
    /// Each row's mass moved onto its most likely class.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Random,
    /// Contrastive-only pretraining, then SwAMP from the best encoders.
    Warmstart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    ContrastiveOnly,
    SwampCombined,
}

/// Training hyperparameters. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub queue_capacity: usize,
    /// Classifier softmax temperature.
    pub tau: f64,
    /// Inverse entropic regularization strength of the transport solver.
    pub eta: f64,
    /// Weight of the swapped cross-entropy in the combined loss.
    pub lambda: f64,
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub assignment: Assignment,
    pub init: Init,
    pub sk_max_iters: usize,
    pub sk_tol: f64,
    pub loss_mode: LossMode,
    /// Train on only the first `n` training pairs.
    pub train_subset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            num_classes: 1000,
            queue_capacity: 1280,
            tau: 0.01,
            eta: 20.0,
            lambda: 1.0,
            margin: 0.1,
            lr: 1e-3,
            batch_size: 128,
            epochs: 100,
            embed_dim: 5,
            hidden: 50,
            assignment: Assignment::Soft,
            init: Init::Random,
            sk_max_iters: 100,
            sk_tol: 1e-6,
            loss_mode: LossMode::SwampCombined,
            train_subset: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("num_classes", self.num_classes),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("sk_max_iters", self.sk_max_iters),
        ];
        for (key, v) in positive_counts {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        for (key, v) in [("tau", self.tau), ("eta", self.eta), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{key} must be positive and finite, got {v}"
                )));
            }
        }
        for (key, v) in [
            ("lambda", self.lambda),
            ("margin", self.margin),
            ("sk_tol", self.sk_tol),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{key} must be non-negative and finite, got {v}"
                )));
            }
        }
        if self.queue_capacity > 0 && self.queue_capacity < self.batch_size {
            return Err(Error::Config(format!(
                "queue_capacity {} is smaller than batch_size {}; use 0 to disable the queue",
                self.queue_capacity, self.batch_size
            )));
        }
        if let Some(n) = self.train_subset {
            if n < self.batch_size {
                return Err(Error::Config(format!(
                    "train_subset {n} holds no full batch of {}",
                    self.batch_size
                )));
            }
        }
        Ok(())
    }
}
