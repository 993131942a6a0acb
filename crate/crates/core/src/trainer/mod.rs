//! Siamese training: model assembly, Adam, the step function, the epoch loop
//! and checkpoints.

mod adam;
mod checkpoint;
mod model;
mod step;

pub use adam::{adam_update, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint_bytes, save_checkpoint, checkpoint_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{ModelBundle, ModelConfig, Modality, Stream};
pub use step::{train_step, LogRecord, StepRngs, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// `multi + inter + intra`
    Basic,
    /// Basic plus the recycling term.
    Full,
    /// Triplet loss on the joint embeddings only.
    Triplet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    /// Original and augmented inputs through shared weights.
    Double,
    /// Originals only.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletAnchor {
    Sketch,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub tau: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub framework: Framework,
    pub use_inter: bool,
    pub symmetric_contrastive: bool,
    pub triplet_margin: f64,
    pub triplet_anchor: TripletAnchor,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            epochs: 300,
            tau: 0.07,
            seed: 0,
            loss_mode: LossMode::Full,
            framework: Framework::Double,
            use_inter: true,
            symmetric_contrastive: false,
            triplet_margin: 0.2,
            triplet_anchor: TripletAnchor::Sketch,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Checks ranges; errors carry the offending key under `train.`.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                path: format!("train.{key}"),
                msg,
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be ≥ 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be ≥ 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", format!("must be > 0, got {}", self.tau));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be ≥ 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be ≥ 0, got {}", self.weight_decay));
        }
        if !(self.triplet_margin >= 0.0 && self.triplet_margin.is_finite()) {
            return bad("triplet_margin", format!("must be ≥ 0, got {}", self.triplet_margin));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip", format!("must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn zero_tau_names_key() {
        let cfg = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.tau"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn enums_serialize_lowercase() {
        assert_eq!(serde_json::to_string(&LossMode::Triplet).unwrap(), "\"triplet\"");
        assert_eq!(serde_json::to_string(&Framework::Single).unwrap(), "\"single\"");
    }
}
