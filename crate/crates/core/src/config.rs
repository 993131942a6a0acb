//! The run configuration: one JSON document with `model`, `mstr`, `train`
//! and `data` sections. Every field has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{heldout_seed, load_manifest, synth_dataset, AugmentKind, PairPolicy, PairedDataset};
use crate::error::{Error, Result};
use crate::mstr::MstrConfig;
use crate::trainer::{LossMode, ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub count: usize,
    pub seed: u64,
    /// Size of the held-out split drawn from the same generator; 0 for none.
    pub heldout_count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 16,
            seed: 0,
            heldout_count: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory holding `manifest.json`. Exclusive with `synth`.
    pub root: Option<PathBuf>,
    /// Procedural dataset; the default source when `root` is absent.
    pub synth: Option<SynthSpec>,
    /// Policies of the original and the counterpart streams.
    pub pair_policy: [AugmentKind; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            synth: None,
            pair_policy: [AugmentKind::A0, AugmentKind::A1],
        }
    }
}

impl DataConfig {
    pub fn policy(&self) -> PairPolicy {
        PairPolicy::new(self.pair_policy[0], self.pair_policy[1])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mstr: MstrConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn at(path: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        e @ Error::Config { .. } => e,
        other => Error::Config {
            path: path.into(),
            msg: other.to_string(),
        },
    }
}

impl RunConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { "<root>".into() } else { path },
                msg: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    /// The effective configuration as pretty JSON.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate().map_err(at("model.encoder"))?;
        if self.model.projection_dim == 0 {
            return Err(Error::Config {
                path: "model.projection_dim".into(),
                msg: "must be ≥ 1".into(),
            });
        }
        if self.mstr.enabled {
            self.mstr
                .validate(self.model.encoder.grid(), self.model.encoder.embed_dim)
                .map_err(at("mstr"))?;
        }
        self.train.validate()?;
        match (self.train.loss_mode, self.mstr.enabled) {
            (LossMode::Full, false) => {
                return Err(Error::Config {
                    path: "mstr.enabled".into(),
                    msg: "loss_mode full needs the recycling head".into(),
                })
            }
            (LossMode::Triplet, true) => {
                return Err(Error::Config {
                    path: "mstr.enabled".into(),
                    msg: "loss_mode triplet forbids the recycling head".into(),
                })
            }
            _ => {}
        }
        if self.data.root.is_some() && self.data.synth.is_some() {
            return Err(Error::Config {
                path: "data".into(),
                msg: "give either root or synth, not both".into(),
            });
        }
        let synth = self.synth_spec();
        if self.data.root.is_none() && synth.count < 2 {
            return Err(Error::Config {
                path: "data.synth.count".into(),
                msg: format!("must be ≥ 2, got {}", synth.count),
            });
        }
        if synth.heldout_count == 1 {
            return Err(Error::Config {
                path: "data.synth.heldout_count".into(),
                msg: "must be 0 or ≥ 2".into(),
            });
        }
        for (i, k) in self.data.pair_policy.iter().enumerate() {
            crate::data::AugmentPolicy::of(*k)
                .validate()
                .map_err(|e| at(&format!("data.pair_policy[{i}]"))(e))?;
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        self.data.synth.clone().unwrap_or_default()
    }

    /// Training dataset described by the `data` section.
    pub fn load_dataset(&self) -> Result<PairedDataset> {
        let size = self.model.encoder.image_size;
        match &self.data.root {
            Some(root) => load_manifest(root, Some(size)),
            None => {
                let s = self.synth_spec();
                synth_dataset(s.count, size, s.seed)
            }
        }
    }

    /// Held-out synthetic pairs from the same generator family, if configured.
    pub fn heldout_dataset(&self) -> Result<Option<PairedDataset>> {
        let s = self.synth_spec();
        if self.data.root.is_some() || s.heldout_count == 0 {
            return Ok(None);
        }
        synth_dataset(s.heldout_count, self.model.encoder.image_size, heldout_seed(s.seed)).map(Some)
    }
}
