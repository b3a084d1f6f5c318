use std::fs;
use std::path::{Path, PathBuf};

use chatprof_autograd::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::corpus::{SplitRatios, SyntheticSpec};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::{GenerationConfig, GeneratorConfig};
use crate::metrics::MetricConfig;
use crate::mining::MiningParams;
use crate::objectives::{LossWeights, NegativeMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// JSON Lines corpus; a synthetic corpus is generated when absent.
    pub corpus: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// `token v1 … vd` text file for the embedding metrics.
    pub word_vectors: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            output_dir: PathBuf::from("runs/default"),
            word_vectors: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_freq: 1,
            max_size: 30_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub negatives: NegativeMode,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Pairs per objective per step.
    pub batch_size: usize,
    pub max_steps_per_epoch: Option<usize>,
    pub optimizer: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            max_steps_per_epoch: None,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Keep the profile encoders fixed during fine-tuning.
    pub freeze_encoders: bool,
    pub optimizer: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            freeze_encoders: false,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Decode only the first examples of the test split.
    pub max_examples: Option<usize>,
}

/// Switches for ablation runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub disable_utt_task: bool,
    pub disable_seq_task: bool,
    pub disable_user_task: bool,
    pub no_utterance_encoder: bool,
    pub no_history_encoder: bool,
    /// Fine-tune from random initialization.
    pub no_pretraining: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Users whose responses are projected.
    pub pca_users: usize,
    /// Users in the profile-similarity histogram.
    pub max_users: usize,
    pub histogram_bins: usize,
    /// Responses sampled for the topic-separation statistics.
    pub max_utterances: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            pca_users: 4,
            max_users: 1000,
            histogram_bins: 20,
            max_utterances: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synthetic: SyntheticSpec,
    pub vocab: VocabConfig,
    pub split: SplitRatios,
    pub mining: MiningParams,
    pub encoders: EncoderConfig,
    pub generator: GeneratorConfig,
    pub generation: GenerationConfig,
    pub objectives: ObjectiveConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub evaluate: EvaluateConfig,
    pub ablation: AblationConfig,
    pub metrics: MetricConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: PathsConfig::default(),
            synthetic: SyntheticSpec::default(),
            vocab: VocabConfig::default(),
            split: SplitRatios::default(),
            mining: MiningParams::default(),
            encoders: EncoderConfig::default(),
            generator: GeneratorConfig::default(),
            generation: GenerationConfig::default(),
            objectives: ObjectiveConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            evaluate: EvaluateConfig::default(),
            ablation: AblationConfig::default(),
            metrics: MetricConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        let cfg: Self = if is_toml {
            toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they
    /// can and are taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut tree = serde_json::to_value(&self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut node = &mut tree;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Usage(format!("unknown config key {key:?}")))?;
            }
            *node = value;
        }
        serde_json::from_value(tree).map_err(|e| Error::Usage(format!("invalid override: {e}")))
    }

    /// Encoder settings with the ablation switches applied.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            no_utterance_encoder: self.ablation.no_utterance_encoder,
            no_history_encoder: self.ablation.no_history_encoder,
            ..self.encoders.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Usage("batch_size must be at least 1".into()));
        }
        if self.mining.history_len > self.encoders.history.max_positions {
            return Err(Error::Usage(format!(
                "mining.history_len {} exceeds encoders.history.max_positions {}",
                self.mining.history_len, self.encoders.history.max_positions
            )));
        }
        if !(self.split.train > 0.0 && self.split.valid >= 0.0 && self.split.train + self.split.valid <= 1.0) {
            return Err(Error::Usage(format!(
                "split ratios train {} valid {} are not a partition",
                self.split.train, self.split.valid
            )));
        }
        if let Some(c) = &self.paths.corpus {
            if !c.exists() {
                return Err(Error::Data(format!("corpus {} not found", c.display())));
            }
        }
        self.generation.validate()?;
        for t in [
            &self.encoders.utterance,
            &self.encoders.history,
            &self.generator.encoder,
            &self.generator.decoder,
        ] {
            t.validate()?;
        }
        Ok(())
    }
}
