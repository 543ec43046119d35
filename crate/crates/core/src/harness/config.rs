//! Experiment configuration and presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{CorpusConfig, DEFAULT_L_MAX, FIRST_LEXICAL};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::transducer_model::ModelConfig;

use super::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Biasing value projections zeroed and frozen, no biasing loss.
    Baseline,
    /// Biasing with the intermediate biasing loss, transducer-only decoding.
    Ib,
    /// As `Ib`, decoded jointly with CTC prefix scores.
    IbJoint,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Baseline, Preset::Ib, Preset::IbJoint];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Ib => "ib",
            Preset::IbJoint => "ib-joint",
        }
    }

    pub fn biasing(self) -> bool {
        self != Preset::Baseline
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (baseline, ib, ib-joint)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup: u64,
    /// Maximum tokens per bias phrase.
    pub l_max: usize,
    /// Global gradient-norm cap; none disables clipping.
    pub clip_norm: Option<f64>,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Stops early after this many steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 16,
            epochs: 30,
            base_lr: 1e-3,
            warmup: 500,
            l_max: DEFAULT_L_MAX,
            clip_norm: None,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test bias-list sizes.
    pub bias_sizes: Vec<usize>,
    /// Evaluates only the first this-many test utterances.
    pub max_utts: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { bias_sizes: vec![0, 10, 50, 100], max_utts: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: CorpusConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub decode: DecodeConfig,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Ib)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let data = CorpusConfig::default();
        let model = ModelConfig {
            feature_dim: data.feature_dim,
            vocab: FIRST_LEXICAL + data.lexical_tokens(),
            ..ModelConfig::default()
        };
        let mut cfg = ExperimentConfig {
            preset,
            seed: 0,
            data,
            model,
            loss: LossWeights::default(),
            decode: DecodeConfig::default(),
            optim: AdamConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.apply_preset(preset);
        cfg
    }

    /// Switches to `preset`, adjusting the settings it governs.
    pub fn apply_preset(&mut self, preset: Preset) {
        self.preset = preset;
        match preset {
            Preset::Baseline => self.loss.ib = 0.0,
            Preset::Ib | Preset::IbJoint => {
                if self.loss.ib == 0.0 {
                    self.loss.ib = LossWeights::default().ib;
                }
            }
        }
    }

    /// Decoder settings of this preset: joint for `ib-joint`, transducer-only
    /// otherwise.
    pub fn decoder(&self) -> DecodeConfig {
        match self.preset {
            Preset::IbJoint => self.decode,
            _ => DecodeConfig { mu_ctc: 0.0, mu_tr: 1.0, ..self.decode },
        }
    }

    /// Takes the model's input and output sizes from the corpus settings.
    pub fn sync_model_to_data(&mut self) {
        self.model.feature_dim = self.data.feature_dim;
        self.model.vocab = FIRST_LEXICAL + self.data.lexical_tokens();
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.decode.validate()?;
        let t = &self.train;
        if t.batch == 0 || t.warmup == 0 || t.l_max == 0 || !(t.base_lr > 0.0) {
            return Err(Error::Config("batch, warmup, l_max and base_lr must be positive".into()));
        }
        if self.model.feature_dim != self.data.feature_dim {
            return Err(Error::Config("model feature_dim differs from the corpus".into()));
        }
        if self.model.vocab != FIRST_LEXICAL + self.data.lexical_tokens() {
            return Err(Error::Config("model vocabulary size differs from the corpus".into()));
        }
        if self.preset == Preset::Baseline && self.loss.ib != 0.0 {
            return Err(Error::Config("the baseline preset has no biasing loss".into()));
        }
        Ok(())
    }

    /// Parses a config file; omitted settings take the preset's defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let explicit_ib = raw
            .get("loss")
            .and_then(|l| l.as_table())
            .is_some_and(|l| l.contains_key("ib"));
        let mut cfg: ExperimentConfig = raw.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if cfg.preset == Preset::Baseline && !explicit_ib {
            cfg.loss.ib = 0.0;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
