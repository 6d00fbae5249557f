use std::path::Path;

use anyhow::{bail, Context, Result};
use nts_core::decoder::DecodeConfig;
use nts_core::seeds;
use nts_core::seq2seq::ModelConfig;
use nts_core::textpipe::{DEFAULT_MAX_LEN, DEFAULT_MIN_LEN};
use nts_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TextpipeSection {
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for TextpipeSection {
    fn default() -> Self {
        TextpipeSection {
            min_len: DEFAULT_MIN_LEN,
            max_len: DEFAULT_MAX_LEN,
            vocab_size: 50_000,
        }
    }
}

/// Architecture sizes. Vocabulary sizes come from the vocabulary files and
/// dropout from the `train` section.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 256,
            hidden_dim: 256,
            attention_dim: 256,
        }
    }
}

/// `TrainConfig` without its seed, which is derived from the global one.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_start_epoch: usize,
    pub clip_norm: f64,
    pub dropout: f64,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            decay_start_epoch: t.decay_start_epoch,
            clip_norm: t.clip_norm,
            dropout: t.dropout,
            shuffle: t.shuffle,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Number of simplified sentences to back-translate. Must be given
    /// explicitly, in the file or as `--sample-n`.
    pub sample_n: Option<usize>,
    pub backtranslate_max_len: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub system_name: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            system_name: "NMT".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub textpipe: TextpipeSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeConfig,
    pub augment: AugmentSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            textpipe: TextpipeSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            decode: DecodeConfig::default(),
            augment: AugmentSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Seeds handed to each stage, all derived from `RunConfig::seed`.
#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub struct StageSeeds {
    pub train: u64,
    pub reverse: u64,
    pub sample: u64,
    pub mix: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds {
            train: seeds::for_stage(self.seed, "train"),
            reverse: seeds::for_stage(self.seed, "reverse"),
            sample: seeds::for_stage(self.seed, "sample"),
            mix: seeds::for_stage(self.seed, "mix"),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            decay_start_epoch: t.decay_start_epoch,
            clip_norm: t.clip_norm,
            dropout: t.dropout,
            seed,
            shuffle: t.shuffle,
        }
    }

    pub fn model_config(&self, src_vocab_size: usize, tgt_vocab_size: usize) -> ModelConfig {
        ModelConfig {
            src_vocab_size,
            tgt_vocab_size,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            attention_dim: self.model.attention_dim,
            dropout_rate: self.train.dropout,
        }
    }

    /// Range checks. Messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        let tp = &self.textpipe;
        if tp.min_len > tp.max_len {
            bail!("textpipe.min_len ({}) exceeds textpipe.max_len ({})", tp.min_len, tp.max_len);
        }
        if tp.vocab_size <= nts_core::textpipe::NUM_SPECIALS {
            bail!("textpipe.vocab_size must exceed {}", nts_core::textpipe::NUM_SPECIALS);
        }
        for (key, v) in [
            ("model.embed_dim", self.model.embed_dim),
            ("model.hidden_dim", self.model.hidden_dim),
            ("model.attention_dim", self.model.attention_dim),
            ("train.epochs", self.train.epochs),
            ("decode.beam_size", self.decode.beam_size),
            ("decode.max_len", self.decode.max_len),
        ] {
            if v == 0 {
                bail!("{key} must be at least 1");
            }
        }
        let t = &self.train;
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            bail!("train.learning_rate must be a finite non-negative number");
        }
        if !(t.lr_decay.is_finite() && t.lr_decay > 0.0) {
            bail!("train.lr_decay must be positive");
        }
        if t.clip_norm.is_nan() || t.clip_norm <= 0.0 {
            bail!("train.clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&t.dropout) {
            bail!("train.dropout must lie in [0, 1)");
        }
        if self.augment.backtranslate_max_len == Some(0) {
            bail!("augment.backtranslate_max_len must be at least 1");
        }
        if self.eval.system_name.trim().is_empty() {
            bail!("eval.system_name must not be empty");
        }
        Ok(())
    }
}
