//! Per-sentence SGD with teacher forcing, global-norm gradient clipping and
//! step learning-rate decay.

mod checkpoint;

pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::SentencePair;
use crate::error::{Error, Result};
use crate::seeds;
use crate::seq2seq::{self, ModelConfig, ModelParams};
use crate::textpipe::VocabFingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Decay is applied after every epoch numbered at least this (1-based).
    pub decay_start_epoch: usize,
    pub clip_norm: f64,
    pub dropout: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 13,
            learning_rate: 1.0,
            lr_decay: 0.5,
            decay_start_epoch: 8,
            clip_norm: 5.0,
            dropout: 0.3,
            seed: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lr_decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "clip_norm {} must be positive",
                self.clip_norm
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(self.decay_start_epoch.max(1));
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }
}

/// Source and target vocabulary fingerprints recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabPair {
    pub src: VocabFingerprint,
    pub tgt: VocabFingerprint,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Eval-mode per-token loss on the validation pairs after each epoch.
    pub validation_losses: Vec<f64>,
}

/// Rescales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the factor applied.
pub fn clip_gradients(params: &mut ModelParams, clip_norm: f64) -> f64 {
    let sq: f64 = params
        .named()
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm <= clip_norm {
        return 1.0;
    }
    let scale = clip_norm / norm;
    for (_, t) in params.named_mut() {
        if let Some(g) = t.grad_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    scale
}

fn sgd_step(params: &mut ModelParams, lr: f64) {
    for (_, t) in params.named_mut() {
        let Some(g) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        t.data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(w, gi)| *w -= lr * gi);
        t.zero_grad();
    }
}

/// Token-weighted eval-mode loss: total negative log-likelihood divided by
/// the number of predicted tokens (EOS included).
pub fn mean_token_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    pairs: &[SentencePair],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to score".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for pair in pairs {
        let steps = pair.tgt_ids.len() + 1;
        total += seq2seq::loss_value(params, cfg, pair, false, 0)? * steps as f64;
        tokens += steps;
    }
    Ok(total / tokens as f64)
}

fn check_ids(pairs: &[SentencePair], cfg: &ModelConfig) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if let Some(bad) = p.src_ids.iter().find(|&&id| id >= cfg.src_vocab_size) {
            return Err(Error::Index(format!(
                "pair {i}: source id {bad} outside vocabulary of {}",
                cfg.src_vocab_size
            )));
        }
        if let Some(bad) = p.tgt_ids.iter().find(|&&id| id >= cfg.tgt_vocab_size) {
            return Err(Error::Index(format!(
                "pair {i}: target id {bad} outside vocabulary of {}",
                cfg.tgt_vocab_size
            )));
        }
    }
    Ok(())
}

pub fn train(
    pairs: &[SentencePair],
    config: &TrainConfig,
    model_config: &ModelConfig,
    vocabs: &VocabPair,
) -> Result<TrainOutcome> {
    train_with_validation(pairs, &[], config, model_config, vocabs)
}

/// Trains from a seeded initialization. Parameters are updated after every
/// pair; the pair list itself is never modified.
pub fn train_with_validation(
    pairs: &[SentencePair],
    validation: &[SentencePair],
    config: &TrainConfig,
    model_config: &ModelConfig,
    vocabs: &VocabPair,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    config.validate()?;
    let mut cfg = *model_config;
    cfg.dropout_rate = config.dropout;
    cfg.validate()?;
    if vocabs.src.size != cfg.src_vocab_size || vocabs.tgt.size != cfg.tgt_vocab_size {
        return Err(Error::VocabMismatch(format!(
            "model expects vocabularies of {}/{}, fingerprints say {}/{}",
            cfg.src_vocab_size, cfg.tgt_vocab_size, vocabs.src.size, vocabs.tgt.size
        )));
    }
    check_ids(pairs, &cfg)?;
    check_ids(validation, &cfg)?;

    let mut params = ModelParams::init(&cfg, seeds::for_stage(config.seed, "init"));
    let shuffle_seed = seeds::for_stage(config.seed, "shuffle");
    let dropout_seed = seeds::for_stage(config.seed, "dropout");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut validation_losses = Vec::new();

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order = (0..pairs.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(shuffle_seed, epoch as u64));
            order.shuffle(&mut rng);
        }
        let lr = config.learning_rate_at(epoch);
        let epoch_seed = seeds::derive(dropout_seed, epoch as u64);
        let mut sum = 0.0;
        for (pos, &i) in order.iter().enumerate() {
            let seed = seeds::derive(epoch_seed, pos as u64);
            let (loss, grads) = seq2seq::loss_and_grads(&params, &cfg, &pairs[i], true, seed)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    pair: i,
                    loss,
                });
            }
            sum += loss;
            params.accumulate_grads(&grads)?;
            clip_gradients(&mut params, config.clip_norm);
            sgd_step(&mut params, lr);
        }
        let mean = sum / pairs.len() as f64;
        log::info!("epoch {epoch}: lr {lr:.6} mean loss {mean:.6}");
        epoch_losses.push(mean);
        if !validation.is_empty() {
            let v = mean_token_loss(&params, &cfg, validation)?;
            log::info!("epoch {epoch}: validation per-token loss {v:.6}");
            validation_losses.push(v);
        }
    }

    let checkpoint = Checkpoint {
        model_config: cfg,
        src_vocab: vocabs.src.clone(),
        tgt_vocab: vocabs.tgt.clone(),
        params,
        meta: TrainingMeta {
            epoch: config.epochs,
            final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
            seed: config.seed,
        },
    };
    Ok(TrainOutcome {
        checkpoint,
        epoch_losses,
        validation_losses,
    })
}
