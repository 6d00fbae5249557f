//! Back-translation data augmentation: reverse model, synthetic sources,
//! mixing and the end-to-end pipeline.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decoder::{self, DecodeConfig, Seq2SeqStepper};
use crate::error::{Error, Result};
use crate::evalmetrics::{self, EvalReport};
use crate::seq2seq::ModelConfig;
use crate::textpipe::{self, Corpus, Sentence, Side, Vocabulary, UNK};
use crate::trainer::{self, Checkpoint, TrainConfig, TrainOutcome, VocabPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Original,
    Synthetic,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Original => "original",
            Origin::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "original" => Ok(Origin::Original),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(Error::InvalidArgument(format!(
                "unknown origin tag {other:?}"
            ))),
        }
    }
}

/// Token ids of an ordinary sentence and its simplification, without
/// boundary markers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SentencePair {
    pub src_ids: Vec<usize>,
    pub tgt_ids: Vec<usize>,
    origin: Origin,
}

impl SentencePair {
    fn with_origin(src_ids: Vec<usize>, tgt_ids: Vec<usize>, origin: Origin) -> Result<Self> {
        if src_ids.is_empty() || tgt_ids.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{origin} sentence pair with an empty side"
            )));
        }
        Ok(SentencePair {
            src_ids,
            tgt_ids,
            origin,
        })
    }

    pub fn original(src_ids: Vec<usize>, tgt_ids: Vec<usize>) -> Result<Self> {
        Self::with_origin(src_ids, tgt_ids, Origin::Original)
    }

    pub fn synthetic(src_ids: Vec<usize>, tgt_ids: Vec<usize>) -> Result<Self> {
        Self::with_origin(src_ids, tgt_ids, Origin::Synthetic)
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    /// The same pair read in the opposite direction.
    pub fn swapped(&self) -> SentencePair {
        SentencePair {
            src_ids: self.tgt_ids.clone(),
            tgt_ids: self.src_ids.clone(),
            origin: self.origin,
        }
    }
}

/// Numericalizes aligned corpora into original pairs. Blank lines on either
/// side are rejected with their line number.
pub fn pairs_from_corpora(
    ordinary: &Corpus,
    simplified: &Corpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<SentencePair>> {
    if ordinary.len() != simplified.len() {
        return Err(Error::Alignment {
            file: "simplified side".into(),
            line: ordinary.len().min(simplified.len()) + 1,
            msg: format!(
                "{} ordinary vs {} simplified lines",
                ordinary.len(),
                simplified.len()
            ),
        });
    }
    ordinary
        .sentences()
        .iter()
        .zip(simplified.sentences())
        .enumerate()
        .map(|(i, (o, s))| {
            SentencePair::original(
                textpipe::numericalize(o, src_vocab, false),
                textpipe::numericalize(s, tgt_vocab, false),
            )
            .map_err(|_| Error::Alignment {
                file: "parallel corpus".into(),
                line: i + 1,
                msg: "empty sentence".into(),
            })
        })
        .collect()
}

/// Trains the simplified→ordinary model. `model_config` and `vocabs` are
/// given in the forward orientation and swapped here.
pub fn train_reverse(
    pairs: &[SentencePair],
    config: &TrainConfig,
    model_config: &ModelConfig,
    vocabs: &VocabPair,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "no parallel pairs for the reverse model".into(),
        ));
    }
    let reversed: Vec<SentencePair> = pairs.iter().map(SentencePair::swapped).collect();
    let mut cfg = *model_config;
    std::mem::swap(&mut cfg.src_vocab_size, &mut cfg.tgt_vocab_size);
    let vocabs = VocabPair {
        src: vocabs.tgt.clone(),
        tgt: vocabs.src.clone(),
    };
    trainer::train(&reversed, config, &cfg, &vocabs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backtranslation {
    /// Kept pairs, in sample order.
    pub pairs: Vec<SentencePair>,
    /// Decoded ordinary side of each kept pair.
    pub sources: Vec<Sentence>,
    /// Sampled simplified sentence of each kept pair, verbatim.
    pub targets: Vec<Sentence>,
    pub sample_size: usize,
    pub dropped: usize,
}

/// Samples `n` simplified sentences and greedy-decodes each through the
/// reverse model. Outputs that are empty or entirely `<unk>` are dropped.
///
/// `simp_vocab` is the reverse model's source vocabulary (the forward
/// target vocabulary) and `ord_vocab` its target vocabulary.
pub fn backtranslate(
    simplified: &Corpus,
    reverse: &Checkpoint,
    simp_vocab: &Vocabulary,
    ord_vocab: &Vocabulary,
    n: usize,
    seed: u64,
    max_len: usize,
) -> Result<Backtranslation> {
    reverse.check_vocabs(simp_vocab, ord_vocab)?;
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    let sample = textpipe::sample(simplified, n, seed)?;
    let decoded: Vec<Option<(Vec<usize>, Vec<usize>)>> = sample
        .sentences()
        .par_iter()
        .map(|s| -> Result<_> {
            let tgt = textpipe::numericalize(s, simp_vocab, false);
            if tgt.is_empty() {
                return Ok(None);
            }
            let mut model = Seq2SeqStepper::new(&reverse.params, &reverse.model_config, &tgt)?;
            let hyp = decoder::greedy_decode(&mut model, max_len)?;
            let src = hyp.content_ids(textpipe::EOS).to_vec();
            if src.iter().all(|&id| id == UNK) {
                return Ok(None);
            }
            Ok(Some((src, tgt)))
        })
        .collect::<Result<_>>()?;

    let mut out = Backtranslation {
        pairs: Vec::new(),
        sources: Vec::new(),
        targets: Vec::new(),
        sample_size: sample.len(),
        dropped: 0,
    };
    for (s, d) in sample.sentences().iter().zip(decoded) {
        match d {
            Some((src, tgt)) => {
                out.sources.push(textpipe::detokenize(&src, ord_vocab));
                out.targets.push(s.clone());
                out.pairs.push(SentencePair::synthetic(src, tgt)?);
            }
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

/// Concatenates and shuffles. With no synthetic pairs the original order is
/// returned untouched.
pub fn mix(
    original: &[SentencePair],
    synthetic: &[SentencePair],
    shuffle_seed: u64,
) -> Vec<SentencePair> {
    let mut all: Vec<SentencePair> = original.iter().chain(synthetic).cloned().collect();
    if !synthetic.is_empty() {
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    }
    all
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentManifest {
    pub sample_size: usize,
    pub sample_seed: u64,
    pub shuffle_seed: u64,
    pub reverse_ckpt_hash: String,
    pub n_original: usize,
    pub n_synthetic: usize,
    pub n_dropped: usize,
    /// Unix seconds.
    pub created: u64,
}

impl AugmentManifest {
    pub fn to_text(&self) -> String {
        format!(
            "sample_size = {}\nsample_seed = {}\nshuffle_seed = {}\nreverse_ckpt_hash = {}\n\
             n_original = {}\nn_synthetic = {}\nn_dropped = {}\ncreated = {}\n",
            self.sample_size,
            self.sample_seed,
            self.shuffle_seed,
            self.reverse_ckpt_hash,
            self.n_original,
            self.n_synthetic,
            self.n_dropped,
            self.created
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("manifest line {}: expected `key = value`", i + 1))
            })?;
            fields.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("manifest is missing `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("manifest `{k}` is not an integer")))
        };
        Ok(AugmentManifest {
            sample_size: num("sample_size")? as usize,
            sample_seed: num("sample_seed")?,
            shuffle_seed: num("shuffle_seed")?,
            reverse_ckpt_hash: get("reverse_ckpt_hash")?,
            n_original: num("n_original")? as usize,
            n_synthetic: num("n_synthetic")? as usize,
            n_dropped: num("n_dropped")? as usize,
            created: num("created")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Creation time for manifests: `SOURCE_DATE_EPOCH` when set, otherwise the
/// wall clock.
pub fn creation_time() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub train_ord: PathBuf,
    pub train_simp: PathBuf,
    pub simplified: PathBuf,
    pub test_ord: PathBuf,
    pub test_refs: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    /// Forward model training; the reverse model uses `reverse_seed` instead
    /// of `train.seed` and is otherwise identical.
    pub train: TrainConfig,
    pub reverse_seed: u64,
    pub decode: DecodeConfig,
    pub sample_n: usize,
    pub sample_seed: u64,
    pub shuffle_seed: u64,
    /// Greedy length limit for back-translation.
    pub backtranslate_max_len: usize,
    pub system_name: String,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub checkpoint: Checkpoint,
    pub manifest: AugmentManifest,
    pub report: EvalReport,
    pub dataset: Vec<SentencePair>,
}

/// Output file names inside the pipeline directory.
pub mod files {
    pub const REVERSE_CKPT: &str = "reverse.ckpt";
    pub const MODEL_CKPT: &str = "model.ckpt";
    pub const MANIFEST: &str = "manifest.txt";
    pub const DATASET_ORD: &str = "dataset.ord";
    pub const DATASET_SIMP: &str = "dataset.simp";
    pub const DATASET_ORIGIN: &str = "dataset.origin";
    pub const SYNTHETIC_ORD: &str = "synthetic.ord";
    pub const SYNTHETIC_SIMP: &str = "synthetic.simp";
    pub const TEST_OUTPUT: &str = "test.out";
    pub const REPORT_TABLE: &str = "report.txt";
    pub const REPORT_KV: &str = "report.kv";
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn lines<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| format!("{x}\n")).collect()
}

/// reverse training → back-translation → mixing → forward training →
/// test-set decoding and scoring. Every artifact is written under `out_dir`.
/// With `sample_n == 0` the reverse stages are skipped and the forward model
/// is exactly the parallel-only baseline.
pub fn run_pipeline(
    inputs: &PipelineInputs,
    config: &PipelineConfig,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    out_dir: impl AsRef<Path>,
) -> Result<PipelineOutcome> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let vocabs = VocabPair {
        src: src_vocab.fingerprint(),
        tgt: tgt_vocab.fingerprint(),
    };

    let (original, simplified) = (|| -> Result<_> {
        let (ord, simp) = textpipe::read_parallel(&inputs.train_ord, &inputs.train_simp)?;
        let original = pairs_from_corpora(&ord, &simp, src_vocab, tgt_vocab)?;
        let simplified = Corpus::read(&inputs.simplified, Side::Simplified)?;
        Ok((original, simplified))
    })()
    .map_err(|e| e.in_stage("load"))?;

    let (bt, reverse_hash) = if config.sample_n == 0 {
        let empty = Backtranslation {
            pairs: Vec::new(),
            sources: Vec::new(),
            targets: Vec::new(),
            sample_size: 0,
            dropped: 0,
        };
        (empty, "none".to_owned())
    } else {
        let reverse_cfg = TrainConfig {
            seed: config.reverse_seed,
            ..config.train
        };
        let reverse = train_reverse(&original, &reverse_cfg, &config.model, &vocabs)
            .map_err(|e| e.in_stage("train_reverse"))?
            .checkpoint;
        reverse
            .save(out.join(files::REVERSE_CKPT))
            .map_err(|e| e.in_stage("train_reverse"))?;
        let bt = backtranslate(
            &simplified,
            &reverse,
            tgt_vocab,
            src_vocab,
            config.sample_n,
            config.sample_seed,
            config.backtranslate_max_len,
        )
        .map_err(|e| e.in_stage("backtranslate"))?;
        (bt, reverse.content_hash())
    };

    let dataset = mix(&original, &bt.pairs, config.shuffle_seed);
    let manifest = AugmentManifest {
        sample_size: config.sample_n,
        sample_seed: config.sample_seed,
        shuffle_seed: config.shuffle_seed,
        reverse_ckpt_hash: reverse_hash,
        n_original: original.len(),
        n_synthetic: bt.pairs.len(),
        n_dropped: bt.dropped,
        created: creation_time(),
    };
    (|| -> Result<()> {
        write_text(&out.join(files::SYNTHETIC_ORD), &lines(&bt.sources))?;
        write_text(&out.join(files::SYNTHETIC_SIMP), &lines(&bt.targets))?;
        write_text(
            &out.join(files::DATASET_ORD),
            &lines(
                dataset
                    .iter()
                    .map(|p| textpipe::detokenize(&p.src_ids, src_vocab)),
            ),
        )?;
        write_text(
            &out.join(files::DATASET_SIMP),
            &lines(
                dataset
                    .iter()
                    .map(|p| textpipe::detokenize(&p.tgt_ids, tgt_vocab)),
            ),
        )?;
        write_text(
            &out.join(files::DATASET_ORIGIN),
            &lines(dataset.iter().map(|p| p.origin())),
        )?;
        manifest.save(out.join(files::MANIFEST))
    })()
    .map_err(|e| e.in_stage("mix"))?;

    let checkpoint = trainer::train(&dataset, &config.train, &config.model, &vocabs)
        .map_err(|e| e.in_stage("train"))?
        .checkpoint;
    checkpoint
        .save(out.join(files::MODEL_CKPT))
        .map_err(|e| e.in_stage("train"))?;

    let report = (|| -> Result<EvalReport> {
        let test_out = out.join(files::TEST_OUTPUT);
        decoder::decode_corpus(
            &inputs.test_ord,
            &test_out,
            &checkpoint,
            src_vocab,
            tgt_vocab,
            &config.decode,
        )?;
        let report = evalmetrics::evaluate(
            &test_out,
            &inputs.test_ord,
            &inputs.test_refs,
            &config.system_name,
        )?;
        write_text(
            &out.join(files::REPORT_TABLE),
            &evalmetrics::render_table(std::slice::from_ref(&report)),
        )?;
        write_text(&out.join(files::REPORT_KV), &report.to_kv())?;
        Ok(report)
    })()
    .map_err(|e| e.in_stage("evaluate"))?;

    Ok(PipelineOutcome {
        checkpoint,
        manifest,
        report,
        dataset,
    })
}
