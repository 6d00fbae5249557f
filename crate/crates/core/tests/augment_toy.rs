mod common;

use std::collections::HashSet;

use common::toy;
use nts_core::augment::{self, files, AugmentManifest, Origin, PipelineConfig, PipelineInputs};
use nts_core::decoder::{greedy_decode, DecodeConfig, Seq2SeqStepper};
use nts_core::seq2seq::ModelConfig;
use nts_core::textpipe::{build_vocab_from, numericalize, Corpus, Sentence, Side, Vocabulary, EOS};
use nts_core::trainer::{self, Checkpoint, TrainConfig, VocabPair};
use nts_core::{Error, SentencePair};

struct Fixture {
    sv: Vocabulary,
    tv: Vocabulary,
    cfg: ModelConfig,
    train: TrainConfig,
    sents: Vec<Vec<usize>>,
    pairs: Vec<SentencePair>,
}

impl Fixture {
    fn vocabs(&self) -> VocabPair {
        VocabPair {
            src: self.sv.fingerprint(),
            tgt: self.tv.fingerprint(),
        }
    }

    fn simplified_corpus(&self) -> Corpus {
        Corpus::new(
            self.sents
                .iter()
                .map(|s| Sentence::from_line(&toy::render(s, toy::simplified_word)))
                .collect(),
            Side::Simplified,
        )
    }
}

fn fixture(n: usize) -> Fixture {
    let ord: Vec<Sentence> = (0..toy::WORDS).map(|i| Sentence::new([toy::ordinary_word(i)])).collect();
    let simp: Vec<Sentence> = (0..toy::WORDS).map(|i| Sentence::new([toy::simplified_word(i)])).collect();
    let sv = build_vocab_from(ord.iter(), 100).unwrap();
    let tv = build_vocab_from(simp.iter(), 100).unwrap();
    let sents = toy::sentences(n, 3, 6, 17, &HashSet::new());
    let pairs = sents
        .iter()
        .map(|s| {
            SentencePair::original(
                numericalize(&Sentence::from_line(&toy::render(s, toy::ordinary_word)), &sv, false),
                numericalize(&Sentence::from_line(&toy::render(s, toy::simplified_word)), &tv, false),
            )
            .unwrap()
        })
        .collect();
    let cfg = ModelConfig {
        src_vocab_size: sv.len(),
        tgt_vocab_size: tv.len(),
        embed_dim: 12,
        hidden_dim: 24,
        attention_dim: 16,
        dropout_rate: 0.0,
    };
    let train = TrainConfig {
        epochs: 120,
        learning_rate: 0.5,
        decay_start_epoch: 10_000,
        dropout: 0.0,
        seed: 5,
        ..TrainConfig::default()
    };
    Fixture { sv, tv, cfg, train, sents, pairs }
}

fn reverse_model(f: &Fixture) -> Checkpoint {
    augment::train_reverse(&f.pairs, &f.train, &f.cfg, &f.vocabs()).unwrap().checkpoint
}

#[test]
fn reverse_model_learns_inverse_and_backtranslation_recovers_sources() {
    let f = fixture(20);
    let rev = reverse_model(&f);
    let mut exact = 0;
    for p in &f.pairs {
        let mut m = Seq2SeqStepper::new(&rev.params, &rev.model_config, &p.tgt_ids).unwrap();
        if greedy_decode(&mut m, 20).unwrap().content_ids(EOS) == p.src_ids.as_slice() {
            exact += 1;
        }
    }
    assert_eq!(exact, f.pairs.len());

    let corpus = f.simplified_corpus();
    let bt = augment::backtranslate(&corpus, &rev, &f.tv, &f.sv, corpus.len(), 9, 20).unwrap();
    assert_eq!(bt.pairs.len() + bt.dropped, corpus.len());
    assert_eq!(bt.sample_size, corpus.len());
    let truth: HashSet<(Vec<usize>, Vec<usize>)> =
        f.pairs.iter().map(|p| (p.src_ids.clone(), p.tgt_ids.clone())).collect();
    let recovered = bt
        .pairs
        .iter()
        .filter(|p| truth.contains(&(p.src_ids.clone(), p.tgt_ids.clone())))
        .count();
    assert!(recovered * 100 >= 95 * corpus.len(), "{recovered}/{}", corpus.len());
}

#[test]
fn backtranslation_accounting_and_target_purity() {
    let f = fixture(12);
    let mut short = f.train;
    short.epochs = 3;
    let rev = augment::train_reverse(&f.pairs, &short, &f.cfg, &f.vocabs()).unwrap().checkpoint;
    let corpus = f.simplified_corpus();
    let real: HashSet<String> = corpus.sentences().iter().map(|s| s.to_string()).collect();
    for n in [0, 1, 5, 12] {
        let bt = augment::backtranslate(&corpus, &rev, &f.tv, &f.sv, n, 3, 15).unwrap();
        assert_eq!(bt.pairs.len(), n - bt.dropped);
        assert_eq!(bt.sources.len(), bt.pairs.len());
        for (p, t) in bt.pairs.iter().zip(&bt.targets) {
            assert_eq!(p.origin(), Origin::Synthetic);
            assert!(real.contains(&t.to_string()));
            assert_eq!(p.tgt_ids, numericalize(t, &f.tv, false));
        }
        let again = augment::backtranslate(&corpus, &rev, &f.tv, &f.sv, n, 3, 15).unwrap();
        assert_eq!(again, bt);
    }
    assert!(matches!(
        augment::backtranslate(&corpus, &rev, &f.tv, &f.sv, 13, 3, 15),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        augment::backtranslate(&corpus, &rev, &f.sv, &f.tv, 2, 3, 15),
        Err(Error::VocabMismatch(_))
    ));
}

#[test]
fn reverse_training_is_deterministic() {
    let f = fixture(6);
    let mut short = f.train;
    short.epochs = 4;
    let a = augment::train_reverse(&f.pairs, &short, &f.cfg, &f.vocabs()).unwrap();
    let b = augment::train_reverse(&f.pairs, &short, &f.cfg, &f.vocabs()).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

fn pipeline_inputs(dir: &std::path::Path) -> PipelineInputs {
    let split = toy::splits(8, 4, 10, 23);
    let p = |name: &str| dir.join(name);
    toy::write_side(&p("train.ord"), &split.train, toy::ordinary_word);
    toy::write_side(&p("train.simp"), &split.train, toy::simplified_word);
    toy::write_side(&p("mono.simp"), &split.mono, toy::simplified_word);
    toy::write_side(&p("test.ord"), &split.test, toy::ordinary_word);
    toy::write_side(&p("test.simp"), &split.test, toy::simplified_word);
    PipelineInputs {
        train_ord: p("train.ord"),
        train_simp: p("train.simp"),
        simplified: p("mono.simp"),
        test_ord: p("test.ord"),
        test_refs: vec![p("test.simp")],
    }
}

fn pipeline_config(f: &Fixture, sample_n: usize) -> PipelineConfig {
    PipelineConfig {
        model: f.cfg,
        train: TrainConfig {
            epochs: 40,
            ..f.train
        },
        reverse_seed: 77,
        decode: DecodeConfig {
            beam_size: 2,
            max_len: 12,
            ..DecodeConfig::default()
        },
        sample_n,
        sample_seed: 8,
        shuffle_seed: 9,
        backtranslate_max_len: 12,
        system_name: "toy".into(),
    }
}

#[test]
fn pipeline_without_samples_is_the_baseline() {
    let f = fixture(1);
    let dir = tempfile::tempdir().unwrap();
    let inputs = pipeline_inputs(dir.path());
    let out = dir.path().join("run");
    let outcome = augment::run_pipeline(&inputs, &pipeline_config(&f, 0), &f.sv, &f.tv, &out).unwrap();
    assert_eq!(outcome.manifest.n_synthetic, 0);
    assert_eq!(outcome.manifest.reverse_ckpt_hash, "none");

    let (ord, simp) = nts_core::textpipe::read_parallel(&inputs.train_ord, &inputs.train_simp).unwrap();
    let original = augment::pairs_from_corpora(&ord, &simp, &f.sv, &f.tv).unwrap();
    let cfg = pipeline_config(&f, 0);
    let baseline = trainer::train(&original, &cfg.train, &f.cfg, &f.vocabs()).unwrap().checkpoint;
    let saved = std::fs::read(out.join(files::MODEL_CKPT)).unwrap();
    assert_eq!(saved, baseline.to_bytes());
}

#[test]
fn pipeline_manifest_matches_emitted_files() {
    let f = fixture(1);
    let dir = tempfile::tempdir().unwrap();
    let inputs = pipeline_inputs(dir.path());
    let out = dir.path().join("run");
    let outcome = augment::run_pipeline(&inputs, &pipeline_config(&f, 10), &f.sv, &f.tv, &out).unwrap();
    let m = AugmentManifest::load(out.join(files::MANIFEST)).unwrap();
    assert_eq!(m, outcome.manifest);
    let origins: Vec<Origin> = std::fs::read_to_string(out.join(files::DATASET_ORIGIN))
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    let count = |o| origins.iter().filter(|&&x| x == o).count();
    assert_eq!(count(Origin::Original), m.n_original);
    assert_eq!(count(Origin::Synthetic), m.n_synthetic);
    assert_eq!(origins.len(), m.n_original + m.n_synthetic);
    assert_eq!(m.n_synthetic + m.n_dropped, m.sample_size);
    let lines = |name: &str| std::fs::read_to_string(out.join(name)).unwrap().lines().count();
    assert_eq!(lines(files::DATASET_ORD), origins.len());
    assert_eq!(lines(files::DATASET_SIMP), origins.len());
    assert_eq!(lines(files::SYNTHETIC_ORD), m.n_synthetic);
    assert_eq!(m.reverse_ckpt_hash, Checkpoint::load(out.join(files::REVERSE_CKPT)).unwrap().content_hash());
    assert_eq!(outcome.dataset.len(), origins.len());
    assert_eq!(outcome.report.sentence_count, 4);
}

#[test]
fn pipeline_errors_name_their_stage() {
    let f = fixture(1);
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = pipeline_inputs(dir.path());
    inputs.simplified = dir.path().join("missing.simp");
    let err = augment::run_pipeline(&inputs, &pipeline_config(&f, 2), &f.sv, &f.tv, dir.path().join("o")).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "load", .. }), "{err}");
    let inputs = pipeline_inputs(dir.path());
    let err = augment::run_pipeline(&inputs, &pipeline_config(&f, 11), &f.sv, &f.tv, dir.path().join("o")).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "backtranslate", .. }), "{err}");
}
