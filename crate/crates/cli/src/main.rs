mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nts_core::augment::{self, AugmentManifest, PipelineConfig, PipelineInputs};
use nts_core::decoder;
use nts_core::evalmetrics;
use nts_core::textpipe::{self, Corpus, Side, Vocabulary};
use nts_core::trainer::{self, Checkpoint, VocabPair};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "nts", version, about = "Neural text simplification with back-translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed from which every stage seed is derived.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
struct TextpipeFlags {
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct VocabSizeFlag {
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct ModelFlags {
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    attention_dim: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_start_epoch: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    shuffle: Option<bool>,
}

#[derive(Args, Debug, Clone, Default)]
struct DecodeFlags {
    #[arg(long, visible_alias = "beam")]
    beam_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    length_norm: Option<bool>,
    /// Argmax decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct AugmentFlags {
    #[arg(long)]
    sample_n: Option<usize>,
    #[arg(long)]
    backtranslate_max_len: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct EvalFlags {
    #[arg(long, visible_alias = "name")]
    system_name: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split, tokenize, length-filter and deduplicate raw text; build a vocabulary.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = ["ordinary", "simplified"], default_value = "ordinary")]
        side: String,
        #[command(flatten)]
        textpipe: TextpipeFlags,
    },
    /// Train a model on parallel data (the baseline system).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: ParallelFlags,
        /// Train the simplified→ordinary direction instead.
        #[arg(long)]
        reverse: bool,
        #[command(flatten)]
        vocab: VocabSizeFlag,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Decode a tokenized file with a trained model.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src_vocab: PathBuf,
        #[arg(long)]
        tgt_vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out>/output.txt`.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Produce synthetic ordinary sentences with a reverse model.
    Backtranslate {
        #[command(flatten)]
        common: Common,
        /// Reverse (simplified→ordinary) checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// The reverse model's source vocabulary (simplified side).
        #[arg(long)]
        src_vocab: PathBuf,
        /// The reverse model's target vocabulary (ordinary side).
        #[arg(long)]
        tgt_vocab: PathBuf,
        #[arg(long)]
        simplified: PathBuf,
        #[command(flatten)]
        augment: AugmentFlags,
    },
    /// Score system outputs with BLEU, FKGL and SARI.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        sources: PathBuf,
        /// One file per reference set.
        #[arg(long, required = true, num_args = 1..)]
        refs: Vec<PathBuf>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Reverse model, back-translation, mixing, forward training and evaluation.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: ParallelFlags,
        #[arg(long)]
        test_ord: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        test_refs: Vec<PathBuf>,
        #[command(flatten)]
        vocab: VocabSizeFlag,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        decode: DecodeFlags,
        #[command(flatten)]
        augment: AugmentFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
}

#[derive(Args, Debug, Clone)]
struct ParallelFlags {
    #[arg(long)]
    train_ord: PathBuf,
    #[arg(long)]
    train_simp: PathBuf,
    /// Simplified-only corpus. Its words join the target vocabulary, so
    /// baseline and augmented runs share vocabularies.
    #[arg(long)]
    simplified: Option<PathBuf>,
    /// Use existing vocabularies instead of building them.
    #[arg(long, requires = "tgt_vocab")]
    src_vocab: Option<PathBuf>,
    #[arg(long, requires = "src_vocab")]
    tgt_vocab: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        set(&mut cfg.seed, self.seed);
        Ok(cfg)
    }
}

impl TextpipeFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.textpipe.min_len, self.min_len);
        set(&mut cfg.textpipe.max_len, self.max_len);
        set(&mut cfg.textpipe.vocab_size, self.vocab_size);
    }
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.model.embed_dim, self.embed_dim);
        set(&mut cfg.model.hidden_dim, self.hidden_dim);
        set(&mut cfg.model.attention_dim, self.attention_dim);
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.epochs, self.epochs);
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.lr_decay, self.lr_decay);
        set(&mut t.decay_start_epoch, self.decay_start_epoch);
        set(&mut t.clip_norm, self.clip_norm);
        set(&mut t.dropout, self.dropout);
        set(&mut t.shuffle, self.shuffle);
    }
}

impl DecodeFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.decode.beam_size, self.beam_size);
        set(&mut cfg.decode.max_len, self.max_len);
        set(&mut cfg.decode.length_norm, self.length_norm);
        if self.greedy {
            cfg.decode.greedy = true;
        }
    }
}

impl AugmentFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.sample_n.is_some() {
            cfg.augment.sample_n = self.sample_n;
        }
        if self.backtranslate_max_len.is_some() {
            cfg.augment.backtranslate_max_len = self.backtranslate_max_len;
        }
    }
}

impl EvalFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.eval.system_name, self.system_name.clone());
    }
}

/// Writes `<out>/run.log`: the command line and derived seeds as comments,
/// then the resolved configuration, which `--config` accepts as is.
fn write_run_log(out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut text = String::new();
    let argv: Vec<String> = std::env::args().collect();
    let _ = writeln!(text, "# command: {}", argv.join(" "));
    let s = cfg.seeds();
    let _ = writeln!(
        text,
        "# seeds: train={} reverse={} sample={} mix={}",
        s.train, s.reverse, s.sample, s.mix
    );
    text.push_str(&cfg.to_toml());
    let path = out.join("run.log");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("resolved config (seed {}):\n{}", cfg.seed, cfg.to_toml());
    Ok(())
}

fn prepare(common: &Common, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))?;
    write_run_log(&common.out, cfg)
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::load(path)?)
}

/// Loads the given vocabularies or builds them from the training files.
fn vocabularies(data: &ParallelFlags, vocab_size: usize) -> Result<(Vocabulary, Vocabulary)> {
    if let (Some(s), Some(t)) = (&data.src_vocab, &data.tgt_vocab) {
        return Ok((load_vocab(s)?, load_vocab(t)?));
    }
    let (ord, simp) = textpipe::read_parallel(&data.train_ord, &data.train_simp)?;
    let mono = match &data.simplified {
        Some(p) => Corpus::read(p, Side::Simplified)?,
        None => Corpus::new(Vec::new(), Side::Simplified),
    };
    let src = textpipe::build_vocab(&ord, vocab_size)?;
    let tgt = textpipe::build_vocab_from(simp.sentences().iter().chain(mono.sentences()), vocab_size)?;
    Ok((src, tgt))
}

fn cmd_preprocess(common: &Common, input: &Path, side: &str, flags: &TextpipeFlags) -> Result<()> {
    let mut cfg = common.resolve()?;
    flags.apply(&mut cfg);
    prepare(common, &cfg)?;
    let side = if side == "simplified" { Side::Simplified } else { Side::Ordinary };
    let raw = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let tp = &cfg.textpipe;
    let (corpus, vocab, stats) = textpipe::preprocess(&raw, side, tp.min_len, tp.max_len, tp.vocab_size)?;
    corpus.write(common.out.join("corpus.txt"))?;
    vocab.save(common.out.join("vocab.txt"))?;
    println!("sentences_in = {}", stats.sentences_in);
    println!("after_length_filter = {}", stats.after_length_filter);
    println!("sentences_out = {}", stats.sentences_out);
    println!("vocab_size = {}", stats.vocab_size);
    Ok(())
}

fn cmd_train(
    common: &Common,
    data: &ParallelFlags,
    reverse: bool,
    vocab: &VocabSizeFlag,
    model: &ModelFlags,
    train: &TrainFlags,
) -> Result<()> {
    let mut cfg = common.resolve()?;
    set(&mut cfg.textpipe.vocab_size, vocab.vocab_size);
    model.apply(&mut cfg);
    train.apply(&mut cfg);
    prepare(common, &cfg)?;
    let (src_vocab, tgt_vocab) = vocabularies(data, cfg.textpipe.vocab_size)?;
    let (ord, simp) = textpipe::read_parallel(&data.train_ord, &data.train_simp)?;
    let pairs = augment::pairs_from_corpora(&ord, &simp, &src_vocab, &tgt_vocab)?;
    let model_cfg = cfg.model_config(src_vocab.len(), tgt_vocab.len());
    let fingerprints = VocabPair {
        src: src_vocab.fingerprint(),
        tgt: tgt_vocab.fingerprint(),
    };
    let seeds = cfg.seeds();
    let (outcome, model_src, model_tgt) = if reverse {
        let tc = cfg.train_config(seeds.reverse);
        let o = augment::train_reverse(&pairs, &tc, &model_cfg, &fingerprints)?;
        (o, &tgt_vocab, &src_vocab)
    } else {
        let o = trainer::train(&pairs, &cfg.train_config(seeds.train), &model_cfg, &fingerprints)?;
        (o, &src_vocab, &tgt_vocab)
    };
    outcome.checkpoint.save(common.out.join("model.ckpt"))?;
    model_src.save(common.out.join("src.vocab"))?;
    model_tgt.save(common.out.join("tgt.vocab"))?;
    println!(
        "trained {} pairs for {} epochs, final loss {:.6}",
        pairs.len(),
        cfg.train.epochs,
        outcome.checkpoint.meta.final_loss
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_translate(
    common: &Common,
    checkpoint: &Path,
    src_vocab: &Path,
    tgt_vocab: &Path,
    input: &Path,
    output: Option<&Path>,
    decode: &DecodeFlags,
) -> Result<()> {
    let mut cfg = common.resolve()?;
    decode.apply(&mut cfg);
    prepare(common, &cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let out_path = output.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("output.txt"));
    let n = decoder::decode_corpus(
        input,
        &out_path,
        &ckpt,
        &load_vocab(src_vocab)?,
        &load_vocab(tgt_vocab)?,
        &cfg.decode,
    )?;
    println!("translated {n} lines into {}", out_path.display());
    Ok(())
}

fn required_sample_n(cfg: &RunConfig) -> Result<usize> {
    match cfg.augment.sample_n {
        Some(n) => Ok(n),
        None => bail!("augment.sample_n is required (set it in the config or pass --sample-n)"),
    }
}

fn cmd_backtranslate(
    common: &Common,
    checkpoint: &Path,
    src_vocab: &Path,
    tgt_vocab: &Path,
    simplified: &Path,
    flags: &AugmentFlags,
) -> Result<()> {
    let mut cfg = common.resolve()?;
    flags.apply(&mut cfg);
    let n = required_sample_n(&cfg)?;
    prepare(common, &cfg)?;
    let reverse = Checkpoint::load(checkpoint)?;
    let corpus = Corpus::read(simplified, Side::Simplified)?;
    let seeds = cfg.seeds();
    let max_len = cfg.augment.backtranslate_max_len.unwrap_or(cfg.decode.max_len);
    let bt = augment::backtranslate(
        &corpus,
        &reverse,
        &load_vocab(src_vocab)?,
        &load_vocab(tgt_vocab)?,
        n,
        seeds.sample,
        max_len,
    )?;
    let lines = |items: &[textpipe::Sentence]| -> String { items.iter().map(|s| format!("{s}\n")).collect() };
    let write = |name: &str, text: String| -> Result<()> {
        let path = common.out.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    write(augment::files::SYNTHETIC_ORD, lines(&bt.sources))?;
    write(augment::files::SYNTHETIC_SIMP, lines(&bt.targets))?;
    write("synthetic.origin", bt.pairs.iter().map(|p| format!("{}\n", p.origin())).collect())?;
    let manifest = AugmentManifest {
        sample_size: n,
        sample_seed: seeds.sample,
        shuffle_seed: seeds.mix,
        reverse_ckpt_hash: reverse.content_hash(),
        n_original: 0,
        n_synthetic: bt.pairs.len(),
        n_dropped: bt.dropped,
        created: augment::creation_time(),
    };
    manifest.save(common.out.join(augment::files::MANIFEST))?;
    println!("sampled {n}, kept {}, dropped {}", bt.pairs.len(), bt.dropped);
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    outputs: &Path,
    sources: &Path,
    refs: &[PathBuf],
    flags: &EvalFlags,
) -> Result<()> {
    let mut cfg = common.resolve()?;
    flags.apply(&mut cfg);
    prepare(common, &cfg)?;
    let report = evalmetrics::evaluate(outputs, sources, refs, &cfg.eval.system_name)?;
    let table = evalmetrics::render_table(std::slice::from_ref(&report));
    fs::write(common.out.join(augment::files::REPORT_TABLE), &table)?;
    fs::write(common.out.join(augment::files::REPORT_KV), report.to_kv())?;
    print!("{table}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pipeline(
    common: &Common,
    data: &ParallelFlags,
    test_ord: &Path,
    test_refs: &[PathBuf],
    vocab: &VocabSizeFlag,
    model: &ModelFlags,
    train: &TrainFlags,
    decode: &DecodeFlags,
    augment_flags: &AugmentFlags,
    eval: &EvalFlags,
) -> Result<()> {
    let mut cfg = common.resolve()?;
    set(&mut cfg.textpipe.vocab_size, vocab.vocab_size);
    model.apply(&mut cfg);
    train.apply(&mut cfg);
    decode.apply(&mut cfg);
    augment_flags.apply(&mut cfg);
    eval.apply(&mut cfg);
    let sample_n = required_sample_n(&cfg)?;
    let Some(simplified) = &data.simplified else {
        bail!("pipeline needs --simplified");
    };
    prepare(common, &cfg)?;
    let (src_vocab, tgt_vocab) = vocabularies(data, cfg.textpipe.vocab_size)?;
    src_vocab.save(common.out.join("src.vocab"))?;
    tgt_vocab.save(common.out.join("tgt.vocab"))?;
    let seeds = cfg.seeds();
    let inputs = PipelineInputs {
        train_ord: data.train_ord.clone(),
        train_simp: data.train_simp.clone(),
        simplified: simplified.clone(),
        test_ord: test_ord.to_path_buf(),
        test_refs: test_refs.to_vec(),
    };
    let pcfg = PipelineConfig {
        model: cfg.model_config(src_vocab.len(), tgt_vocab.len()),
        train: cfg.train_config(seeds.train),
        reverse_seed: seeds.reverse,
        decode: cfg.decode,
        sample_n,
        sample_seed: seeds.sample,
        shuffle_seed: seeds.mix,
        backtranslate_max_len: cfg.augment.backtranslate_max_len.unwrap_or(cfg.decode.max_len),
        system_name: cfg.eval.system_name.clone(),
    };
    let outcome = augment::run_pipeline(&inputs, &pcfg, &src_vocab, &tgt_vocab, &common.out)?;
    print!("{}", evalmetrics::render_table(std::slice::from_ref(&outcome.report)));
    println!(
        "dataset: {} original + {} synthetic ({} dropped)",
        outcome.manifest.n_original, outcome.manifest.n_synthetic, outcome.manifest.n_dropped
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess {
            common,
            input,
            side,
            textpipe,
        } => cmd_preprocess(common, input, side, textpipe),
        Command::Train {
            common,
            data,
            reverse,
            vocab,
            model,
            train,
        } => cmd_train(common, data, *reverse, vocab, model, train),
        Command::Translate {
            common,
            checkpoint,
            src_vocab,
            tgt_vocab,
            input,
            output,
            decode,
        } => cmd_translate(common, checkpoint, src_vocab, tgt_vocab, input, output.as_deref(), decode),
        Command::Backtranslate {
            common,
            checkpoint,
            src_vocab,
            tgt_vocab,
            simplified,
            augment,
        } => cmd_backtranslate(common, checkpoint, src_vocab, tgt_vocab, simplified, augment),
        Command::Evaluate {
            common,
            outputs,
            sources,
            refs,
            eval,
        } => cmd_evaluate(common, outputs, sources, refs, eval),
        Command::Pipeline {
            common,
            data,
            test_ord,
            test_refs,
            vocab,
            model,
            train,
            decode,
            augment,
            eval,
        } => cmd_pipeline(common, data, test_ord, test_refs, vocab, model, train, decode, augment, eval),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
