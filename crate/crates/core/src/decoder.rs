//! Inference: greedy decoding, beam search, attention-based UNK replacement
//! and whole-file translation.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::seq2seq::{self, Annotations, ModelConfig, ModelParams, ParamVars};
use crate::textpipe::{self, Sentence, Vocabulary, BOS, EOS, PAD, UNK};
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub length_norm: bool,
    /// Plain argmax decoding; `beam_size` and `length_norm` are ignored.
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_len: 50,
            length_norm: true,
            greedy: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument(
                "beam_size and max_len must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A partial or complete output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids, excluding the leading `<s>`; ends with `</s>` when finished.
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub state: Vec<f64>,
    /// Attention weights over the source, one vector per emitted id.
    pub attn_trace: Vec<Vec<f64>>,
    pub finished: bool,
}

impl Hypothesis {
    fn root(state: Vec<f64>) -> Self {
        Hypothesis {
            ids: Vec::new(),
            log_prob: 0.0,
            state,
            attn_trace: Vec::new(),
            finished: false,
        }
    }

    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm && !self.ids.is_empty() {
            self.log_prob / self.ids.len() as f64
        } else {
            self.log_prob
        }
    }

    /// Emitted ids without the closing `</s>`.
    pub fn content_ids(&self, eos: usize) -> &[usize] {
        match self.ids.split_last() {
            Some((&last, rest)) if self.finished && last == eos => rest,
            _ => &self.ids,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    pub state: Vec<f64>,
    pub attention: Vec<f64>,
}

/// A conditional next-token distribution that the search routines drive.
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    fn start_state(&mut self) -> Result<Vec<f64>>;

    fn step(&mut self, state: &[f64], y_prev: usize) -> Result<StepOutput>;

    fn bos(&self) -> usize {
        BOS
    }

    fn eos(&self) -> usize {
        EOS
    }

    /// Ids the search may emit.
    fn emittable(&self, id: usize) -> bool {
        id != PAD && id != BOS
    }
}

/// [`StepModel`] over a trained encoder-decoder for one source sentence.
pub struct Seq2SeqStepper<'a> {
    graph: Graph<'a>,
    pv: ParamVars,
    cfg: ModelConfig,
    ann: Annotations,
    base_len: usize,
}

impl<'a> Seq2SeqStepper<'a> {
    pub fn new(params: &'a ModelParams, cfg: &ModelConfig, src_ids: &[usize]) -> Result<Self> {
        let mut graph = Graph::new();
        let pv = ParamVars::register(&mut graph, params);
        let ann = seq2seq::encode(&mut graph, &pv, cfg, src_ids, false, 0)?;
        let base_len = graph.len();
        Ok(Seq2SeqStepper {
            graph,
            pv,
            cfg: *cfg,
            ann,
            base_len,
        })
    }
}

impl StepModel for Seq2SeqStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.cfg.tgt_vocab_size
    }

    fn start_state(&mut self) -> Result<Vec<f64>> {
        let s0 = seq2seq::initial_state(&mut self.graph, &self.ann, &self.pv)?;
        let out = self.graph.value(s0).to_vec();
        self.graph.truncate(self.base_len);
        Ok(out)
    }

    fn step(&mut self, state: &[f64], y_prev: usize) -> Result<StepOutput> {
        let s = self.graph.constant(state.to_vec());
        let step = seq2seq::decode_step(
            &mut self.graph,
            &self.pv,
            &self.cfg,
            y_prev,
            s,
            &self.ann,
            false,
            0,
        )?;
        let out = StepOutput {
            probs: self.graph.value(step.probs).to_vec(),
            state: self.graph.value(step.state).to_vec(),
            attention: self.graph.value(step.weights).to_vec(),
        };
        self.graph.truncate(self.base_len);
        Ok(out)
    }
}

/// Argmax decoding; ties go to the lowest id.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis::root(model.start_state()?);
    let mut y_prev = model.bos();
    while hyp.ids.len() < max_len {
        let out = model.step(&hyp.state, y_prev)?;
        let mut best: Option<(usize, f64)> = None;
        for (id, &p) in out.probs.iter().enumerate() {
            if model.emittable(id) && best.is_none_or(|(_, bp)| p > bp) {
                best = Some((id, p));
            }
        }
        let (id, p) = best.ok_or_else(|| Error::InvalidArgument("no emittable token".into()))?;
        hyp.ids.push(id);
        hyp.log_prob += p.ln();
        hyp.state = out.state;
        hyp.attn_trace.push(out.attention);
        y_prev = id;
        if id == model.eos() {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Orders hypotheses best first: higher score, then the lexicographically
/// smaller id sequence.
fn rank(a: &Hypothesis, b: &Hypothesis, length_norm: bool) -> Ordering {
    b.score(length_norm)
        .total_cmp(&a.score(length_norm))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search. Every live hypothesis is expanded over the full vocabulary
/// and the best `beam_size - completed` candidates survive; hypotheses that
/// emit `</s>` leave the beam for the completed pool. Returns every completed
/// hypothesis (plus those still live at `max_len`), best first.
pub fn beam_search<M: StepModel>(model: &mut M, config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let eos = model.eos();
    let mut live = vec![Hypothesis::root(model.start_state()?)];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for _ in 0..config.max_len {
        let width = config.beam_size.saturating_sub(completed.len());
        if width == 0 || live.is_empty() {
            break;
        }
        let mut outputs = Vec::with_capacity(live.len());
        for hyp in &live {
            let y_prev = hyp.ids.last().copied().unwrap_or(model.bos());
            outputs.push(model.step(&hyp.state, y_prev)?);
        }
        // (parent, id, cumulative log-prob)
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (h, out) in outputs.iter().enumerate() {
            for (id, &p) in out.probs.iter().enumerate() {
                if model.emittable(id) {
                    candidates.push((h, id, live[h].log_prob + p.ln()));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| live[a.0].ids.cmp(&live[b.0].ids))
                .then_with(|| a.1.cmp(&b.1))
        });
        candidates.truncate(width);

        let mut next = Vec::with_capacity(candidates.len());
        for (h, id, log_prob) in candidates {
            let parent = &live[h];
            let mut ids = parent.ids.clone();
            ids.push(id);
            let mut attn_trace = parent.attn_trace.clone();
            attn_trace.push(outputs[h].attention.clone());
            let hyp = Hypothesis {
                ids,
                log_prob,
                state: outputs[h].state.clone(),
                attn_trace,
                finished: id == eos,
            };
            if hyp.finished {
                completed.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    completed.extend(live);
    completed.sort_by(|a, b| rank(a, b, config.length_norm));
    Ok(completed)
}

pub fn beam_decode<M: StepModel>(model: &mut M, config: &DecodeConfig) -> Result<Hypothesis> {
    beam_search(model, config)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))
}

/// Greedy or beam decoding as selected by `config.greedy`.
pub fn decode<M: StepModel>(model: &mut M, config: &DecodeConfig) -> Result<Hypothesis> {
    if config.greedy {
        config.validate()?;
        greedy_decode(model, config.max_len)
    } else {
        beam_decode(model, config)
    }
}

/// Maps output ids to tokens, replacing each `<unk>` with the source token
/// that received the most attention at that step (lowest index on ties).
/// The closing `</s>` is dropped.
pub fn replace_unk(hyp: &Hypothesis, src_tokens: &Sentence, tgt_vocab: &Vocabulary) -> Sentence {
    let ids = hyp.content_ids(EOS);
    let tokens = ids.iter().enumerate().map(|(t, &id)| {
        if id == UNK {
            let src = hyp.attn_trace.get(t).and_then(|a| {
                let mut best: Option<(usize, f64)> = None;
                for (j, &w) in a.iter().enumerate() {
                    if best.is_none_or(|(_, bw)| w > bw) {
                        best = Some((j, w));
                    }
                }
                best.and_then(|(j, _)| src_tokens.tokens().get(j))
            });
            if let Some(tok) = src {
                return tok.clone();
            }
        }
        tgt_vocab
            .token(id)
            .unwrap_or(textpipe::SPECIAL_TOKENS[UNK])
            .to_owned()
    });
    Sentence::new(tokens.collect::<Vec<_>>())
}

/// Decodes one tokenized source sentence into target tokens.
pub fn translate(
    params: &ModelParams,
    cfg: &ModelConfig,
    src: &Sentence,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    config: &DecodeConfig,
) -> Result<Sentence> {
    if src.is_empty() {
        return Ok(Sentence::default());
    }
    let ids = textpipe::numericalize(src, src_vocab, false);
    let mut model = Seq2SeqStepper::new(params, cfg, &ids)?;
    let hyp = decode(&mut model, config)?;
    Ok(replace_unk(&hyp, src, tgt_vocab))
}

/// Translates `src_path` line by line into `out_path`. Blank input lines
/// produce blank output lines. Returns the number of lines written.
pub fn decode_corpus(
    src_path: impl AsRef<Path>,
    out_path: impl AsRef<Path>,
    checkpoint: &Checkpoint,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    config: &DecodeConfig,
) -> Result<usize> {
    checkpoint.check_vocabs(src_vocab, tgt_vocab)?;
    config.validate()?;
    let corpus = textpipe::Corpus::read(src_path.as_ref(), textpipe::Side::Ordinary)?;
    let outputs = translate_all(checkpoint, corpus.sentences(), src_vocab, tgt_vocab, config)?;
    let out_path = out_path.as_ref();
    let mut text = String::new();
    for s in &outputs {
        text.push_str(&s.to_string());
        text.push('\n');
    }
    fs::write(out_path, text).map_err(|e| Error::io(out_path, e))?;
    Ok(outputs.len())
}

/// Translates sentences in parallel, keeping input order.
pub fn translate_all(
    checkpoint: &Checkpoint,
    sentences: &[Sentence],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    config: &DecodeConfig,
) -> Result<Vec<Sentence>> {
    sentences
        .par_iter()
        .map(|s| {
            translate(
                &checkpoint.params,
                &checkpoint.model_config,
                s,
                src_vocab,
                tgt_vocab,
                config,
            )
        })
        .collect()
}
