//! Corpus BLEU-4, Flesch-Kincaid grade level and SARI, plus the plain-text
//! report format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::textpipe::{Corpus, Sentence, Side};

pub const MAX_ORDER: usize = 4;

/// Occurrence counts of the n-grams of a single order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NGramMultiset<'s> {
    counts: HashMap<&'s [String], usize>,
}

impl<'s> NGramMultiset<'s> {
    pub fn of(tokens: &'s [String], n: usize) -> Self {
        let mut counts = HashMap::new();
        if n > 0 && tokens.len() >= n {
            for w in tokens.windows(n) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        NGramMultiset { counts }
    }

    pub fn count(&self, gram: &[String]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'s [String], usize)> + '_ {
        self.counts.iter().map(|(g, c)| (*g, *c))
    }
}

fn check_aligned(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "{what}: {a} hypotheses but {b} references"
        )));
    }
    if a == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty corpus")));
    }
    Ok(())
}

/// Corpus BLEU-4 against a single reference per hypothesis.
pub fn bleu(hypotheses: &[Sentence], references: &[Sentence]) -> Result<f64> {
    check_aligned("bleu", hypotheses.len(), references.len())?;
    let refs: Vec<Vec<Sentence>> = references.iter().map(|r| vec![r.clone()]).collect();
    bleu_multi(hypotheses, &refs)
}

/// Corpus BLEU-4 with any number of references per hypothesis. Clipping uses
/// the per-reference maximum count; the reference length is the one closest
/// to the hypothesis length (shorter on ties). Uniform weights, no smoothing.
pub fn bleu_multi(hypotheses: &[Sentence], references: &[Vec<Sentence>]) -> Result<f64> {
    check_aligned("bleu", hypotheses.len(), references.len())?;
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (i, (hyp, refs)) in hypotheses.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "bleu: sentence {} has no reference",
                i + 1
            )));
        }
        let c = hyp.len();
        hyp_len += c;
        ref_len += refs
            .iter()
            .map(Sentence::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for n in 1..=MAX_ORDER {
            let h = NGramMultiset::of(hyp.tokens(), n);
            let rs: Vec<NGramMultiset> = refs
                .iter()
                .map(|r| NGramMultiset::of(r.tokens(), n))
                .collect();
            for (gram, count) in h.iter() {
                let max_ref = rs.iter().map(|r| r.count(gram)).max().unwrap_or(0);
                matches[n - 1] += count.min(max_ref);
            }
            totals[n - 1] += h.total();
        }
    }
    if hyp_len == 0 || matches.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0);
    Ok(100.0 * bp * log_precision.exp())
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y')
}

/// Vowel-group syllable estimate. Returns 0 for tokens that are not purely
/// alphabetic once leading and trailing non-letters are stripped; such tokens
/// do not count as words.
pub fn count_syllables(word: &str) -> usize {
    let lower = word.to_lowercase();
    let core = lower.trim_matches(|c: char| !c.is_alphabetic());
    if core.is_empty() || !core.chars().all(char::is_alphabetic) {
        return 0;
    }
    let chars: Vec<char> = core.chars().collect();
    let mut groups = 0;
    let mut in_group = false;
    for &c in &chars {
        let v = is_vowel(c);
        if v && !in_group {
            groups += 1;
        }
        in_group = v;
    }
    // silent final e, as in "there" or "made"
    let n = chars.len();
    if groups > 1 && n >= 2 && chars[n - 1] == 'e' && !is_vowel(chars[n - 2]) {
        groups -= 1;
    }
    groups.max(1)
}

/// `0.39 · words/sentences + 11.8 · syllables/words − 15.59` over the whole
/// list.
pub fn fkgl(sentences: &[Sentence]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("fkgl: no sentences".into()));
    }
    let (mut words, mut syllables) = (0usize, 0usize);
    for s in sentences {
        for tok in s.tokens() {
            let n = count_syllables(tok);
            if n > 0 {
                words += 1;
                syllables += n;
            }
        }
    }
    if words == 0 {
        return Err(Error::InvalidArgument("fkgl: no word tokens".into()));
    }
    let words = words as f64;
    Ok(0.39 * (words / sentences.len() as f64) + 11.8 * (syllables as f64 / words) - 15.59)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Operation scores of one n-gram order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SariOrder {
    pub add_f1: f64,
    pub keep_f1: f64,
    pub del_precision: f64,
}

/// ADD/KEEP/DEL scores of one order for one sentence. Reference counts are
/// averaged over the references.
pub fn sari_order(
    source: &Sentence,
    output: &Sentence,
    references: &[Sentence],
    n: usize,
) -> SariOrder {
    let s = NGramMultiset::of(source.tokens(), n);
    let o = NGramMultiset::of(output.tokens(), n);
    let mut r: HashMap<&[String], f64> = HashMap::new();
    let weight = 1.0 / references.len() as f64;
    for reference in references {
        for w in reference
            .tokens()
            .windows(n.max(1))
            .filter(|_| reference.len() >= n)
        {
            *r.entry(w).or_insert(0.0) += weight;
        }
    }
    let rc = |g: &[String]| r.get(g).copied().unwrap_or(0.0);

    let mut grams: Vec<&[String]> = s
        .counts
        .keys()
        .chain(o.counts.keys())
        .chain(r.keys())
        .copied()
        .collect();
    grams.sort_unstable();
    grams.dedup();

    let (mut add_num, mut add_out, mut add_ref) = (0.0, 0.0, 0.0);
    let (mut keep_num, mut keep_out, mut keep_ref) = (0.0, 0.0, 0.0);
    let (mut del_num, mut del_out) = (0.0, 0.0);
    for g in grams {
        let (sc, oc, rv) = (s.count(g) as f64, o.count(g) as f64, rc(g));

        let added = (oc - sc).max(0.0);
        let should_add = (rv - sc).max(0.0);
        add_num += added.min(should_add);
        add_out += added;
        add_ref += should_add;

        let kept = sc.min(oc);
        let should_keep = sc.min(rv);
        keep_num += kept.min(should_keep);
        keep_out += kept;
        keep_ref += should_keep;

        let deleted = (sc - oc).max(0.0);
        let should_delete = (sc - rv).max(0.0);
        del_num += deleted.min(should_delete);
        del_out += deleted;
    }
    SariOrder {
        add_f1: f1(ratio(add_num, add_out), ratio(add_num, add_ref)),
        keep_f1: f1(ratio(keep_num, keep_out), ratio(keep_num, keep_ref)),
        del_precision: ratio(del_num, del_out),
    }
}

/// Sentence-level SARI on a 0–1 scale.
pub fn sari_sentence(source: &Sentence, output: &Sentence, references: &[Sentence]) -> f64 {
    (1..=MAX_ORDER)
        .map(|n| {
            let o = sari_order(source, output, references, n);
            (o.add_f1 + o.keep_f1 + o.del_precision) / 3.0
        })
        .sum::<f64>()
        / MAX_ORDER as f64
}

/// Corpus SARI (0–100): the mean of sentence scores.
pub fn sari(
    sources: &[Sentence],
    hypotheses: &[Sentence],
    references: &[Vec<Sentence>],
) -> Result<f64> {
    check_aligned("sari", hypotheses.len(), references.len())?;
    check_aligned("sari", sources.len(), hypotheses.len())?;
    let mut total = 0.0;
    for (i, ((src, hyp), refs)) in sources.iter().zip(hypotheses).zip(references).enumerate() {
        if refs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sari: sentence {} has no reference",
                i + 1
            )));
        }
        total += sari_sentence(src, hyp, refs);
    }
    Ok(100.0 * total / sources.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub system_name: String,
    pub bleu: f64,
    pub fkgl: f64,
    pub sari: f64,
    pub sentence_count: usize,
}

impl EvalReport {
    /// `key=value` lines, scores to two decimals.
    pub fn to_kv(&self) -> String {
        format!(
            "system={}\nbleu={:.2}\nfkgl={:.2}\nsari={:.2}\nsentences={}\n",
            self.system_name, self.bleu, self.fkgl, self.sari, self.sentence_count
        )
    }
}

/// Aligned text table, one row per system.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.system_name.len())
        .chain(std::iter::once("System".len()))
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}",
        "System", "BLEU", "FKGL", "SARI"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}",
            r.system_name, r.bleu, r.fkgl, r.sari
        );
    }
    out
}

fn read_lines(path: &Path) -> Result<Vec<Sentence>> {
    Ok(Corpus::read(path, Side::Simplified)?.into_sentences())
}

fn misaligned(path: &Path, expected: usize, found: usize) -> Error {
    Error::Alignment {
        file: path.display().to_string(),
        line: expected.min(found) + 1,
        msg: format!("expected {expected} lines, found {found}"),
    }
}

/// Scores a system output file against its sources and one or more
/// reference files (`ref.0 … ref.k`, aligned line by line).
pub fn evaluate(
    outputs: impl AsRef<Path>,
    sources: impl AsRef<Path>,
    references: &[impl AsRef<Path>],
    name: &str,
) -> Result<EvalReport> {
    let outputs_path = outputs.as_ref();
    let hyps = read_lines(outputs_path)?;
    let srcs = read_lines(sources.as_ref())?;
    if srcs.len() != hyps.len() {
        return Err(misaligned(sources.as_ref(), hyps.len(), srcs.len()));
    }
    if references.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluate: no reference files".into(),
        ));
    }
    let mut refs: Vec<Vec<Sentence>> = vec![Vec::with_capacity(references.len()); hyps.len()];
    for path in references {
        let lines = read_lines(path.as_ref())?;
        if lines.len() != hyps.len() {
            return Err(misaligned(path.as_ref(), hyps.len(), lines.len()));
        }
        for (slot, line) in refs.iter_mut().zip(lines) {
            slot.push(line);
        }
    }
    evaluate_sentences(&srcs, &hyps, &refs, name)
}

pub fn evaluate_sentences(
    sources: &[Sentence],
    hypotheses: &[Sentence],
    references: &[Vec<Sentence>],
    name: &str,
) -> Result<EvalReport> {
    Ok(EvalReport {
        system_name: name.to_owned(),
        bleu: bleu_multi(hypotheses, references)?,
        fkgl: fkgl(hypotheses)?,
        sari: sari(sources, hypotheses, references)?,
        sentence_count: hypotheses.len(),
    })
}
