//! Corpus ingestion: sentence splitting, tokenization, length and duplicate
//! filters, vocabulary construction, numericalization and seeded sampling.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_SPECIALS: usize = 4;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];

pub const DEFAULT_MIN_LEN: usize = 10;
pub const DEFAULT_MAX_LEN: usize = 40;

/// Lowercased abbreviations whose trailing period never ends a sentence.
const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "st.", "jr.", "sr.", "prof.", "mt.", "ft.", "vs.", "etc.", "e.g.",
    "i.e.", "no.", "gen.", "col.", "lt.", "sgt.", "capt.", "rev.", "inc.", "co.", "corp.", "ltd.",
    "jan.", "feb.", "aug.", "sept.", "oct.", "nov.", "dec.",
];

const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')'];

/// A tokenized sentence. Tokens never contain whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Sentence {
    tokens: Vec<String>,
}

impl Sentence {
    /// Builds a sentence from tokens; whitespace inside a token splits it.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let tokens = tokens
            .into_iter()
            .flat_map(|t| {
                t.as_ref()
                    .split_whitespace()
                    .map(str::to_owned)
                    .collect::<Vec<_>>()
            })
            .collect();
        Sentence { tokens }
    }

    /// Parses an already tokenized, space-separated line.
    pub fn from_line(line: &str) -> Self {
        Sentence::new(line.split_whitespace())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Ordinary,
    Simplified,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    sentences: Vec<Sentence>,
    side: Side,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>, side: Side) -> Self {
        Corpus { sentences, side }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn into_sentences(self) -> Vec<Sentence> {
        self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Reads one tokenized sentence per line. Blank lines become empty
    /// sentences so that line numbers stay aligned with the file.
    pub fn read(path: impl AsRef<Path>, side: Side) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut sentences = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            sentences.push(Sentence::from_line(&line));
        }
        Ok(Corpus { sentences, side })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_lines(path.as_ref(), self.sentences.iter().map(|s| s.to_string()))
    }
}

pub(crate) fn write_lines<I>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = String>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in lines {
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads aligned `.ord`/`.simp` files. Line counts must match.
pub fn read_parallel(ord: impl AsRef<Path>, simp: impl AsRef<Path>) -> Result<(Corpus, Corpus)> {
    let ord_corpus = Corpus::read(ord.as_ref(), Side::Ordinary)?;
    let simp_corpus = Corpus::read(simp.as_ref(), Side::Simplified)?;
    if ord_corpus.len() != simp_corpus.len() {
        let shorter = if ord_corpus.len() < simp_corpus.len() {
            ord.as_ref()
        } else {
            simp.as_ref()
        };
        return Err(Error::Alignment {
            file: shorter.display().to_string(),
            line: ord_corpus.len().min(simp_corpus.len()) + 1,
            msg: format!(
                "parallel files have {} and {} lines",
                ord_corpus.len(),
                simp_corpus.len()
            ),
        });
    }
    Ok((ord_corpus, simp_corpus))
}

fn is_abbreviation(text: &str, period_at: usize) -> bool {
    let word_start = text[..period_at]
        .rfind(char::is_whitespace)
        .map(|i| i + text[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(0);
    let word = text[word_start..=period_at].to_lowercase();
    let word = word.trim_start_matches(['"', '\'', '(']);
    ABBREVIATIONS.contains(&word)
}

/// Splits raw text after `.`, `!` or `?` when followed by whitespace and an
/// uppercase letter, or by the end of the text. Periods closing a known
/// abbreviation never split.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(pos, ch)) in chars.iter().enumerate() {
        if !matches!(ch, '.' | '!' | '?') {
            continue;
        }
        let mut next = k + 1;
        let at_end = chars[next..].iter().all(|(_, c)| c.is_whitespace());
        let boundary = if at_end {
            true
        } else if chars.get(next).is_some_and(|(_, c)| c.is_whitespace()) {
            while chars.get(next).is_some_and(|(_, c)| c.is_whitespace()) {
                next += 1;
            }
            chars.get(next).is_some_and(|(_, c)| c.is_uppercase())
        } else {
            false
        };
        if boundary && !(ch == '.' && is_abbreviation(text, pos)) {
            let end = pos + ch.len_utf8();
            let piece = text[start..end].trim();
            if !piece.is_empty() {
                out.push(piece.to_owned());
            }
            start = end;
        }
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_owned());
    }
    out
}

/// Lowercases, isolates punctuation marks and splits on whitespace.
pub fn tokenize(sentence: &str) -> Sentence {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in sentence.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if PUNCTUATION.contains(&ch) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    Sentence { tokens }
}

/// Keeps sentences whose token count lies in `min..=max`.
pub fn filter_by_length(corpus: &Corpus, min: usize, max: usize) -> Result<Corpus> {
    if min > max {
        return Err(Error::InvalidArgument(format!(
            "length filter min {min} exceeds max {max}"
        )));
    }
    let sentences = corpus
        .sentences
        .iter()
        .filter(|s| (min..=max).contains(&s.len()))
        .cloned()
        .collect();
    Ok(Corpus::new(sentences, corpus.side))
}

/// Drops exact repeats, keeping first occurrences in order.
pub fn dedup(corpus: &Corpus) -> Corpus {
    let mut seen = HashSet::new();
    let sentences = corpus
        .sentences
        .iter()
        .filter(|s| seen.insert(s.tokens.as_slice()))
        .cloned()
        .collect();
    Corpus::new(sentences, corpus.side)
}

/// Draws `n` distinct sentences without replacement. The result depends only
/// on `(corpus, n, seed)`.
pub fn sample(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus> {
    if n > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} sentences from a corpus of {}",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = rand::seq::index::sample(&mut rng, corpus.len(), n)
        .into_iter()
        .map(|i| corpus.sentences[i].clone())
        .collect();
    Ok(Corpus::new(sentences, corpus.side))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabFingerprint {
    pub size: usize,
    pub hash: String,
}

/// Bidirectional token/id map. Ids 0..4 are `<pad> <unk> <s> </s>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_of: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl Vocabulary {
    /// A vocabulary holding only the four special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(std::iter::empty::<String>()).expect("special tokens are distinct")
    }

    /// Builds a vocabulary from non-special tokens in id order (ids start at 4).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            token_of: Vec::new(),
            id_of: HashMap::new(),
        };
        for tok in SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
        {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "invalid vocabulary token {tok:?}"
                )));
            }
            if vocab
                .id_of
                .insert(tok.clone(), vocab.token_of.len())
                .is_some()
            {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary token {tok:?}"
                )));
            }
            vocab.token_of.push(tok);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    /// Serialized form: one `token<TAB>id` line per entry, ascending id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (id, tok) in self.token_of.iter().enumerate() {
            s.push_str(tok);
            s.push('\t');
            s.push_str(&id.to_string());
            s.push('\n');
        }
        s
    }

    pub fn fingerprint(&self) -> VocabFingerprint {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        VocabFingerprint {
            size: self.len(),
            hash: hex::encode(digest),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, msg: String| Error::Alignment {
            file: path.display().to_string(),
            line,
            msg,
        };
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| bad(i + 1, "expected token<TAB>id".into()))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| bad(i + 1, format!("invalid id {id:?}")))?;
            if id != i {
                return Err(bad(i + 1, format!("id {id} out of order")));
            }
            if i < NUM_SPECIALS {
                if tok != SPECIAL_TOKENS[i] {
                    return Err(bad(
                        i + 1,
                        format!("expected special token {}", SPECIAL_TOKENS[i]),
                    ));
                }
            } else {
                tokens.push(tok.to_owned());
            }
        }
        if text.lines().count() < NUM_SPECIALS {
            return Err(bad(
                text.lines().count() + 1,
                "missing special tokens".into(),
            ));
        }
        Vocabulary::from_tokens(tokens)
    }
}

/// Keeps the `max_size - 4` most frequent tokens across `sentences`, ties
/// broken lexicographically.
pub fn build_vocab_from<'a, I>(sentences: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    if max_size <= NUM_SPECIALS {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size must be at least {}, got {max_size}",
            NUM_SPECIALS + 1
        )));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for sentence in sentences {
        for tok in &sentence.tokens {
            if !SPECIAL_TOKENS.contains(&tok.as_str()) {
                *freq.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocabulary> {
    build_vocab_from(corpus.sentences(), max_size)
}

pub fn numericalize(sentence: &Sentence, vocab: &Vocabulary, add_bounds: bool) -> Vec<usize> {
    let mut ids = Vec::with_capacity(sentence.len() + 2);
    if add_bounds {
        ids.push(BOS);
    }
    ids.extend(sentence.tokens.iter().map(|t| vocab.id_or_unk(t)));
    if add_bounds {
        ids.push(EOS);
    }
    ids
}

/// Maps ids back to tokens. Out-of-range ids become `<unk>`.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> Sentence {
    Sentence {
        tokens: ids
            .iter()
            .map(|&id| vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK]).to_owned())
            .collect(),
    }
}

/// Counts reported by [`preprocess`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessStats {
    pub sentences_in: usize,
    pub after_length_filter: usize,
    pub sentences_out: usize,
    pub vocab_size: usize,
}

/// split → tokenize → length filter → dedup → vocabulary.
pub fn preprocess(
    raw: &str,
    side: Side,
    min_len: usize,
    max_len: usize,
    vocab_size: usize,
) -> Result<(Corpus, Vocabulary, PreprocessStats)> {
    let sentences: Vec<Sentence> = split_sentences(raw)
        .iter()
        .map(|s| tokenize(s))
        .filter(|s| !s.is_empty())
        .collect();
    let corpus = Corpus::new(sentences, side);
    let filtered = filter_by_length(&corpus, min_len, max_len)?;
    let deduped = dedup(&filtered);
    let vocab = build_vocab(&deduped, vocab_size)?;
    let stats = PreprocessStats {
        sentences_in: corpus.len(),
        after_length_filter: filtered.len(),
        sentences_out: deduped.len(),
        vocab_size: vocab.len(),
    };
    Ok((deduped, vocab, stats))
}
