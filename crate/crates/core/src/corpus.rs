//! Vocabulary, word-level tokenization and corpus readers.
//!
//! Tokens are lowercase runs of alphanumeric characters; every other
//! non-whitespace character is a token of its own. The five special tokens
//! occupy ids 0..5 in a fixed order.
//!
//! File formats (all UTF-8, one record per line):
//! - sentence corpus: one sentence per line;
//! - document corpus: `{"text": "..."}` per line;
//! - pair files: `a<TAB>b` per line, or `{"a": "...", "b": "..."}` per line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const PAD: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[CLS]", "[SEP]", "[M]", "[PAD]", "[UNK]"];

pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    /// A vocabulary holding only the special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(Vec::<String>::new()).expect("no duplicates")
    }

    /// Builds a vocabulary from ordinary tokens; specials are prepended.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens.into_iter().map(Into::into));
        Self::from_id_order(id_to_token)
    }

    /// Rebuilds a vocabulary from its full id-ordered token list (as stored in
    /// checkpoints). The first five entries must be the specials.
    pub fn from_id_order(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < NUM_SPECIAL
            || id_to_token[..NUM_SPECIAL]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Format(
                "vocabulary must start with [CLS] [SEP] [M] [PAD] [UNK]".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{tok}`")));
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// Writes one token per line in id order.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`Vocab::write`].
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let tokens = read_lines(path)?.collect::<Result<Vec<_>>>()?;
        Self::from_id_order(tokens.into_iter().filter(|t| !t.is_empty()).collect())
    }
}

/// Splits text into lowercase word and punctuation tokens. Literal special
/// token spellings (`[UNK]`, `[M]`, ...) are kept whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c == '[' {
            if let Some(sp) = SPECIAL_TOKENS
                .iter()
                .find(|sp| rest.get(..sp.len()).is_some_and(|s| s.eq_ignore_ascii_case(sp)))
            {
                flush(&mut word, &mut out);
                out.push(sp.to_string());
                rest = &rest[sp.len()..];
                continue;
            }
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_lowercase().collect());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

/// Token frequencies over an iterator of lines, ignoring special spellings.
pub fn count_tokens<S: AsRef<str>>(lines: impl IntoIterator<Item = S>) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for line in lines {
        for tok in tokenize(line.as_ref()) {
            if SPECIAL_TOKENS.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    counts
}

/// Ranks tokens by descending frequency (ties by token text) and keeps the
/// top `max_size - 5` with at least `min_freq` occurrences.
pub fn vocab_from_counts(counts: &HashMap<String, u64>, max_size: usize, min_freq: u64) -> Result<Vocab> {
    if max_size < NUM_SPECIAL + 1 {
        return Err(Error::Config(format!(
            "vocabulary max_size must be at least {}, got {max_size}",
            NUM_SPECIAL + 1
        )));
    }
    let mut ranked: Vec<(&String, u64)> = counts
        .iter()
        .filter(|(_, &c)| c >= min_freq)
        .map(|(t, &c)| (t, c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_SPECIAL);
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t.clone()))
}

/// Streams a one-sentence-per-line corpus and builds its vocabulary.
pub fn build_vocab(corpus_path: impl AsRef<Path>, max_size: usize, min_freq: u64) -> Result<Vocab> {
    let path = corpus_path.as_ref();
    let counts = count_tokens(read_lines(path)?.collect::<Result<Vec<_>>>()?);
    vocab_from_counts(&counts, max_size, min_freq)
}

/// Line iterator over a UTF-8 file, with I/O errors tagged by path.
pub fn read_lines(path: impl AsRef<Path>) -> Result<LineReader> {
    let path = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    Ok(LineReader {
        lines: BufReader::new(file).lines(),
        path,
    })
}

pub struct LineReader {
    lines: Lines<BufReader<File>>,
    path: PathBuf,
}

impl Iterator for LineReader {
    type Item = Result<String>;

    fn next(&mut self) -> Option<Self::Item> {
        self.lines
            .next()
            .map(|r| r.map_err(|e| Error::io(&self.path, e)))
    }
}

/// A tokenized sentence: `[CLS] tokens... [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != CLS || *ids.last().unwrap() != SEP {
            return Err(Error::Contract(
                "token sequence must start with [CLS] and end with [SEP]".into(),
            ));
        }
        if ids[1..ids.len() - 1]
            .iter()
            .any(|&i| i == CLS || i == SEP || i == PAD)
        {
            return Err(Error::Contract(
                "token sequence body may not contain [CLS], [SEP] or [PAD]".into(),
            ));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Positions that masking may touch: every non-special token.
    pub fn maskable_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| !Vocab::is_special(id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Positions of real tokens, i.e. everything between [CLS] and [SEP].
    pub fn real_positions(&self) -> std::ops::Range<usize> {
        1..self.ids.len() - 1
    }
}

/// Lowercases, tokenizes and maps to ids with [UNK] fallback, wrapping the
/// result in `[CLS] ... [SEP]` and truncating to `max_len` (minimum 2).
///
/// Special-token spellings found in the raw text become [UNK]; masking only
/// ever happens downstream.
pub fn encode_sentence(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let room = max_len.max(2) - 2;
    let mut ids = Vec::with_capacity(room + 2);
    ids.push(CLS);
    ids.extend(
        tokenize(text)
            .iter()
            .take(room)
            .map(|t| match vocab.id(t) {
                Some(id) if !Vocab::is_special(id) => id,
                _ => UNK,
            }),
    );
    ids.push(SEP);
    TokenSequence { ids }
}

/// Renders the body of a sequence as space-separated tokens.
pub fn decode(seq: &TokenSequence, vocab: &Vocab) -> String {
    seq.ids[1..seq.ids.len() - 1]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK]))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    NliPair,
    SameArticle,
    QueryPassage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub a: TokenSequence,
    pub b: TokenSequence,
    pub source: PairSource,
}

impl SentencePair {
    pub fn encode(pair: &TextPair, source: PairSource, vocab: &Vocab, max_len: usize) -> Self {
        Self {
            a: encode_sentence(&pair.a, vocab, max_len),
            b: encode_sentence(&pair.b, vocab, max_len),
            source,
        }
    }
}

/// A raw text pair as read from a pair file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairFormat {
    TwoColumn,
    Record,
}

impl std::str::FromStr for PairFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_column" | "two-column" | "tsv" => Ok(PairFormat::TwoColumn),
            "record" | "jsonl" => Ok(PairFormat::Record),
            other => Err(Error::Config(format!("unknown pair format `{other}`"))),
        }
    }
}

impl PairFormat {
    pub fn parse_line(self, line: &str) -> Option<TextPair> {
        match self {
            PairFormat::TwoColumn => {
                let mut parts = line.split('\t');
                let (a, b) = (parts.next()?, parts.next()?);
                if parts.next().is_some() || a.trim().is_empty() || b.trim().is_empty() {
                    return None;
                }
                Some(TextPair {
                    a: a.to_string(),
                    b: b.to_string(),
                })
            }
            PairFormat::Record => serde_json::from_str(line).ok(),
        }
    }

    pub fn format_line(self, pair: &TextPair) -> String {
        match self {
            PairFormat::TwoColumn => format!("{}\t{}", pair.a, pair.b),
            PairFormat::Record => serde_json::to_string(pair).expect("plain strings serialize"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadSummary {
    pub loaded: usize,
    pub skipped: usize,
}

/// Streaming reader over a pair file. Malformed lines are skipped and
/// counted; call [`PairStream::finish`] after draining to get the summary,
/// which fails when more than half of the non-blank lines were malformed.
pub struct PairStream {
    lines: Box<dyn Iterator<Item = Result<String>>>,
    format: PairFormat,
    path: PathBuf,
    summary: LoadSummary,
}

impl Iterator for PairStream {
    type Item = Result<TextPair>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e)),
            };
            if line.trim().is_empty() {
                continue;
            }
            match self.format.parse_line(&line) {
                Some(p) => {
                    self.summary.loaded += 1;
                    return Some(Ok(p));
                }
                None => self.summary.skipped += 1,
            }
        }
    }
}

impl PairStream {
    pub fn finish(self) -> Result<LoadSummary> {
        let s = self.summary;
        let total = s.loaded + s.skipped;
        if total > 0 && s.skipped * 2 > total {
            return Err(Error::Format(format!(
                "{} of {total} lines in {} are malformed for format {:?}; wrong format flag?",
                s.skipped,
                self.path.display(),
                self.format
            )));
        }
        if s.skipped > 0 {
            log::warn!(
                "skipped {} malformed line(s) in {}",
                s.skipped,
                self.path.display()
            );
        }
        Ok(s)
    }
}

pub fn load_pairs(path: impl AsRef<Path>, format: PairFormat) -> Result<PairStream> {
    let path = path.as_ref().to_path_buf();
    Ok(PairStream {
        lines: Box::new(read_lines(&path)?),
        format,
        path,
        summary: LoadSummary::default(),
    })
}

/// Loads a whole pair file into memory.
pub fn read_pairs(path: impl AsRef<Path>, format: PairFormat) -> Result<(Vec<TextPair>, LoadSummary)> {
    let mut stream = load_pairs(path, format)?;
    let pairs = stream.by_ref().collect::<Result<Vec<_>>>()?;
    let summary = stream.finish()?;
    Ok((pairs, summary))
}

#[derive(Deserialize)]
struct DocumentRecord {
    text: String,
}

/// Reads a `{"text": ...}`-per-line document corpus.
pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut docs = Vec::new();
    for (n, line) in read_lines(path)?.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        docs.push(rec.text);
    }
    Ok(docs)
}

/// Reads a one-sentence-per-line corpus, skipping blank lines.
pub fn read_sentences(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in read_lines(path)? {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

/// Splits a document on `.`, `!` or `?` followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    push_trimmed(&text[start..end], &mut out);
                    start = end;
                }
            }
        }
    }
    push_trimmed(&text[start..], &mut out);
    out
}

fn push_trimmed(s: &str, out: &mut Vec<String>) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

/// Two distinct sentence indices out of `n`, uniform over ordered pairs.
pub fn sample_sentence_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Option<(usize, usize)> {
    if n < 2 {
        return None;
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Some((i, j))
}

/// One positive pair drawn from a single document, with its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArticlePair {
    pub doc: usize,
    pub a_index: usize,
    pub b_index: usize,
    pub a: String,
    pub b: String,
}

/// Yields one same-article pair per document with at least two sentences,
/// in document order. Documents with fewer sentences are skipped.
pub fn make_article_pairs<'r, I, R>(
    documents: I,
    rng: &'r mut R,
) -> impl Iterator<Item = ArticlePair> + 'r
where
    I: IntoIterator<Item = String>,
    I::IntoIter: 'r,
    R: Rng + ?Sized,
{
    documents
        .into_iter()
        .enumerate()
        .filter_map(move |(doc, text)| {
            let sentences = split_sentences(&text);
            let (i, j) = sample_sentence_pair(sentences.len(), rng)?;
            Some(ArticlePair {
                doc,
                a_index: i,
                b_index: j,
                a: sentences[i].clone(),
                b: sentences[j].clone(),
            })
        })
}
