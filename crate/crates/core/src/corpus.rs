//! If-Then and story corpora, vocabulary, GloVe initialization, splits and batching.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Inference dimension of an If-Then record. `Aux` tags auxiliary story triples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    #[serde(rename = "xIntent")]
    XIntent,
    #[serde(rename = "xReact")]
    XReact,
    #[serde(rename = "oReact")]
    OReact,
    #[serde(rename = "xNeed")]
    XNeed,
    #[serde(rename = "xAttr")]
    XAttr,
    #[serde(rename = "xEffect")]
    XEffect,
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "oWant")]
    OWant,
    #[serde(rename = "oEffect")]
    OEffect,
    #[serde(rename = "aux")]
    Aux,
}

impl Dimension {
    pub const ATOMIC: [Dimension; 9] = [
        Dimension::XIntent,
        Dimension::XNeed,
        Dimension::XAttr,
        Dimension::XEffect,
        Dimension::XReact,
        Dimension::XWant,
        Dimension::OWant,
        Dimension::OReact,
        Dimension::OEffect,
    ];
    pub const EVENT2MIND: [Dimension; 3] = [Dimension::XIntent, Dimension::XReact, Dimension::OReact];

    pub fn tag(self) -> &'static str {
        match self {
            Dimension::XIntent => "xIntent",
            Dimension::XReact => "xReact",
            Dimension::OReact => "oReact",
            Dimension::XNeed => "xNeed",
            Dimension::XAttr => "xAttr",
            Dimension::XEffect => "xEffect",
            Dimension::XWant => "xWant",
            Dimension::OWant => "oWant",
            Dimension::OEffect => "oEffect",
            Dimension::Aux => "aux",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Dimension::Aux)
            .chain(Dimension::ATOMIC)
            .find(|d| d.tag() == s)
            .ok_or_else(|| Error::Schema(format!("unknown inference dimension {s:?}")))
    }
}

/// Source layout of an If-Then file, which fixes the admissible dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IfThenFormat {
    Event2Mind,
    Atomic,
}

impl IfThenFormat {
    pub fn dimensions(self) -> &'static [Dimension] {
        match self {
            IfThenFormat::Event2Mind => &Dimension::EVENT2MIND,
            IfThenFormat::Atomic => &Dimension::ATOMIC,
        }
    }

    /// Column name used by the original wide release for a dimension.
    fn wide_column(self, dim: Dimension) -> &'static str {
        match (self, dim) {
            (IfThenFormat::Event2Mind, Dimension::XIntent) => "xintent",
            (IfThenFormat::Event2Mind, Dimension::XReact) => "xemotion",
            (IfThenFormat::Event2Mind, Dimension::OReact) => "otheremotion",
            (_, d) => d.tag(),
        }
    }
}

impl FromStr for IfThenFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "event2mind" => Ok(IfThenFormat::Event2Mind),
            "atomic" => Ok(IfThenFormat::Atomic),
            other => Err(Error::Schema(format!("unknown If-Then format {other:?}"))),
        }
    }
}

/// Text split into token strings.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Lowercases, splits on whitespace and punctuation. `PersonX`-style
/// placeholders keep their spelling and stay single tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct BasicTokenizer;

impl Tokenizer for BasicTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<String>| {
            if word.is_empty() {
                return;
            }
            if is_placeholder(word) {
                out.push(std::mem::take(word));
            } else {
                out.push(word.to_lowercase());
                word.clear();
            }
        };
        for ch in text.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                word.push(ch);
            } else {
                flush(&mut word, &mut out);
                if !ch.is_whitespace() {
                    out.push(ch.to_string());
                }
            }
        }
        flush(&mut word, &mut out);
        out
    }
}

fn is_placeholder(word: &str) -> bool {
    word.len() == 7
        && word.starts_with("Person")
        && word.as_bytes()[6].is_ascii_uppercase()
}

/// Splits on whitespace only, for corpora that are already tokenized.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_owned).collect()
    }
}

/// One record before vocabulary lookup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub context: Option<Vec<String>>,
    pub event: Vec<String>,
    pub dimension: Dimension,
    pub target: Vec<String>,
}

impl RawExample {
    fn tokens(&self) -> impl Iterator<Item = &String> {
        self.context
            .iter()
            .flatten()
            .chain(&self.event)
            .chain(&self.target)
    }
}

/// One training or evaluation record as token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub context: Option<Vec<usize>>,
    pub event: Vec<usize>,
    pub dimension: Dimension,
    pub target: Vec<usize>,
}

/// Reads a file as UTF-8, reporting the offset of the first invalid byte.
pub fn read_utf8(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    decode_utf8(bytes)
}

pub fn decode_utf8(bytes: Vec<u8>) -> Result<String> {
    String::from_utf8(bytes).map_err(|e| Error::Decode {
        offset: e.utf8_error().valid_up_to(),
    })
}

/// Loads an If-Then CSV file.
///
/// Two layouts are accepted: the long layout with header `event,dim,target`
/// (one target per row, or a JSON list in the target cell), and the original
/// wide release with one column per dimension holding a JSON list of targets.
pub fn load_ifthen(
    path: impl AsRef<Path>,
    format: IfThenFormat,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<RawExample>> {
    parse_ifthen(&read_utf8(path)?, format, tokenizer)
}

pub fn parse_ifthen(
    text: &str,
    format: IfThenFormat,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<RawExample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let event_col = col("event").ok_or_else(|| Error::Schema("missing `event` column".into()))?;

    let layout = match (col("dim"), col("target")) {
        (Some(d), Some(t)) => Layout::Long { dim: d, target: t },
        _ => {
            let columns: Vec<(usize, Dimension)> = format
                .dimensions()
                .iter()
                .filter_map(|&d| col(&format.wide_column(d).to_ascii_lowercase()).map(|c| (c, d)))
                .collect();
            if columns.is_empty() {
                return Err(Error::Schema(
                    "expected `event,dim,target` header or per-dimension columns".into(),
                ));
            }
            Layout::Wide { columns }
        }
    };

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let event = tokenizer.tokenize(field(event_col));
        if event.is_empty() {
            return Err(Error::Parse { line, message: "empty event".into() });
        }
        match &layout {
            Layout::Long { dim, target } => {
                let tag = field(*dim);
                let dimension: Dimension = tag.parse().map_err(|_| {
                    Error::Schema(format!("line {line}: unknown dimension tag {tag:?}"))
                })?;
                if !format.dimensions().contains(&dimension) {
                    return Err(Error::Schema(format!(
                        "line {line}: dimension {tag:?} is not part of {format:?}"
                    )));
                }
                let targets = split_cell(field(*target), line)?;
                if targets.is_empty() {
                    return Err(Error::Parse { line, message: "empty target".into() });
                }
                for t in targets {
                    let target = tokenizer.tokenize(&t);
                    if target.is_empty() {
                        return Err(Error::Parse { line, message: "empty target".into() });
                    }
                    out.push(RawExample { context: None, event: event.clone(), dimension, target });
                }
            }
            Layout::Wide { columns } => {
                for &(c, dimension) in columns {
                    for t in split_cell(field(c), line)? {
                        if t.eq_ignore_ascii_case("none") {
                            continue;
                        }
                        let target = tokenizer.tokenize(&t);
                        if !target.is_empty() {
                            out.push(RawExample { context: None, event: event.clone(), dimension, target });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

enum Layout {
    Long { dim: usize, target: usize },
    Wide { columns: Vec<(usize, Dimension)> },
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse { line, message: e.to_string() }
}

/// A cell is either plain text or a JSON list of strings.
fn split_cell(cell: &str, line: u64) -> Result<Vec<String>> {
    if cell.starts_with('[') {
        let items: Vec<String> = serde_json::from_str(cell).map_err(|e| Error::Parse {
            line,
            message: format!("bad JSON list cell: {e}"),
        })?;
        Ok(items.into_iter().map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect())
    } else if cell.is_empty() {
        Ok(Vec::new())
    } else {
        Ok(vec![cell.to_owned()])
    }
}

#[derive(Deserialize)]
struct StoryLine {
    sentences: Vec<String>,
}

/// Loads a JSON Lines story corpus: `{"sentences": ["…", …]}` per line.
pub fn load_stories(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    parse_stories(&read_utf8(path)?)
}

pub fn parse_stories(text: &str) -> Result<Vec<Vec<String>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<StoryLine>(l)
                .map(|s| s.sentences)
                .map_err(|e| Error::Parse { line: i as u64 + 1, message: e.to_string() })
        })
        .collect()
}

pub const STORY_WINDOW: usize = 5;

/// Result of cutting stories into (context, event, target) triples.
#[derive(Clone, Debug, Default)]
pub struct AuxiliaryBuild {
    pub examples: Vec<RawExample>,
    /// Stories with fewer than five sentences.
    pub skipped_short: usize,
    /// Stories over the word limit.
    pub filtered_long: usize,
    /// Windows dropped because one of their parts tokenized to nothing.
    pub empty_windows: usize,
}

/// Cuts each story into consecutive non-overlapping five-sentence windows:
/// sentences 1–3 form the context, 4 the event, 5 the target.
pub fn build_auxiliary(
    stories: &[Vec<String>],
    max_words: usize,
    tokenizer: &dyn Tokenizer,
) -> AuxiliaryBuild {
    let mut build = AuxiliaryBuild::default();
    for story in stories {
        let words: usize = story.iter().map(|s| s.split_whitespace().count()).sum();
        if words > max_words {
            build.filtered_long += 1;
            continue;
        }
        if story.len() < STORY_WINDOW {
            build.skipped_short += 1;
            continue;
        }
        for window in story.chunks_exact(STORY_WINDOW) {
            let context: Vec<String> = window[..3].iter().flat_map(|s| tokenizer.tokenize(s)).collect();
            let event = tokenizer.tokenize(&window[3]);
            let target = tokenizer.tokenize(&window[4]);
            if context.is_empty() || event.is_empty() || target.is_empty() {
                build.empty_windows += 1;
                continue;
            }
            build.examples.push(RawExample {
                context: Some(context),
                event,
                dimension: Dimension::Aux,
                target,
            });
        }
    }
    build
}

/// Token ↔ id map with PAD, UNK, BOS, EOS fixed at ids 0..3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens; out-of-range ids decode as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_owned())
            .collect()
    }

    pub fn encode_example(&self, raw: &RawExample) -> Example {
        Example {
            context: raw.context.as_ref().map(|c| self.encode(c)),
            event: self.encode(&raw.event),
            dimension: raw.dimension,
            target: self.encode(&raw.target),
        }
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hex_digest(&hasher.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const DEFAULT_MIN_COUNT: usize = 2;

/// Vocabulary of tokens seen at least `min_count` times, most frequent first.
pub fn build_vocab<'a>(examples: impl IntoIterator<Item = &'a RawExample>, min_count: usize) -> Vocab {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        for t in ex.tokens() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_owned()))
        .collect();
    Vocab::from_tokens(tokens).expect("reserved prefix and unique tokens by construction")
}

/// Embedding table initialized from a GloVe text file.
#[derive(Clone, Debug)]
pub struct GloveInit {
    pub table: Tensor,
    /// Rows found in the file, over non-reserved tokens.
    pub found: usize,
    pub coverage: f64,
}

/// Rows for tokens present in the file are copied verbatim; the rest are
/// drawn from U(−0.1, 0.1) with `seed`. The PAD row is zero.
pub fn load_glove(path: impl AsRef<Path>, vocab: &Vocab, dim: usize, seed: u64) -> Result<GloveInit> {
    parse_glove(&read_utf8(path)?, vocab, dim, seed)
}

pub fn parse_glove(text: &str, vocab: &Vocab, dim: usize, seed: u64) -> Result<GloveInit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..vocab.len() * dim).map(|_| rng.random_range(-0.1..0.1)).collect();
    data[PAD * dim..(PAD + 1) * dim].fill(0.0);
    let mut seen = vec![false; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::Format(format!(
                "line {}: expected {dim} values, found {}",
                i + 1,
                values.len()
            )));
        }
        let Some(&id) = vocab.index.get(token) else { continue };
        if id < RESERVED.len() {
            continue;
        }
        for (slot, v) in data[id * dim..(id + 1) * dim].iter_mut().zip(&values) {
            *slot = v.parse().map_err(|_| {
                Error::Format(format!("line {}: bad number {v:?}", i + 1))
            })?;
        }
        seen[id] = true;
    }
    let found = seen.iter().filter(|&&s| s).count();
    let denom = vocab.len().saturating_sub(RESERVED.len()).max(1);
    Ok(GloveInit {
        table: Tensor::new(vec![vocab.len(), dim], data)?,
        found,
        coverage: found as f64 / denom as f64,
    })
}

/// Train/dev/test fractions plus the shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.8, dev: 0.1, test: 0.1, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.dev, self.test];
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then contiguous cuts of rounded sizes.
pub fn split<T: Clone>(items: &[T], spec: &SplitSpec) -> Result<Split<T>> {
    spec.validate()?;
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((n as f64) * spec.train).round() as usize;
    let n_dev = (((n as f64) * spec.dev).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let pick = |r: std::ops::Range<usize>| order[r].iter().map(|&i| items[i].clone()).collect();
    Ok(Split {
        train: pick(0..n_train),
        dev: pick(n_train..n_train + n_dev),
        test: pick(n_train + n_dev..n),
    })
}

/// Seeded subsample keeping roughly `fraction` of the items, at least one.
pub fn subsample<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Vec<T> {
    if fraction >= 1.0 || items.is_empty() {
        return items.to_vec();
    }
    let keep = ((items.len() as f64 * fraction).round() as usize).clamp(1, items.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..keep].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| items[i].clone()).collect()
}

/// Right-padded id rows with validity masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl Padded {
    fn new<'a>(rows: impl Iterator<Item = &'a [usize]> + Clone) -> Self {
        let width = rows.clone().map(<[usize]>::len).max().unwrap_or(0);
        let (ids, mask) = rows
            .map(|r| {
                let mut ids = r.to_vec();
                ids.resize(width, PAD);
                let mut mask = vec![true; r.len()];
                mask.resize(width, false);
                (ids, mask)
            })
            .unzip();
        Self { ids, mask }
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

/// A padded mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub examples: Vec<Example>,
    pub event: Padded,
    pub target: Padded,
    pub context: Option<Padded>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let with_context = examples.iter().filter(|e| e.context.is_some()).count();
        if with_context != 0 && with_context != examples.len() {
            return Err(Error::contract("batch mixes examples with and without context"));
        }
        if let Some(bad) = examples.iter().find(|e| e.event.is_empty() || e.target.is_empty()) {
            return Err(Error::contract(format!("example with empty event or target: {bad:?}")));
        }
        let event = Padded::new(examples.iter().map(|e| e.event.as_slice()));
        let target = Padded::new(examples.iter().map(|e| e.target.as_slice()));
        let context = (with_context > 0)
            .then(|| Padded::new(examples.iter().map(|e| e.context.as_deref().unwrap_or(&[]))));
        Ok(Self { examples, event, target, context })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_context(&self) -> bool {
        self.context.is_some()
    }
}

/// Deterministic shuffled mini-batches. The last batch may be smaller.
pub fn batches(examples: &[Example], size: usize, seed: u64) -> Result<Batches<'_>> {
    if size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Batches { examples, order, size, pos: 0 })
}

pub struct Batches<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let chunk = self.order[self.pos..end].iter().map(|&i| self.examples[i].clone()).collect();
        self.pos = end;
        Some(Batch::new(chunk))
    }
}
