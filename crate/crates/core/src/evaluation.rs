//! Perplexity, BLEU, distinct-n and generation reports.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;
use std::ops::Range;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dimension, Example, Vocab};
use crate::error::{Error, Result};
use crate::models::{DecodeStrategy, ExampleRef, Generation, Model, ModelKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    SampleGreedy,
    Beam,
}

/// How per-candidate BLEU scores combine for one event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuAggregate {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: StrategyKind,
    pub beam_width: usize,
    /// Decodes per event.
    pub k: usize,
    pub seed: u64,
    /// Importance samples per example for perplexity.
    pub ppl_samples: usize,
    pub bleu_max_n: usize,
    pub bleu_aggregate: BleuAggregate,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::SampleGreedy,
            beam_width: 10,
            k: 10,
            seed: 0,
            ppl_samples: 20,
            bleu_max_n: 4,
            bleu_aggregate: BleuAggregate::Mean,
        }
    }
}

impl DecodeConfig {
    pub fn decode_strategy(&self) -> DecodeStrategy {
        match self.strategy {
            StrategyKind::SampleGreedy => DecodeStrategy::SampleGreedy,
            StrategyKind::Beam => DecodeStrategy::Beam { width: self.beam_width },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.ppl_samples == 0 || self.bleu_max_n == 0 || self.beam_width == 0 {
            return Err(Error::Config("k, beam_width, ppl_samples and bleu_max_n must be positive".into()));
        }
        Ok(())
    }
}

/// Splits `0..n` over worker threads, each with its own inference session;
/// results come back in index order.
fn par_ranges<R: Send>(model: &Model, n: usize, f: impl Fn(&mut crate::models::Inference<'_>, Range<usize>) -> Result<Vec<R>> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    let chunk = n.div_ceil(workers).max(1);
    let ranges: Vec<Range<usize>> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| {
                let f = &f;
                scope.spawn(move || f(&mut model.inference(), r))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Per-item generator: independent of thread layout.
fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    /// From the importance-weighted estimate (exact for `rnn_seq2seq`).
    pub ppl: f64,
    /// From the ELBO; never below `ppl` in expectation.
    pub elbo_ppl: f64,
    pub log_likelihood: f64,
    pub tokens: usize,
}

/// `exp(−Σ log p̂(y|x) / Σ |y|)`, target lengths counting EOS.
pub fn perplexity(model: &Model, examples: &[Example], k_samples: usize, seed: u64) -> Result<PerplexityReport> {
    if k_samples < 1 {
        return Err(Error::contract("perplexity needs at least one sample"));
    }
    if examples.is_empty() {
        return Err(Error::contract("perplexity of an empty set"));
    }
    let estimates = par_ranges(model, examples.len(), |inf, range| {
        range
            .map(|i| {
                let ex = &examples[i];
                let view = ExampleRef { context: None, ..ExampleRef::from(ex) };
                inf.log_likelihood(view, k_samples, &mut item_rng(seed, i))
            })
            .collect()
    })?;
    let tokens: usize = estimates.iter().map(|e| e.tokens).sum();
    let ll: f64 = estimates.iter().map(|e| e.iwae).sum();
    let elbo: f64 = estimates.iter().map(|e| e.elbo).sum();
    Ok(PerplexityReport {
        ppl: (-ll / tokens as f64).exp(),
        elbo_ppl: (-elbo / tokens as f64).exp(),
        log_likelihood: ll,
        tokens,
    })
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU against a reference set with add-one smoothing of the
/// precisions of order 2 and up. Orders beyond the candidate length are dropped.
pub fn sentence_bleu<T: Eq + Hash>(candidate: &[T], references: &[&[T]], max_n: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::contract("BLEU needs at least one reference"));
    }
    if max_n == 0 {
        return Err(Error::contract("BLEU order must be positive"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let orders = max_n.min(candidate.len());
    let mut log_p = 0.0;
    for n in 1..=orders {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = candidate.len() + 1 - n;
        let p = if n == 1 { matched as f64 / total as f64 } else { (matched + 1) as f64 / (total + 1) as f64 };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_p += p.ln() / orders as f64;
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("non-empty references");
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Combined sentence BLEU of several candidates against one reference set.
pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize, aggregate: BleuAggregate) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("BLEU needs at least one candidate"));
    }
    let refs: Vec<&[T]> = references.iter().map(Vec::as_slice).collect();
    let scores = candidates.iter().map(|c| sentence_bleu(c, &refs, max_n)).collect::<Result<Vec<_>>>()?;
    Ok(match aggregate {
        BleuAggregate::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        BleuAggregate::Max => scores.iter().copied().fold(0.0, f64::max),
    })
}

/// Unique n-grams across all candidates divided by the total number of
/// generated tokens. Duplicates count toward the denominator.
pub fn distinct_n<T: Eq + Hash>(candidates: &[Vec<T>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("distinct-n of an empty candidate set"));
    }
    if n == 0 {
        return Err(Error::contract("distinct-n order must be positive"));
    }
    let total: usize = candidates.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let unique: HashSet<&[T]> = candidates.iter().flat_map(|c| c.windows(n)).collect();
    Ok(unique.len() as f64 / total as f64)
}

/// Number of distinct references reproduced exactly by some candidate.
pub fn coverage<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> usize {
    let produced: HashSet<&[T]> = candidates.iter().map(Vec::as_slice).collect();
    let refs: HashSet<&[T]> = references.iter().map(Vec::as_slice).collect();
    refs.intersection(&produced).count()
}

/// Gold targets grouped per (event, dimension), in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct EventGroup {
    pub event: Vec<usize>,
    pub dimension: Dimension,
    pub references: Vec<Vec<usize>>,
}

pub fn group_by_event(examples: &[Example]) -> Vec<EventGroup> {
    let mut groups: IndexMap<(Vec<usize>, Dimension), Vec<Vec<usize>>> = IndexMap::new();
    for e in examples {
        let refs = groups.entry((e.event.clone(), e.dimension)).or_default();
        if !refs.contains(&e.target) {
            refs.push(e.target.clone());
        }
    }
    groups
        .into_iter()
        .map(|((event, dimension), references)| EventGroup { event, dimension, references })
        .collect()
}

/// Raw `k` generations per event, in event order.
pub fn generate_all(model: &Model, events: &[Vec<usize>], config: &DecodeConfig) -> Result<Vec<Vec<Generation>>> {
    config.validate()?;
    let strategy = config.decode_strategy();
    par_ranges(model, events.len(), |inf, range| {
        range
            .map(|i| inf.generate(&events[i], config.k, strategy, &mut item_rng(config.seed, i)))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub log_prob: f64,
    /// How many of the `k` decodes produced this string.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub event: String,
    pub dimension: Dimension,
    pub references: Vec<String>,
    /// Unique candidates, best log-probability first.
    pub candidates: Vec<Candidate>,
    pub bleu: f64,
    pub coverage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model_kind: ModelKind,
    pub checkpoint_digest: String,
    pub vocab_digest: String,
    pub decode: DecodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub ppl: f64,
    pub elbo_ppl: f64,
    /// Mean per-event BLEU as a percentage.
    pub bleu: f64,
    /// Pooled over every raw decode of every event.
    pub distinct1: f64,
    pub distinct2: f64,
    /// Mean number of references reproduced per event.
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub metadata: ReportMetadata,
    pub aggregates: Aggregates,
    pub events: Vec<EventReport>,
}

impl GenerationReport {
    /// Aligned-column rendering for terminals.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 5]> = vec![["event".into(), "dim".into(), "rank".into(), "log_prob".into(), "candidate".into()]];
        for ev in &self.events {
            for (rank, c) in ev.candidates.iter().enumerate() {
                let (event, dim) = if rank == 0 { (ev.event.clone(), ev.dimension.to_string()) } else { (String::new(), String::new()) };
                rows.push([event, dim, (rank + 1).to_string(), format!("{:.3}", c.log_prob), c.text.clone()]);
            }
        }
        let widths: Vec<usize> = (0..5).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        let a = &self.aggregates;
        let _ = writeln!(
            out,
            "\n{}  ppl {:.2}  bleu {:.2}  distinct-1 {:.4}  distinct-2 {:.4}  coverage {:.2}",
            self.metadata.model_kind, a.ppl, a.bleu, a.distinct1, a.distinct2, a.coverage
        );
        out
    }
}

/// Checks that a corpus vocabulary matches the one a checkpoint was trained with.
pub fn check_vocab(expected_digest: &str, vocab: &Vocab) -> Result<()> {
    let found = vocab.digest();
    if found != expected_digest {
        return Err(Error::Digest { expected: expected_digest.to_owned(), found });
    }
    Ok(())
}

/// Decodes every test event and scores the results.
pub fn evaluate(model: &Model, vocab: &Vocab, test: &[Example], config: &DecodeConfig, checkpoint_digest: &str) -> Result<GenerationReport> {
    config.validate()?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Digest {
            expected: format!("{} tokens", model.config().vocab_size),
            found: format!("{} tokens", vocab.len()),
        });
    }
    let groups = group_by_event(test);
    let events: Vec<Vec<usize>> = groups.iter().map(|g| g.event.clone()).collect();
    let generations = generate_all(model, &events, config)?;
    let ppl = perplexity(model, test, config.ppl_samples, config.seed)?;
    let text = |ids: &[usize]| vocab.decode(ids).join(" ");

    let mut reports = Vec::with_capacity(groups.len());
    let mut pooled: Vec<Vec<usize>> = Vec::new();
    let (mut bleu_sum, mut cov_sum) = (0.0, 0usize);
    for (g, gens) in groups.iter().zip(&generations) {
        let raw: Vec<Vec<usize>> = gens.iter().map(|x| x.tokens.clone()).collect();
        let b = bleu(&raw, &g.references, config.bleu_max_n, config.bleu_aggregate)?;
        let cov = coverage(&raw, &g.references);
        let mut unique: IndexMap<Vec<usize>, Candidate> = IndexMap::new();
        for gen in gens {
            unique
                .entry(gen.tokens.clone())
                .and_modify(|c| {
                    c.count += 1;
                    c.log_prob = c.log_prob.max(gen.log_prob);
                })
                .or_insert_with(|| Candidate { text: text(&gen.tokens), log_prob: gen.log_prob, count: 1 });
        }
        let mut candidates: Vec<Candidate> = unique.into_values().collect();
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.text.cmp(&b.text)));
        bleu_sum += b;
        cov_sum += cov;
        pooled.extend(raw);
        reports.push(EventReport {
            event: text(&g.event),
            dimension: g.dimension,
            references: g.references.iter().map(|r| text(r)).collect(),
            candidates,
            bleu: b,
            coverage: cov,
        });
    }
    let n = groups.len().max(1) as f64;
    Ok(GenerationReport {
        metadata: ReportMetadata {
            model_kind: model.kind(),
            checkpoint_digest: checkpoint_digest.to_owned(),
            vocab_digest: vocab.digest(),
            decode: config.clone(),
        },
        aggregates: Aggregates {
            ppl: ppl.ppl,
            elbo_ppl: ppl.elbo_ppl,
            bleu: 100.0 * bleu_sum / n,
            distinct1: distinct_n(&pooled, 1)?,
            distinct2: distinct_n(&pooled, 2)?,
            coverage: cov_sum as f64 / n,
        },
        events: reports,
    })
}
