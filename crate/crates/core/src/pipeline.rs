//! File-to-checkpoint workflows shared by the command line and the bindings.
//!
//! Task data is either one If-Then file, split by base event, or a directory
//! holding `train.csv`, `dev.csv` and `test.csv`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint;
use crate::corpus::{
    build_auxiliary, build_vocab, load_glove, load_ifthen, load_stories, split, subsample, BasicTokenizer,
    Dimension, Example, IfThenFormat, RawExample, Split, SplitSpec, Tokenizer, Vocab, WhitespaceTokenizer,
    DEFAULT_MIN_COUNT,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, generate_all, Candidate, DecodeConfig, GenerationReport};
use crate::models::{Model, Stage};
use crate::training::{run_stage, StageReport, TrainConfig};

/// Stories longer than this many words are dropped from the auxiliary set.
pub const MAX_STORY_WORDS: usize = 1000;

/// Held-out share of the auxiliary set used for dev perplexity.
pub const AUX_DEV_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct TaskSource {
    pub path: PathBuf,
    pub format: IfThenFormat,
    /// Keep only this dimension; one model is trained per dimension.
    pub dim: Option<Dimension>,
    pub split: SplitSpec,
    /// Share of base events kept, drawn with the split seed before splitting.
    pub fraction: f64,
    /// Split on whitespace only.
    pub pretokenized: bool,
}

impl TaskSource {
    pub fn new(path: impl Into<PathBuf>, format: IfThenFormat) -> Self {
        Self { path: path.into(), format, dim: None, split: SplitSpec::default(), fraction: 1.0, pretokenized: false }
    }

    fn tokenizer(&self) -> Box<dyn Tokenizer> {
        tokenizer(self.pretokenized)
    }

    fn read(&self, path: &Path) -> Result<Vec<RawExample>> {
        let mut rows = load_ifthen(path, self.format, self.tokenizer().as_ref())?;
        if let Some(d) = self.dim {
            rows.retain(|r| r.dimension == d);
        }
        let kept = subsample(&group_by_event(rows), self.fraction, self.split.seed);
        Ok(kept.into_iter().flatten().collect())
    }

    /// Loads and splits the task data. Pairs sharing a base event always land
    /// in the same part.
    pub fn load(&self) -> Result<Split<RawExample>> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        let parts = if self.path.is_dir() {
            let part = |name: &str| {
                let p = self.path.join(name);
                match p.exists() {
                    true => self.read(&p),
                    false => Ok(Vec::new()),
                }
            };
            Split { train: part("train.csv")?, dev: part("dev.csv")?, test: part("test.csv")? }
        } else {
            split_by_event(self.read(&self.path)?, &self.split)?
        };
        if parts.train.is_empty() && parts.dev.is_empty() && parts.test.is_empty() {
            let which = self.dim.map_or(String::new(), |d| format!(" for dimension {d}"));
            return Err(Error::Contract(format!("no If-Then records{which} in {}", self.path.display())));
        }
        Ok(parts)
    }
}

fn tokenizer(pretokenized: bool) -> Box<dyn Tokenizer> {
    match pretokenized {
        true => Box::new(WhitespaceTokenizer),
        false => Box::new(BasicTokenizer),
    }
}

fn group_by_event(rows: Vec<RawExample>) -> Vec<Vec<RawExample>> {
    let mut groups: indexmap::IndexMap<Vec<String>, Vec<RawExample>> = indexmap::IndexMap::new();
    for r in rows {
        groups.entry(r.event.clone()).or_default().push(r);
    }
    groups.into_values().collect()
}

fn split_by_event(rows: Vec<RawExample>, spec: &SplitSpec) -> Result<Split<RawExample>> {
    let s = split(&group_by_event(rows), spec)?;
    let flat = |g: Vec<Vec<RawExample>>| g.into_iter().flatten().collect();
    Ok(Split { train: flat(s.train), dev: flat(s.dev), test: flat(s.test) })
}

fn encode_all(vocab: &Vocab, rows: &[RawExample]) -> Vec<Example> {
    rows.iter().map(|r| vocab.encode_example(r)).collect()
}

/// Summary of one training run.
#[derive(Clone, Debug, Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub vocab_size: usize,
    pub glove_coverage: Option<f64>,
    /// Parameter digest the stage started from.
    pub initial_params: String,
    pub final_params: String,
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
    pub best_epoch: Option<usize>,
    pub best_dev_ppl: Option<f64>,
    pub epochs: usize,
    pub steps: usize,
}

/// Optional inputs and outputs common to both stages.
#[derive(Clone, Debug, Default)]
pub struct RunPaths {
    pub glove: Option<PathBuf>,
    /// Metrics log destination; defaults to the checkpoint path with `.metrics.jsonl`.
    pub log: Option<PathBuf>,
}

fn log_path(out: &Path, paths: &RunPaths) -> PathBuf {
    paths.log.clone().unwrap_or_else(|| out.with_extension("metrics.jsonl"))
}

fn new_model(config: &TrainConfig, vocab: &Vocab, glove: Option<&Path>) -> Result<(Model, Option<f64>)> {
    let mut model_config = config.model.clone();
    model_config.vocab_size = vocab.len();
    let mut model = Model::new(model_config)?;
    let coverage = match glove {
        Some(p) => {
            let init = load_glove(p, vocab, model.config().embedding_dim, model.config().seed)?;
            model.set_embedding(&init.table)?;
            Some(init.coverage)
        }
        None => None,
    };
    Ok((model, coverage))
}

#[allow(clippy::too_many_arguments)]
fn train_and_save(
    config: &TrainConfig,
    mut model: Model,
    vocab: &Vocab,
    train: &[Example],
    dev: &[Example],
    out: &Path,
    paths: &RunPaths,
    glove_coverage: Option<f64>,
) -> Result<StageOutcome> {
    let initial_params = model.params().digest();
    let mut log = BufWriter::new(File::create(log_path(out, paths))?);
    let report: StageReport = run_stage(config, &mut model, train, dev, Some(&mut log))?;
    log.flush()?;
    checkpoint::save(out, &model, vocab)?;
    write_vocab(&out.with_extension("vocab"), vocab)?;
    Ok(StageOutcome {
        stage: config.stage,
        train_examples: train.len(),
        dev_examples: dev.len(),
        vocab_size: vocab.len(),
        glove_coverage,
        initial_params,
        final_params: model.params().digest(),
        checkpoint: out.to_path_buf(),
        checkpoint_digest: checkpoint::file_digest(out)?,
        best_epoch: report.best_epoch,
        best_dev_ppl: report.best_dev_ppl,
        epochs: report.epochs.len(),
        steps: report.steps,
    })
}

/// Pretrains a fresh CWVAE on story triples. The vocabulary also covers the
/// task training split when given, so the checkpoint can be finetuned.
pub fn pretrain(config: &TrainConfig, stories: &Path, task: Option<&TaskSource>, out: &Path, paths: &RunPaths) -> Result<StageOutcome> {
    let config = TrainConfig { stage: Stage::Pretrain, ..config.clone() };
    config.validate()?;
    let tok = tokenizer(task.is_some_and(|t| t.pretokenized));
    let aux = build_auxiliary(&load_stories(stories)?, MAX_STORY_WORDS, tok.as_ref());
    if aux.examples.is_empty() {
        return Err(Error::Contract(format!("no five-sentence windows in {}", stories.display())));
    }
    let aux_rows = subsample(&aux.examples, config.data_fraction, config.shuffle_seed);
    let task_train = match task {
        Some(t) => t.load()?.train,
        None => Vec::new(),
    };
    let vocab = build_vocab(aux_rows.iter().chain(&task_train), DEFAULT_MIN_COUNT);
    let parts = split(
        &aux_rows,
        &SplitSpec { train: 1.0 - AUX_DEV_FRACTION, dev: AUX_DEV_FRACTION, test: 0.0, seed: 0 },
    )?;
    let (model, coverage) = new_model(&config, &vocab, paths.glove.as_deref())?;
    train_and_save(&config, model, &vocab, &encode_all(&vocab, &parts.train), &encode_all(&vocab, &parts.dev), out, paths, coverage)
}

/// Finetunes on task data, from `init` when given, otherwise from scratch.
/// A checkpoint fixes both the architecture and the vocabulary.
pub fn finetune(config: &TrainConfig, task: &TaskSource, init: Option<&Path>, out: &Path, paths: &RunPaths) -> Result<StageOutcome> {
    let config = TrainConfig { stage: Stage::Finetune, ..config.clone() };
    config.validate()?;
    let parts = task.load()?;
    let train_rows = subsample(&parts.train, config.data_fraction, config.shuffle_seed);
    let (model, vocab, coverage) = match init {
        Some(p) => {
            let (model, vocab) = checkpoint::load(p)?;
            (model, vocab, None)
        }
        None => {
            let vocab = build_vocab(&train_rows, DEFAULT_MIN_COUNT);
            let (model, coverage) = new_model(&config, &vocab, paths.glove.as_deref())?;
            (model, vocab, coverage)
        }
    };
    train_and_save(&config, model, &vocab, &encode_all(&vocab, &train_rows), &encode_all(&vocab, &parts.dev), out, paths, coverage)
}

/// Reads a vocabulary file with one token per line, in id order.
pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = crate::corpus::read_utf8(path)?;
    Vocab::from_tokens(text.lines().map(str::to_owned).collect())
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in vocab.tokens() {
        writeln!(w, "{t}")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, optionally checking it against an expected vocabulary.
pub fn load_checked(checkpoint_path: &Path, expected_vocab: Option<&Vocab>) -> Result<(Model, Vocab, String)> {
    let (model, vocab) = checkpoint::load(checkpoint_path)?;
    if let Some(v) = expected_vocab {
        crate::evaluation::check_vocab(&vocab.digest(), v)?;
    }
    Ok((model, vocab, checkpoint::file_digest(checkpoint_path)?))
}

/// Scores a checkpoint on the test split of `task`.
pub fn evaluate_checkpoint(checkpoint_path: &Path, task: &TaskSource, decode: &DecodeConfig, expected_vocab: Option<&Vocab>) -> Result<GenerationReport> {
    let (model, vocab, digest) = load_checked(checkpoint_path, expected_vocab)?;
    let test = task.load()?.test;
    if test.is_empty() {
        return Err(Error::Contract("test split is empty".into()));
    }
    evaluate(&model, &vocab, &encode_all(&vocab, &test), decode, &digest)
}

/// Candidates for one free-text event.
#[derive(Clone, Debug, Serialize)]
pub struct EventGenerations {
    pub event: String,
    pub candidates: Vec<Candidate>,
}

/// Decodes `k` candidates per event; candidates are raw, in decode order.
pub fn generate_texts(model: &Model, vocab: &Vocab, events: &[String], decode: &DecodeConfig, pretokenized: bool) -> Result<Vec<EventGenerations>> {
    decode.validate()?;
    let tok = tokenizer(pretokenized);
    let ids: Vec<Vec<usize>> = events
        .iter()
        .map(|e| {
            let t = tok.tokenize(e);
            match t.is_empty() {
                true => Err(Error::Contract("empty event".into())),
                false => Ok(vocab.encode(&t)),
            }
        })
        .collect::<Result<_>>()?;
    let gens = generate_all(model, &ids, decode)?;
    Ok(events
        .iter()
        .zip(gens)
        .map(|(e, g)| EventGenerations {
            event: e.clone(),
            candidates: g
                .into_iter()
                .map(|x| Candidate { text: vocab.decode(&x.tokens).join(" "), log_prob: x.log_prob, count: 1 })
                .collect(),
        })
        .collect())
}

/// Distinct base events of the test split, in file order.
pub fn test_events(task: &TaskSource) -> Result<Vec<String>> {
    let mut seen = indexmap::IndexSet::new();
    for r in task.load()?.test {
        seen.insert(r.event.join(" "));
    }
    Ok(seen.into_iter().collect())
}
