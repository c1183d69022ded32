use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cwvae_core::corpus::{Dimension, IfThenFormat};
use cwvae_core::evaluation::DecodeConfig;
use cwvae_core::pipeline::{self, RunPaths, TaskSource};
use cwvae_core::training::TrainConfig;
use cwvae_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cwvae", version, about = "Train and evaluate If-Then inference models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on (context, event, target) triples cut from a story corpus.
    Pretrain {
        #[command(flatten)]
        common: TrainArgs,
        /// Story corpus, JSON Lines with a `sentences` list per line.
        #[arg(long)]
        stories: PathBuf,
        /// Task data whose training split joins the vocabulary.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Train on If-Then pairs, optionally starting from a checkpoint.
    Finetune {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        /// Starting checkpoint; omit to train from scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode candidates for free-text events or the test split's events.
    Generate {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        task: TaskArgs,
        /// Event text; repeatable. Overrides --data.
        #[arg(long)]
        event: Vec<String>,
    },
    /// Score a checkpoint on the test split: perplexity, BLEU, distinct-n.
    Eval {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model, noise and shuffle seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// GloVe text file for the embedding layer (fresh models only).
    #[arg(long)]
    glove: Option<PathBuf>,
    /// Per-epoch metrics log; defaults next to the checkpoint.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long, default_value = "event2mind")]
    format: IfThenFormat,
    /// Inference dimension to keep, e.g. xIntent.
    #[arg(long)]
    dim: Option<Dimension>,
    /// Share of base events to keep, e.g. 0.01 for a smoke run.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Input is already tokenized; split on whitespace only.
    #[arg(long)]
    pretokenized: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON decode configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Candidates per event.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report destination; the table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Vocabulary file the checkpoint must match.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

impl TaskArgs {
    fn source(&self, path: &Path) -> TaskSource {
        TaskSource { dim: self.dim, fraction: self.fraction, pretokenized: self.pretokenized, ..TaskSource::new(path, self.format) }
    }
}

impl TrainArgs {
    fn load(&self) -> Result<(TrainConfig, RunPaths)> {
        let mut config = match &self.config {
            Some(p) => TrainConfig::from_json(&cwvae_core::corpus::read_utf8(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            config.model.seed = s;
            config.eps_seed = s;
            config.shuffle_seed = s;
        }
        Ok((config, RunPaths { glove: self.glove.clone(), log: self.log.clone() }))
    }
}

impl DecodeArgs {
    fn load(&self) -> Result<DecodeConfig> {
        let mut config: DecodeConfig = match &self.config {
            Some(p) => serde_json::from_str(&cwvae_core::corpus::read_utf8(p)?).map_err(|e| Error::Config(e.to_string()))?,
            None => DecodeConfig::default(),
        };
        if let Some(k) = self.k {
            config.k = k;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(config)
    }

    fn vocab(&self) -> Result<Option<cwvae_core::corpus::Vocab>> {
        self.vocab.as_deref().map(pipeline::read_vocab).transpose()
    }

    fn emit(&self, json: &impl serde::Serialize, table: &str) -> Result<()> {
        print!("{table}");
        if let Some(p) = &self.out {
            std::fs::write(p, serde_json::to_string_pretty(json)?)?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, stories, data, task } => {
            let (config, paths) = common.load()?;
            let source = data.as_deref().map(|d| task.source(d));
            let outcome = pipeline::pretrain(&config, &stories, source.as_ref(), &common.out, &paths)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
        }
        Command::Finetune { common, data, task, checkpoint } => {
            let (config, paths) = common.load()?;
            let outcome = pipeline::finetune(&config, &task.source(&data), checkpoint.as_deref(), &common.out, &paths)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
        }
        Command::Generate { decode, data, task, event } => {
            let config = decode.load()?;
            let (model, vocab, _) = pipeline::load_checked(&decode.checkpoint, decode.vocab()?.as_ref())?;
            let events = match (event.is_empty(), &data) {
                (false, _) => event,
                (true, Some(d)) => pipeline::test_events(&task.source(d))?,
                (true, None) => return Err(Error::Config("give --event or --data".into())),
            };
            let gens = pipeline::generate_texts(&model, &vocab, &events, &config, task.pretokenized)?;
            let mut table = String::new();
            for g in &gens {
                table.push_str(&format!("{}\n", g.event));
                for c in &g.candidates {
                    table.push_str(&format!("  {:>9.3}  {}\n", c.log_prob, c.text));
                }
            }
            decode.emit(&gens, &table)?;
        }
        Command::Eval { decode, data, task } => {
            let config = decode.load()?;
            let report = pipeline::evaluate_checkpoint(&decode.checkpoint, &task.source(&data), &config, decode.vocab()?.as_ref())?;
            decode.emit(&report, &report.to_table())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
