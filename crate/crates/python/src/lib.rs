//! Python bindings. Structured results cross over as JSON and come back as
//! plain dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PySequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cwvae_core::corpus::{BasicTokenizer, Dimension, Example, IfThenFormat, Tokenizer, Vocab, RESERVED};
use cwvae_core::evaluation::{self, BleuAggregate, DecodeConfig, StrategyKind};
use cwvae_core::models::{self as core_models, ExampleRef, LossWeights, ModelConfig, ModelKind, Noise, SeqRef, Stage};
use cwvae_core::pipeline::{self, RunPaths, TaskSource};
use cwvae_core::tensor::Tape;
use cwvae_core::training::{self, TrainConfig};

create_exception!(cwvae, CwvaeError, PyValueError, "Invalid input, configuration or checkpoint.");

fn err(e: cwvae_core::Error) -> PyErr {
    match e {
        cwvae_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => CwvaeError::new_err(other.to_string()),
    }
}

fn to_py(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| CwvaeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(|e| CwvaeError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(name: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.to_owned())).map_err(|e| CwvaeError::new_err(e.to_string()))
}

/// Reads `(event, target)` or `(event, target, context)` id sequences.
fn examples(items: &Bound<'_, PyAny>) -> PyResult<Vec<Example>> {
    let seq = items.cast::<PySequence>()?;
    let mut out = Vec::with_capacity(seq.len()?);
    for item in seq.try_iter()? {
        let item = item?;
        let parts = item.cast::<PySequence>()?;
        let n = parts.len()?;
        if !(2..=3).contains(&n) {
            return Err(PyValueError::new_err("examples are (event, target) or (event, target, context)"));
        }
        let context = match n {
            3 => parts.get_item(2)?.extract::<Option<Vec<usize>>>()?,
            _ => None,
        };
        out.push(Example {
            context,
            event: parts.get_item(0)?.extract()?,
            dimension: Dimension::XIntent,
            target: parts.get_item(1)?.extract()?,
        });
    }
    Ok(out)
}

fn placeholder_vocab(size: usize) -> PyResult<Vocab> {
    let tokens = RESERVED.iter().map(|s| s.to_string()).chain((RESERVED.len()..size).map(|i| format!("w{i}"))).collect();
    Vocab::from_tokens(tokens).map_err(err)
}

/// A model plus the vocabulary its ids refer to.
#[pyclass(module = "cwvae")]
struct Model {
    inner: core_models::Model,
    vocab: Vocab,
}

#[pymethods]
impl Model {
    /// Builds a fresh model. `config` is a JSON model configuration; the
    /// keyword arguments override it. Without `vocab` the tokens are named
    /// `w4`, `w5`, ….
    #[new]
    #[pyo3(signature = (kind=None, vocab_size=None, width=None, latent=None, seed=None, config=None, vocab=None))]
    fn new(
        kind: Option<&str>,
        vocab_size: Option<usize>,
        width: Option<usize>,
        latent: Option<usize>,
        seed: Option<u64>,
        config: Option<&str>,
        vocab: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let mut c: ModelConfig = from_json(config)?;
        if let Some(k) = kind {
            c.kind = k.parse::<ModelKind>().map_err(err)?;
        }
        if let Some(w) = width {
            c = ModelConfig { kind: c.kind, latent: c.latent, seed: c.seed, max_decode_len: c.max_decode_len, ..ModelConfig::small(c.kind, c.vocab_size, w, c.latent) };
        }
        if let Some(l) = latent {
            c.latent = l;
        }
        if let Some(s) = seed {
            c.seed = s;
        }
        let vocab = match vocab {
            Some(tokens) => Vocab::from_tokens(tokens).map_err(err)?,
            None => placeholder_vocab(vocab_size.unwrap_or(c.vocab_size))?,
        };
        c.vocab_size = vocab.len();
        Ok(Self { inner: core_models::Model::new(c).map_err(err)?, vocab })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, vocab) = cwvae_core::checkpoint::load(path).map_err(err)?;
        Ok(Self { inner, vocab })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cwvae_core::checkpoint::save(path, &self.inner, &self.vocab).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.config())
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.vocab.tokens().to_vec()
    }

    /// Hex digest of all parameter values.
    fn params_digest(&self) -> String {
        self.inner.params().digest()
    }

    /// Tokenizes and maps text to ids; unknown words become `<unk>`.
    fn encode(&self, text: &str) -> Vec<usize> {
        self.vocab.encode(&BasicTokenizer.tokenize(text))
    }

    fn decode(&self, ids: Vec<usize>) -> Vec<String> {
        self.vocab.decode(&ids)
    }

    /// `k` raw decodes for one event (text or ids), each a dict with
    /// `tokens`, `text` and `log_prob`.
    #[pyo3(signature = (event, k=10, seed=0, strategy="sample_greedy", beam_width=10))]
    fn generate(&self, py: Python<'_>, event: &Bound<'_, PyAny>, k: usize, seed: u64, strategy: &str, beam_width: usize) -> PyResult<Py<PyAny>> {
        let ids: Vec<usize> = match event.extract::<String>() {
            Ok(text) => self.encode(&text),
            Err(_) => event.extract()?,
        };
        let config = DecodeConfig { k, seed, beam_width, strategy: parse_enum::<StrategyKind>(strategy)?, ..DecodeConfig::default() };
        config.validate().map_err(err)?;
        let gens = py.detach(|| evaluation::generate_all(&self.inner, &[ids], &config)).map_err(err)?;
        #[derive(Serialize)]
        struct Out {
            tokens: Vec<usize>,
            text: String,
            log_prob: f64,
        }
        let out: Vec<Out> = gens
            .into_iter()
            .flatten()
            .map(|g| Out { text: self.vocab.decode(&g.tokens).join(" "), tokens: g.tokens, log_prob: g.log_prob })
            .collect();
        to_py(py, &out)
    }

    /// Importance-weighted and ELBO estimates of `log p(target | event)`.
    #[pyo3(signature = (event, target, k_samples=20, seed=0))]
    fn log_likelihood(&self, py: Python<'_>, event: Vec<usize>, target: Vec<usize>, k_samples: usize, seed: u64) -> PyResult<Py<PyAny>> {
        let ex = ExampleRef { event: SeqRef::new(&event), target: SeqRef::new(&target), context: None };
        let est = self.inner.inference().log_likelihood(ex, k_samples, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        to_py(py, &est)
    }

    #[pyo3(signature = (examples, k_samples=20, seed=0))]
    fn perplexity(&self, py: Python<'_>, examples: &Bound<'_, PyAny>, k_samples: usize, seed: u64) -> PyResult<Py<PyAny>> {
        let data = self::examples(examples)?;
        let r = py.detach(|| evaluation::perplexity(&self.inner, &data, k_samples, seed)).map_err(err)?;
        to_py(py, &r)
    }

    /// Loss breakdown of one batch with seeded noise. Pretraining needs contexts.
    #[pyo3(signature = (examples, stage="finetune", lam=0.1, seed=0))]
    fn loss(&self, py: Python<'_>, examples: &Bound<'_, PyAny>, stage: &str, lam: f64, seed: u64) -> PyResult<Py<PyAny>> {
        let batch = cwvae_core::corpus::Batch::new(self::examples(examples)?).map_err(err)?;
        let weights = match parse_enum::<Stage>(stage)? {
            Stage::Pretrain => LossWeights::pretrain(lam),
            Stage::Finetune => LossWeights::finetune(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<Noise> = (0..batch.len()).map(|_| Noise::sample(&mut rng, self.inner.config().latent)).collect();
        let mut tape = Tape::new();
        let bound = self.inner.params().bind_frozen(&mut tape);
        let (_, breakdown) = training::batch_loss(&self.inner, &mut tape, &bound, &batch, &noise, weights).map_err(err)?;
        to_py(py, &breakdown)
    }

    /// Trains in place with a JSON training configuration and returns the
    /// per-epoch records. The model's own architecture is kept.
    #[pyo3(signature = (train, dev=None, config=None))]
    fn fit(&mut self, py: Python<'_>, train: &Bound<'_, PyAny>, dev: Option<&Bound<'_, PyAny>>, config: Option<&str>) -> PyResult<Py<PyAny>> {
        let mut c: TrainConfig = from_json(config)?;
        c.model = self.inner.config().clone();
        c.validate().map_err(err)?;
        let train = examples(train)?;
        let dev = dev.map(examples).transpose()?.unwrap_or_default();
        let model = &mut self.inner;
        let report = py.detach(|| training::run_stage(&c, model, &train, &dev, None)).map_err(err)?;
        to_py(py, &report.epochs)
    }

    /// Generation report over `(event, target)` test pairs.
    #[pyo3(signature = (test, config=None))]
    fn evaluate(&self, py: Python<'_>, test: &Bound<'_, PyAny>, config: Option<&str>) -> PyResult<Py<PyAny>> {
        let decode: DecodeConfig = from_json(config)?;
        let test = examples(test)?;
        let report = py.detach(|| evaluation::evaluate(&self.inner, &self.vocab, &test, &decode, "")).map_err(err)?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?}, vocab={}, parameters={})", self.kind(), self.vocab.len(), self.parameter_count())
    }
}

/// Closed-form KL(q ‖ p) between diagonal Gaussians.
#[pyfunction]
fn kl_diag_gauss(mu_q: Vec<f64>, sigma_q: Vec<f64>, mu_p: Vec<f64>, sigma_p: Vec<f64>) -> PyResult<f64> {
    cwvae_core::latent::kl_values(&mu_q, &sigma_q, &mu_p, &sigma_p).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (candidate, references, max_n=4))]
fn sentence_bleu(candidate: Vec<String>, references: Vec<Vec<String>>, max_n: usize) -> PyResult<f64> {
    let refs: Vec<&[String]> = references.iter().map(Vec::as_slice).collect();
    evaluation::sentence_bleu(&candidate, &refs, max_n).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (candidates, references, max_n=4, aggregate="mean"))]
fn bleu(candidates: Vec<Vec<String>>, references: Vec<Vec<String>>, max_n: usize, aggregate: &str) -> PyResult<f64> {
    evaluation::bleu(&candidates, &references, max_n, parse_enum::<BleuAggregate>(aggregate)?).map_err(err)
}

#[pyfunction]
fn distinct_n(candidates: Vec<Vec<String>>, n: usize) -> PyResult<f64> {
    evaluation::distinct_n(&candidates, n).map_err(err)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    BasicTokenizer.tokenize(text)
}

fn task(data: PathBuf, format: &str, dim: Option<&str>, fraction: f64) -> PyResult<TaskSource> {
    let format: IfThenFormat = format.parse().map_err(err)?;
    let dim = dim.map(str::parse::<Dimension>).transpose().map_err(err)?;
    Ok(TaskSource { dim, fraction, ..TaskSource::new(data, format) })
}

/// Pretraining run from files; returns the run summary.
#[pyfunction]
#[pyo3(signature = (stories, out, data=None, format="event2mind", dim=None, fraction=1.0, config=None, glove=None))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    py: Python<'_>,
    stories: PathBuf,
    out: PathBuf,
    data: Option<PathBuf>,
    format: &str,
    dim: Option<&str>,
    fraction: f64,
    config: Option<&str>,
    glove: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let c: TrainConfig = from_json(config)?;
    let source = data.map(|d| task(d, format, dim, fraction)).transpose()?;
    let paths = RunPaths { glove, log: None };
    let outcome = py.detach(|| pipeline::pretrain(&c, &stories, source.as_ref(), &out, &paths)).map_err(err)?;
    to_py(py, &outcome)
}

/// Finetuning run from files, from `checkpoint` when given.
#[pyfunction]
#[pyo3(signature = (data, out, format="event2mind", dim=None, fraction=1.0, checkpoint=None, config=None, glove=None))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    format: &str,
    dim: Option<&str>,
    fraction: f64,
    checkpoint: Option<PathBuf>,
    config: Option<&str>,
    glove: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let c: TrainConfig = from_json(config)?;
    let source = task(data, format, dim, fraction)?;
    let paths = RunPaths { glove, log: None };
    let outcome = py.detach(|| pipeline::finetune(&c, &source, checkpoint.as_deref(), &out, &paths)).map_err(err)?;
    to_py(py, &outcome)
}

/// Generation report for a checkpoint on the test split of `data`.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, format="event2mind", dim=None, fraction=1.0, config=None))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, data: PathBuf, format: &str, dim: Option<&str>, fraction: f64, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let decode: DecodeConfig = from_json(config)?;
    let source = task(data, format, dim, fraction)?;
    let report = py.detach(|| pipeline::evaluate_checkpoint(&checkpoint, &source, &decode, None)).map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn cwvae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CwvaeError", m.py().get_type::<CwvaeError>())?;
    m.add("MODEL_KINDS", ModelKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(kl_diag_gauss, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(distinct_n, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
