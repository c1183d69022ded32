//! Objectives, Adam and the two-stage schedule.

use std::io::Write;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{batches, Batch, Example};
use crate::error::{Error, Result};
use crate::evaluation::{perplexity, DecodeConfig};
use crate::models::{LossWeights, Model, ModelConfig, Noise};
use crate::params::{Bound, ModelParams};
use crate::tensor::{Tape, Var};

pub use crate::models::Stage;

/// Optimization settings, read from JSON. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    /// Weight of the context-aware regularizer.
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps in total, if set.
    pub max_steps: Option<usize>,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Linear KL warm-up length in steps; 0 keeps the weight at 1.
    pub kl_anneal_steps: usize,
    /// Seed of the reparameterization noise.
    pub eps_seed: u64,
    /// Seed of the batch order.
    pub shuffle_seed: u64,
    /// Fraction of the training file to keep.
    pub data_fraction: f64,
    /// Importance samples for the per-epoch dev perplexity.
    pub dev_samples: usize,
    pub model: ModelConfig,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Finetune,
            lr: 0.001,
            lambda: 0.1,
            batch_size: 64,
            max_epochs: 20,
            max_steps: None,
            patience: 5,
            clip_norm: Some(5.0),
            kl_anneal_steps: 0,
            eps_seed: 0,
            shuffle_seed: 0,
            data_fraction: 1.0,
            dev_samples: 5,
            model: ModelConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config("data_fraction must lie in (0, 1]".into()));
        }
        if self.dev_samples == 0 {
            return Err(Error::Config("dev_samples must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Loss components averaged over the examples of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Negative log-likelihood per example.
    pub reconstruction: f64,
    pub kl_zc_prime: f64,
    /// KL of z, or of the single latent of the baselines.
    pub kl_z: f64,
    pub kl_context_reg: Option<f64>,
    /// The minimized quantity.
    pub total: f64,
    pub examples: usize,
    /// Predicted tokens, EOS included.
    pub tokens: usize,
}

impl LossBreakdown {
    pub fn reconstruction_per_token(&self) -> f64 {
        self.reconstruction * self.examples as f64 / self.tokens as f64
    }

    /// Example-weighted mean of several breakdowns.
    pub fn merge(parts: &[LossBreakdown]) -> LossBreakdown {
        let n: usize = parts.iter().map(|p| p.examples).sum();
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| {
            parts.iter().map(|p| f(p) * p.examples as f64).sum::<f64>() / n.max(1) as f64
        };
        let has_ctx = parts.iter().any(|p| p.kl_context_reg.is_some());
        LossBreakdown {
            reconstruction: avg(&|p| p.reconstruction),
            kl_zc_prime: avg(&|p| p.kl_zc_prime),
            kl_z: avg(&|p| p.kl_z),
            kl_context_reg: has_ctx.then(|| avg(&|p| p.kl_context_reg.unwrap_or(0.0))),
            total: avg(&|p| p.total),
            examples: n,
            tokens: parts.iter().map(|p| p.tokens).sum(),
        }
    }
}

/// Batch objective as a tape node plus its numeric breakdown.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    batch: &Batch,
    noise: &[Noise],
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if noise.len() != batch.len() {
        return Err(Error::contract(format!("{} noise draws for {} examples", noise.len(), batch.len())));
    }
    partial_loss(model, tape, bound, batch, 0..batch.len(), noise, weights)
}

/// Loss of the examples in `range`, each weighted by 1/|batch|.
fn partial_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    batch: &Batch,
    range: Range<usize>,
    noise: &[Noise],
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let n = batch.len() as f64;
    let mut total = None;
    let mut sums = LossBreakdown { examples: range.len(), ..LossBreakdown::default() };
    for i in range {
        let terms = model.example_loss(tape, bound, batch.item(i), &noise[i], weights)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        sums.reconstruction += tape.scalar(terms.reconstruction) / n;
        sums.kl_zc_prime += value(terms.kl_context_aware) / n;
        sums.kl_z += value(terms.kl_semantic) / n;
        if let Some(kl) = terms.kl_context {
            *sums.kl_context_reg.get_or_insert(0.0) += tape.scalar(kl) / n;
        }
        sums.total += tape.scalar(terms.total) / n;
        sums.tokens += terms.tokens;
        total = Some(match total {
            None => terms.total,
            Some(t) => tape.add(t, terms.total)?,
        });
    }
    let total = tape.scale(total.ok_or_else(|| Error::contract("empty batch"))?, 1.0 / n)?;
    Ok((total, sums))
}

/// Examples per gradient work unit. Fixed so the summation order, and hence
/// every bit of the result, does not depend on the number of threads.
const GRAD_CHUNK: usize = 4;

/// Writes the gradient of the batch objective into the gradient buffers of
/// `model`, replacing what was there. Chunks of the batch run in parallel.
pub fn accumulate_batch_gradients(model: &mut Model, batch: &Batch, noise: &[Noise], weights: LossWeights) -> Result<LossBreakdown> {
    if noise.len() != batch.len() {
        return Err(Error::contract(format!("{} noise draws for {} examples", noise.len(), batch.len())));
    }
    let shared: &Model = model;
    let ranges: Vec<Range<usize>> = (0..batch.len()).step_by(GRAD_CHUNK).map(|s| s..(s + GRAD_CHUNK).min(batch.len())).collect();
    let run = |range: Range<usize>| -> Result<(Vec<Vec<f64>>, LossBreakdown)> {
        let mut tape = Tape::new();
        let bound = shared.params().bind(&mut tape);
        let (loss, part) = partial_loss(shared, &mut tape, &bound, batch, range, noise, weights)?;
        tape.backward(loss)?;
        let grads = bound
            .vars()
            .iter()
            .zip(shared.params().iter())
            .map(|(&v, (_, t))| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((grads, part))
    };
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get());
    let results: Vec<Result<(Vec<Vec<f64>>, LossBreakdown)>> = if workers == 1 || ranges.len() == 1 {
        ranges.into_iter().map(run).collect()
    } else {
        std::thread::scope(|scope| {
            let run = &run;
            let per = ranges.len().div_ceil(workers);
            let handles: Vec<_> = ranges
                .chunks(per)
                .map(|group| {
                    let group = group.to_vec();
                    scope.spawn(move || group.into_iter().map(run).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let mut total: Option<Vec<Vec<f64>>> = None;
    let mut parts = LossBreakdown::default();
    for r in results {
        let (grads, part) = r?;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => acc.iter_mut().flatten().zip(grads.iter().flatten()).for_each(|(a, g)| *a += g),
        }
        parts.reconstruction += part.reconstruction;
        parts.kl_zc_prime += part.kl_zc_prime;
        parts.kl_z += part.kl_z;
        if let Some(k) = part.kl_context_reg {
            *parts.kl_context_reg.get_or_insert(0.0) += k;
        }
        parts.total += part.total;
        parts.examples += part.examples;
        parts.tokens += part.tokens;
    }
    let params = model.params_mut();
    params.zero_grad();
    for ((_, t), g) in params.iter_mut().zip(total.unwrap_or_default()) {
        t.accumulate_grad(&g)?;
    }
    Ok(parts)
}

/// Finetune ELBO loss; the batch must carry no contexts.
pub fn finetune_loss(model: &Model, tape: &mut Tape, bound: &Bound, batch: &Batch, noise: &[Noise]) -> Result<(Var, LossBreakdown)> {
    if batch.has_context() {
        return Err(Error::contract("finetune batch carries contexts"));
    }
    batch_loss(model, tape, bound, batch, noise, LossWeights::finetune())
}

/// ELBO loss plus `λ·KL(q(z_c|x,c) ‖ q(z_c'|x,y))`; the batch must carry contexts.
pub fn pretrain_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    batch: &Batch,
    noise: &[Noise],
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    if !batch.has_context() {
        return Err(Error::contract("pretrain batch lacks contexts"));
    }
    batch_loss(model, tape, bound, batch, noise, LossWeights::pretrain(lambda))
}

/// Bias-corrected Adam over every tensor of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradient buffers of `params`.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!("optimizer tracks {} tensors, got {}", self.m.len(), params.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((name, tensor), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if tensor.numel() != m.len() {
                return Err(Error::Shape(format!("optimizer state of {name} has {} entries", m.len())));
            }
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else { continue };
            for (i, (x, g)) in tensor.data_mut().iter_mut().zip(grad).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradient buffers.
pub fn grad_norm(params: &ModelParams) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|x| x * s).collect::<Vec<_>>()) {
                t.zero_grad();
                t.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}

/// Optimizer, noise stream and step counter of one stage.
pub struct Trainer {
    config: TrainConfig,
    adam: Adam,
    eps_rng: ChaCha8Rng,
    steps: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Model) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.params(), config.lr);
        let eps_rng = ChaCha8Rng::seed_from_u64(config.eps_seed);
        Ok(Self { config, adam, eps_rng, steps: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// KL multiplier for the next step.
    pub fn kl_weight(&self) -> f64 {
        match self.config.kl_anneal_steps {
            0 => 1.0,
            n => ((self.steps + 1) as f64 / n as f64).min(1.0),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { stage: self.config.stage, lambda: self.config.lambda, kl_weight: self.kl_weight() }
    }

    /// One forward/backward pass and Adam update on `batch`.
    pub fn step(&mut self, model: &mut Model, batch: &Batch) -> Result<LossBreakdown> {
        match (self.config.stage, batch.has_context()) {
            (Stage::Pretrain, false) => return Err(Error::contract("pretrain batch lacks contexts")),
            (Stage::Finetune, true) => return Err(Error::contract("finetune batch carries contexts")),
            _ => {}
        }
        let dim = model.config().latent;
        let noise: Vec<Noise> = (0..batch.len()).map(|_| Noise::sample(&mut self.eps_rng, dim)).collect();
        let breakdown = accumulate_batch_gradients(model, batch, &noise, self.weights())?;
        let params = model.params_mut();
        if let Some(c) = self.config.clip_norm {
            clip_grad_norm(params, c);
        }
        self.adam.step(params)?;
        self.steps += 1;
        Ok(breakdown)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Reconstruction loss per token.
    pub recon: f64,
    pub kl_zc_prime: f64,
    pub kl_z: f64,
    pub kl_ctx: Option<f64>,
    pub dev_ppl: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_ppl: Option<f64>,
    pub steps: usize,
}

/// Trains one stage. With a dev set the best-dev weights are restored at the
/// end and training stops after `patience` epochs without improvement.
pub fn run_stage(
    config: &TrainConfig,
    model: &mut Model,
    train: &[Example],
    dev: &[Example],
    mut log: Option<&mut dyn Write>,
) -> Result<StageReport> {
    if train.is_empty() {
        return Err(Error::contract("empty training corpus"));
    }
    let mut trainer = Trainer::new(config.clone(), model)?;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut stale = 0;
    'epochs: for epoch in 1..=config.max_epochs {
        let mut parts = Vec::new();
        for batch in batches(train, config.batch_size, config.shuffle_seed.wrapping_add(epoch as u64))? {
            if config.max_steps.is_some_and(|m| trainer.steps() >= m) {
                break;
            }
            parts.push(trainer.step(model, &batch?)?);
        }
        if parts.is_empty() {
            break;
        }
        let agg = LossBreakdown::merge(&parts);
        let dev_ppl = match dev.is_empty() {
            true => None,
            false => Some(perplexity(model, dev, config.dev_samples, config.eps_seed ^ epoch as u64)?.ppl),
        };
        let record = EpochRecord {
            epoch,
            stage: config.stage,
            recon: agg.reconstruction_per_token(),
            kl_zc_prime: agg.kl_zc_prime,
            kl_z: agg.kl_z,
            kl_ctx: agg.kl_context_reg,
            dev_ppl,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w)?;
        }
        epochs.push(record);
        if let Some(ppl) = dev_ppl {
            if best.as_ref().is_none_or(|(_, b, _)| ppl < *b) {
                best = Some((epoch, ppl, model.params().clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break 'epochs;
                }
            }
        }
        if config.max_steps.is_some_and(|m| trainer.steps() >= m) {
            break;
        }
    }
    let (best_epoch, best_dev_ppl) = match best {
        Some((epoch, ppl, params)) => {
            *model.params_mut() = params;
            (Some(epoch), Some(ppl))
        }
        None => (None, None),
    };
    Ok(StageReport { epochs, best_epoch, best_dev_ppl, steps: trainer.steps() })
}
