//! CWVAE and the three baseline generators.
//!
//! All variants share the embedding table, the biGRU encoder and an
//! attention decoder whose GRU input is `[E_y; latent]` with the decoder
//! state carried as the recurrent state. The variants differ only in the
//! latent machinery:
//!
//! | kind                  | latent                            | KL terms |
//! |-----------------------|-----------------------------------|----------|
//! | `rnn_seq2seq`         | none                              | 0        |
//! | `variational_seq2seq` | z from the last encoder state     | 1        |
//! | `vrnmt`               | z from one ABI, prior from h^x    | 1        |
//! | `cwvae`               | z_c, z_c', z from five ABI blocks | 2 (+1)   |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Example, BOS, EOS, PAD};
use crate::encoder::{BiGruEncoder, EncodedSeq, GruParams};
use crate::error::{Error, Result};
use crate::latent::{abi, initial_sigma_bias, kl_diag_gauss, reparam_sample, AbiDims, AbiParams, GaussianParams};
use crate::params::{Bound, Linear, ModelParams, ParamId};
use crate::tensor::{log_sum_exp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RnnSeq2seq,
    VariationalSeq2seq,
    Vrnmt,
    Cwvae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::RnnSeq2seq,
        ModelKind::VariationalSeq2seq,
        ModelKind::Vrnmt,
        ModelKind::Cwvae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::RnnSeq2seq => "rnn_seq2seq",
            ModelKind::VariationalSeq2seq => "variational_seq2seq",
            ModelKind::Vrnmt => "vrnmt",
            ModelKind::Cwvae => "cwvae",
        }
    }

    pub fn has_latent(self) -> bool {
        self != ModelKind::RnnSeq2seq
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// Hidden units per encoder direction and of the decoder.
    pub hidden: usize,
    pub latent: usize,
    /// Width of the ABI attention projections `W_a`, `W_b`.
    pub abi_attention: usize,
    /// Width of the ABI projection `h_z`.
    pub abi_hidden: usize,
    pub decoder_attention: usize,
    /// One encoder for context, event and target.
    pub tie_encoders: bool,
    pub init_scale: f64,
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cwvae,
            vocab_size: 0,
            embedding_dim: 300,
            hidden: 300,
            latent: 40,
            abi_attention: 100,
            abi_hidden: 100,
            decoder_attention: 100,
            tie_encoders: true,
            init_scale: 0.08,
            max_decode_len: 20,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for tests and synthetic experiments.
    pub fn small(kind: ModelKind, vocab_size: usize, width: usize, latent: usize) -> Self {
        Self {
            kind,
            vocab_size,
            embedding_dim: width,
            hidden: width,
            latent,
            abi_attention: width,
            abi_hidden: width,
            decoder_attention: width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("abi_attention", self.abi_attention),
            ("abi_hidden", self.abi_hidden),
            ("decoder_attention", self.decoder_attention),
            ("max_decode_len", self.max_decode_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocabulary must hold more than the reserved tokens".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Training stage. Pretraining consumes (context, event, target) triples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

/// Standard-normal noise for one example's reparameterized samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    /// ε for z_c'.
    pub context_aware: Vec<f64>,
    /// ε for z (the only latent of the single-latent variants).
    pub semantic: Vec<f64>,
}

impl Noise {
    pub fn zeros(dim: usize) -> Self {
        Self { context_aware: vec![0.0; dim], semantic: vec![0.0; dim] }
    }

    pub fn sample(rng: &mut impl Rng, dim: usize) -> Self {
        let mut draw = || (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let context_aware = draw();
        let semantic = draw();
        Self { context_aware, semantic }
    }
}

/// Token ids with an optional validity mask.
#[derive(Clone, Copy, Debug)]
pub struct SeqRef<'a> {
    pub ids: &'a [usize],
    pub mask: Option<&'a [bool]>,
}

impl<'a> SeqRef<'a> {
    pub fn new(ids: &'a [usize]) -> Self {
        Self { ids, mask: None }
    }

    pub fn valid(&self) -> Vec<usize> {
        match self.mask {
            Some(m) => self.ids.iter().zip(m).filter(|(_, &m)| m).map(|(&i, _)| i).collect(),
            None => self.ids.to_vec(),
        }
    }
}

/// Borrowed view of one example, possibly a padded batch row.
#[derive(Clone, Copy, Debug)]
pub struct ExampleRef<'a> {
    pub event: SeqRef<'a>,
    pub target: SeqRef<'a>,
    pub context: Option<SeqRef<'a>>,
}

impl<'a> From<&'a Example> for ExampleRef<'a> {
    fn from(e: &'a Example) -> Self {
        Self {
            event: SeqRef::new(&e.event),
            target: SeqRef::new(&e.target),
            context: e.context.as_deref().map(SeqRef::new),
        }
    }
}

impl Batch {
    /// Row `i` of the padded batch.
    pub fn item(&self, i: usize) -> ExampleRef<'_> {
        fn row(p: &crate::corpus::Padded, i: usize) -> SeqRef<'_> {
            SeqRef { ids: &p.ids[i], mask: Some(&p.mask[i]) }
        }
        ExampleRef {
            event: row(&self.event, i),
            target: row(&self.target, i),
            context: self.context.as_ref().map(|c| row(c, i)),
        }
    }
}

/// Per-term weights of the minimized objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub stage: Stage,
    /// Coefficient of KL(q(z_c|x,c) ‖ q(z_c'|x,y)) during pretraining.
    pub lambda: f64,
    /// Multiplier on the ELBO KL terms (annealing); 1 means the plain ELBO.
    pub kl_weight: f64,
}

impl LossWeights {
    pub fn finetune() -> Self {
        Self { stage: Stage::Finetune, lambda: 0.0, kl_weight: 1.0 }
    }

    pub fn pretrain(lambda: f64) -> Self {
        Self { stage: Stage::Pretrain, lambda, kl_weight: 1.0 }
    }
}

/// Loss components of one example as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// `−log p(y | x, z, z_c')`, summed over target tokens and EOS.
    pub reconstruction: Var,
    pub kl_context_aware: Option<Var>,
    /// KL of z (or of the single latent of the baselines).
    pub kl_semantic: Option<Var>,
    pub kl_context: Option<Var>,
    pub total: Var,
    /// Predicted tokens, EOS included.
    pub tokens: usize,
}

/// Posterior of the CWVAE latents.
#[derive(Clone, Copy, Debug)]
pub struct Recognition {
    /// `q(z_c | x, c)`, present iff a context was given.
    pub context: Option<GaussianParams>,
    /// `q(z_c' | x, y)`
    pub context_aware: GaussianParams,
    /// `q(z | x, z_c')`
    pub semantic: GaussianParams,
    pub zc_prime: Var,
    pub z: Var,
}

/// Conditional prior of the CWVAE latents.
#[derive(Clone, Copy, Debug)]
pub struct Prior {
    /// `p(z_c' | x)`
    pub context_aware: GaussianParams,
    /// `p(z | x, z_c')`
    pub semantic: GaussianParams,
    pub zc_prime: Var,
    pub z: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CwvaeNets {
    pub context: AbiParams,
    pub context_aware: AbiParams,
    pub semantic: AbiParams,
    pub prior_context_aware: AbiParams,
    pub prior_semantic: AbiParams,
}

#[derive(Clone, Copy, Debug)]
#[allow(clippy::large_enum_variant)]
enum LatentNets {
    None,
    Variational { mu: Linear, sigma: Linear },
    Vrnmt { posterior: AbiParams, prior: AbiParams },
    Cwvae(CwvaeNets),
}

#[derive(Clone, Copy, Debug)]
struct Decoder {
    cell: GruParams,
    init: Linear,
    attn_state: ParamId,
    attn_keys: ParamId,
    attn_v: ParamId,
    out: Linear,
    latent_width: usize,
}

/// Recurrent state of the attention decoder.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    /// `[1 × d_h]`
    pub s: Var,
    /// Context vector `Σ α_i h^x_i` of the last step.
    pub e: Option<Var>,
    /// Attention weights of the last step, `[l_x × 1]`.
    pub alpha: Option<Var>,
    pub prev_token_embedding: Option<Var>,
    /// Attention keys `h^x · W_keys`, computed once per event.
    keys: Var,
}

/// One decoded target with its log-probability under the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

/// How candidates are produced for an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeStrategy {
    /// Draw latents from the prior, greedy-decode each draw.
    SampleGreedy,
    /// Latents at their prior means, beam search of the given width.
    Beam { width: usize },
}

/// Importance-sampled and ELBO estimates of `log p(y | x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodEstimate {
    pub iwae: f64,
    pub elbo: f64,
    pub tokens: usize,
}

/// One model variant: weights plus the wiring that reads them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    embedding: ParamId,
    encoder_x: BiGruEncoder,
    encoder_y: BiGruEncoder,
    encoder_c: BiGruEncoder,
    latent: LatentNets,
    decoder: Decoder,
}

/// Builds a freshly initialized model of `config.kind`.
pub fn build_variant(config: ModelConfig) -> Result<Model> {
    Model::new(config)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = config.init_scale;
        let (e, h, dz) = (config.embedding_dim, config.hidden, config.latent);
        let mut params = ModelParams::new();
        let embedding = params.uniform("embedding", vec![config.vocab_size, e], 0.1, &mut rng);
        params.get_mut(embedding).data_mut()[PAD * e..(PAD + 1) * e].fill(0.0);

        let kind = config.kind;
        let encoder_x = BiGruEncoder::new(&mut params, "encoder", e, h, scale, &mut rng);
        let needs_y = matches!(kind, ModelKind::Vrnmt | ModelKind::Cwvae);
        let encoder_y = if config.tie_encoders || !needs_y {
            encoder_x
        } else {
            BiGruEncoder::new(&mut params, "encoder_y", e, h, scale, &mut rng)
        };
        let encoder_c = if config.tie_encoders || kind != ModelKind::Cwvae {
            encoder_x
        } else {
            BiGruEncoder::new(&mut params, "encoder_c", e, h, scale, &mut rng)
        };
        let width = encoder_x.width();
        let seq_dims = AbiDims { d_a: width, d_b: width, attention: config.abi_attention, hidden: config.abi_hidden, latent: dz };
        let latent_dims = AbiDims { d_a: dz, ..seq_dims };
        let latent = match kind {
            ModelKind::RnnSeq2seq => LatentNets::None,
            ModelKind::VariationalSeq2seq => {
                let mu = Linear::new(&mut params, "variational.mu", width, dz, scale, &mut rng);
                let sigma = Linear::new(&mut params, "variational.sigma", width, dz, scale, &mut rng);
                params.get_mut(sigma.bias).data_mut().fill(initial_sigma_bias());
                LatentNets::Variational { mu, sigma }
            }
            ModelKind::Vrnmt => LatentNets::Vrnmt {
                posterior: AbiParams::new(&mut params, "vrnmt.posterior", seq_dims, scale, &mut rng),
                prior: AbiParams::new(&mut params, "vrnmt.prior", seq_dims, scale, &mut rng),
            },
            ModelKind::Cwvae => LatentNets::Cwvae(CwvaeNets {
                context: AbiParams::new(&mut params, "recognition.context", seq_dims, scale, &mut rng),
                context_aware: AbiParams::new(&mut params, "recognition.context_aware", seq_dims, scale, &mut rng),
                semantic: AbiParams::new(&mut params, "recognition.semantic", latent_dims, scale, &mut rng),
                prior_context_aware: AbiParams::new(&mut params, "prior.context_aware", seq_dims, scale, &mut rng),
                prior_semantic: AbiParams::new(&mut params, "prior.semantic", latent_dims, scale, &mut rng),
            }),
        };
        let latent_width = match kind {
            ModelKind::RnnSeq2seq => 0,
            ModelKind::VariationalSeq2seq | ModelKind::Vrnmt => dz,
            ModelKind::Cwvae => 2 * dz,
        };
        let da = config.decoder_attention;
        let decoder = Decoder {
            cell: GruParams::new(&mut params, "decoder.cell", e + latent_width, h, scale, &mut rng),
            init: Linear::new(&mut params, "decoder.init", width, h, scale, &mut rng),
            attn_state: params.uniform("decoder.attn.w_state", vec![h, da], scale, &mut rng),
            attn_keys: params.uniform("decoder.attn.w_keys", vec![width, da], scale, &mut rng),
            attn_v: params.uniform("decoder.attn.v", vec![da, 1], scale, &mut rng),
            out: Linear::new(&mut params, "decoder.out", e + h + width, config.vocab_size, scale, &mut rng),
            latent_width,
        };
        Ok(Self { config, params, embedding, encoder_x, encoder_y, encoder_c, latent, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Number of weights inside ABI blocks.
    pub fn abi_parameter_count(&self) -> usize {
        let blocks: Vec<AbiParams> = match self.latent {
            LatentNets::Vrnmt { posterior, prior } => vec![posterior, prior],
            LatentNets::Cwvae(n) => vec![n.context, n.context_aware, n.semantic, n.prior_context_aware, n.prior_semantic],
            _ => vec![],
        };
        blocks.iter().flat_map(|b| b.ids()).map(|id| self.params.get(id).numel()).sum()
    }

    pub fn cwvae_nets(&self) -> Option<&CwvaeNets> {
        match &self.latent {
            LatentNets::Cwvae(n) => Some(n),
            _ => None,
        }
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    /// Replaces the embedding table, e.g. with GloVe vectors.
    pub fn set_embedding(&mut self, table: &Tensor) -> Result<()> {
        let current = self.params.get(self.embedding);
        if current.shape() != table.shape() {
            return Err(Error::Dimension {
                op: "set_embedding",
                left: current.shape().to_vec(),
                right: table.shape().to_vec(),
            });
        }
        self.params.set("embedding", table.data())
    }

    pub fn encode(&self, tape: &mut Tape, bound: &Bound, which: &BiGruEncoder, seq: SeqRef<'_>) -> Result<EncodedSeq> {
        which.encode(tape, bound, bound[self.embedding], seq.ids, seq.mask)
    }

    pub fn encode_event(&self, tape: &mut Tape, bound: &Bound, seq: SeqRef<'_>) -> Result<EncodedSeq> {
        self.encode(tape, bound, &self.encoder_x, seq)
    }

    fn require_cwvae(&self) -> Result<&CwvaeNets> {
        self.cwvae_nets()
            .ok_or_else(|| Error::contract(format!("{} has no context-aware latents", self.kind())))
    }

    /// `q(z_c|x,c)`, `q(z_c'|x,y)` and `q(z|x,z_c')`, with reparameterized samples.
    pub fn recognition(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hx: &EncodedSeq,
        hy: &EncodedSeq,
        hc: Option<&EncodedSeq>,
        noise: &Noise,
    ) -> Result<Recognition> {
        let nets = self.require_cwvae()?;
        let context = hc.map(|hc| abi(tape, bound, &nets.context, hc, hx)).transpose()?;
        let context_aware = abi(tape, bound, &nets.context_aware, hy, hx)?;
        let zc_prime = reparam_sample(tape, &context_aware, &noise.context_aware)?;
        let semantic = abi(tape, bound, &nets.semantic, &EncodedSeq::from_vector(zc_prime), hx)?;
        let z = reparam_sample(tape, &semantic, &noise.semantic)?;
        Ok(Recognition { context, context_aware, semantic, zc_prime, z })
    }

    /// `p(z_c'|x)` and `p(z|x,z_c')`. When `given_zc_prime` is set the second
    /// distribution conditions on it instead of on a prior draw.
    pub fn prior(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hx: &EncodedSeq,
        noise: &Noise,
        given_zc_prime: Option<Var>,
    ) -> Result<Prior> {
        let nets = self.require_cwvae()?;
        let context_aware = abi(tape, bound, &nets.prior_context_aware, hx, hx)?;
        let zc_prime = match given_zc_prime {
            Some(v) => v,
            None => reparam_sample(tape, &context_aware, &noise.context_aware)?,
        };
        let semantic = abi(tape, bound, &nets.prior_semantic, &EncodedSeq::from_vector(zc_prime), hx)?;
        let z = reparam_sample(tape, &semantic, &noise.semantic)?;
        Ok(Prior { context_aware, semantic, zc_prime, z })
    }

    /// Initial decoder state `tanh(mean(h^x)·W + b)`.
    pub fn init_decoder(&self, tape: &mut Tape, bound: &Bound, hx: &EncodedSeq) -> Result<DecoderState> {
        let pooled = tape.mean_pool(hx.states, 0, Some(&hx.mask))?;
        let pre = self.decoder.init.forward(tape, bound, pooled)?;
        let s = tape.tanh(pre)?;
        let keys = tape.matmul(hx.states, bound[self.decoder.attn_keys])?;
        Ok(DecoderState { s, e: None, alpha: None, prev_token_embedding: None, keys })
    }

    /// Consumes `token`, advances the state and returns next-token logits `[1 × V]`.
    ///
    /// `latent` is the concatenated latent input (`[z; z_c']` for CWVAE), absent
    /// for the plain Seq2Seq.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        state: &DecoderState,
        token: usize,
        latent: Option<Var>,
        hx: &EncodedSeq,
    ) -> Result<(Var, DecoderState)> {
        let d = &self.decoder;
        let emb = tape.embedding(bound[self.embedding], &[token])?;
        let input = match (latent, d.latent_width) {
            (None, 0) => emb,
            (Some(z), w) if w > 0 && tape.value(z).len() == w => tape.concat(&[emb, z], 1)?,
            (z, w) => {
                return Err(Error::Dimension {
                    op: "decode_step",
                    left: vec![w],
                    right: vec![z.map_or(0, |z| tape.value(z).len())],
                })
            }
        };
        let s = tape.gru_cell(input, state.s, d.cell.bind(bound))?;
        let query = tape.matmul(s, bound[d.attn_state])?;
        let pre = tape.add_row(state.keys, query)?;
        let act = tape.tanh(pre)?;
        let scores = tape.matmul(act, bound[d.attn_v])?;
        let alpha = tape.softmax(scores, 0, Some(&hx.mask))?;
        let alpha_t = tape.transpose(alpha)?;
        let e = tape.matmul(alpha_t, hx.states)?;
        let readout = tape.concat(&[emb, s, e], 1)?;
        let logits = d.out.forward(tape, bound, readout)?;
        let next = DecoderState { s, e: Some(e), alpha: Some(alpha), prev_token_embedding: Some(emb), keys: state.keys };
        Ok((logits, next))
    }

    /// Teacher-forced logits for `BOS y₁…yₙ`, shape `[(n+1) × V]`; row j predicts
    /// `y_{j+1}` (EOS for the last row).
    pub fn teacher_forced_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hx: &EncodedSeq,
        target: &[usize],
        latent: Option<Var>,
    ) -> Result<Var> {
        let mut state = self.init_decoder(tape, bound, hx)?;
        let mut rows = Vec::with_capacity(target.len() + 1);
        for &tok in std::iter::once(&BOS).chain(target) {
            let (logits, next) = self.decode_step(tape, bound, &state, tok, latent, hx)?;
            rows.push(logits);
            state = next;
        }
        tape.concat(&rows, 0)
    }

    /// Summed teacher-forced NLL of `target` followed by EOS.
    pub fn reconstruction(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hx: &EncodedSeq,
        target: &[usize],
        latent: Option<Var>,
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::contract("empty target"));
        }
        let logits = self.teacher_forced_logits(tape, bound, hx, target, latent)?;
        let gold: Vec<usize> = target.iter().copied().chain(std::iter::once(EOS)).collect();
        tape.cross_entropy(logits, &gold)
    }

    /// Minimized objective for one example.
    ///
    /// Finetune: `−log p(y|x,z,z_c') + w·[KL(q(z_c'|x,y) ‖ p(z_c'|x)) + KL(q(z|x,z_c') ‖ p(z|x,z_c'))]`.
    /// Pretrain adds `λ·KL(q(z_c|x,c) ‖ q(z_c'|x,y))`.
    pub fn example_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        example: ExampleRef<'_>,
        noise: &Noise,
        weights: LossWeights,
    ) -> Result<LossTerms> {
        match (weights.stage, example.context.is_some()) {
            (Stage::Pretrain, false) => return Err(Error::contract("pretrain stage needs a context")),
            (Stage::Finetune, true) => return Err(Error::contract("finetune stage takes no context")),
            _ => {}
        }
        let target = example.target.valid();
        let tokens = target.len() + 1;
        let hx = self.encode(tape, bound, &self.encoder_x, example.event)?;
        let (reconstruction, kl_context_aware, kl_semantic, kl_context) = match &self.latent {
            LatentNets::None => (self.reconstruction(tape, bound, &hx, &target, None)?, None, None, None),
            LatentNets::Variational { .. } => {
                let q = self.variational_posterior(tape, bound, &hx)?;
                let z = reparam_sample(tape, &q, &noise.semantic)?;
                let p = GaussianParams::standard(tape, self.config.latent)?;
                let kl = kl_diag_gauss(tape, &q, &p)?;
                (self.reconstruction(tape, bound, &hx, &target, Some(z))?, None, Some(kl), None)
            }
            LatentNets::Vrnmt { posterior, prior } => {
                let hy = self.encode(tape, bound, &self.encoder_y, example.target)?;
                let q = abi(tape, bound, posterior, &hy, &hx)?;
                let p = abi(tape, bound, prior, &hx, &hx)?;
                let z = reparam_sample(tape, &q, &noise.semantic)?;
                let kl = kl_diag_gauss(tape, &q, &p)?;
                (self.reconstruction(tape, bound, &hx, &target, Some(z))?, None, Some(kl), None)
            }
            LatentNets::Cwvae(_) => {
                let hy = self.encode(tape, bound, &self.encoder_y, example.target)?;
                let hc = example
                    .context
                    .filter(|_| weights.stage == Stage::Pretrain)
                    .map(|c| self.encode(tape, bound, &self.encoder_c, c))
                    .transpose()?;
                let q = self.recognition(tape, bound, &hx, &hy, hc.as_ref(), noise)?;
                let p = self.prior(tape, bound, &hx, noise, Some(q.zc_prime))?;
                let kl_cp = kl_diag_gauss(tape, &q.context_aware, &p.context_aware)?;
                let kl_z = kl_diag_gauss(tape, &q.semantic, &p.semantic)?;
                let kl_ctx = q.context.map(|qc| kl_diag_gauss(tape, &qc, &q.context_aware)).transpose()?;
                let latent = tape.concat(&[q.z, q.zc_prime], 1)?;
                let rec = self.reconstruction(tape, bound, &hx, &target, Some(latent))?;
                (rec, Some(kl_cp), Some(kl_z), kl_ctx)
            }
        };
        let mut total = reconstruction;
        for kl in [kl_context_aware, kl_semantic].into_iter().flatten() {
            let w = tape.scale(kl, weights.kl_weight)?;
            total = tape.add(total, w)?;
        }
        if let Some(kl) = kl_context {
            let w = tape.scale(kl, weights.lambda)?;
            total = tape.add(total, w)?;
        }
        Ok(LossTerms { reconstruction, kl_context_aware, kl_semantic, kl_context, total, tokens })
    }

    fn variational_posterior(&self, tape: &mut Tape, bound: &Bound, hx: &EncodedSeq) -> Result<GaussianParams> {
        let LatentNets::Variational { mu, sigma } = &self.latent else {
            return Err(Error::contract("not a variational seq2seq"));
        };
        let mu = mu.forward(tape, bound, hx.last)?;
        let pre = sigma.forward(tape, bound, hx.last)?;
        let sigma = tape.softplus(pre)?;
        Ok(GaussianParams { mu, sigma })
    }

    /// Latent decoder input drawn from the generation-time prior.
    pub fn sample_latent(&self, tape: &mut Tape, bound: &Bound, hx: &EncodedSeq, noise: &Noise) -> Result<Option<Var>> {
        Ok(match &self.latent {
            LatentNets::None => None,
            LatentNets::Variational { .. } => {
                let q = self.variational_posterior(tape, bound, hx)?;
                Some(reparam_sample(tape, &q, &noise.semantic)?)
            }
            LatentNets::Vrnmt { prior, .. } => {
                let p = abi(tape, bound, prior, hx, hx)?;
                Some(reparam_sample(tape, &p, &noise.semantic)?)
            }
            LatentNets::Cwvae(_) => {
                let p = self.prior(tape, bound, hx, noise, None)?;
                Some(tape.concat(&[p.z, p.zc_prime], 1)?)
            }
        })
    }

    /// Greedy decoding under a fixed latent; PAD and BOS are never emitted.
    pub fn greedy_decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hx: &EncodedSeq,
        latent: Option<Var>,
    ) -> Result<Generation> {
        let mut state = self.init_decoder(tape, bound, hx)?;
        let mut token = BOS;
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        for _ in 0..self.config.max_decode_len {
            let (logits, next) = self.decode_step(tape, bound, &state, token, latent, hx)?;
            let lp = log_softmax(tape.value(logits));
            let (best, score) = lp
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != PAD && i != BOS)
                .fold((EOS, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            log_prob += score;
            state = next;
            if best == EOS {
                break;
            }
            tokens.push(best);
            token = best;
        }
        Ok(Generation { tokens, log_prob })
    }

    /// Beam search under a fixed latent, best `width` finished hypotheses first.
    pub fn beam_decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hx: &EncodedSeq,
        latent: Option<Var>,
        width: usize,
    ) -> Result<Vec<Generation>> {
        if width == 0 {
            return Err(Error::contract("beam width must be positive"));
        }
        struct Hyp {
            tokens: Vec<usize>,
            log_prob: f64,
            state: DecoderState,
            last: usize,
        }
        let init = self.init_decoder(tape, bound, hx)?;
        let mut beams = vec![Hyp { tokens: vec![], log_prob: 0.0, state: init, last: BOS }];
        let mut finished: Vec<Generation> = Vec::new();
        for step in 0..self.config.max_decode_len {
            let mut expansions: Vec<(f64, usize, usize, DecoderState)> = Vec::new();
            for (b, hyp) in beams.iter().enumerate() {
                let (logits, next) = self.decode_step(tape, bound, &hyp.state, hyp.last, latent, hx)?;
                let lp = log_softmax(tape.value(logits));
                let mut ranked: Vec<(usize, f64)> =
                    lp.iter().copied().enumerate().filter(|&(i, _)| i != PAD && i != BOS).collect();
                ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
                for (tok, v) in ranked.into_iter().take(width) {
                    expansions.push((hyp.log_prob + v, b, tok, next));
                }
            }
            expansions.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut next_beams = Vec::new();
            let last_step = step + 1 == self.config.max_decode_len;
            for (score, b, tok, state) in expansions {
                if next_beams.len() + finished.len() >= width * 2 || next_beams.len() >= width {
                    break;
                }
                if tok == EOS || last_step {
                    let mut tokens = beams[b].tokens.clone();
                    if tok != EOS {
                        tokens.push(tok);
                    }
                    finished.push(Generation { tokens, log_prob: score });
                } else {
                    let mut tokens = beams[b].tokens.clone();
                    tokens.push(tok);
                    next_beams.push(Hyp { tokens, log_prob: score, state, last: tok });
                }
            }
            beams = next_beams;
            let best_open = beams.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            finished.sort_by(|x, y| y.log_prob.total_cmp(&x.log_prob));
            if beams.is_empty() || (finished.len() >= width && finished[width - 1].log_prob >= best_open) {
                break;
            }
        }
        finished.sort_by(|x, y| y.log_prob.total_cmp(&x.log_prob));
        finished.truncate(width);
        Ok(finished)
    }

    /// Frozen-weight session for generation and likelihood estimation.
    pub fn inference(&self) -> Inference<'_> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let mark = tape.len();
        Inference { model: self, tape, bound, mark }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| x - lse).collect()
}

/// Reuses one bound copy of the weights across many forward passes.
pub struct Inference<'m> {
    model: &'m Model,
    tape: Tape,
    bound: Bound,
    mark: usize,
}

impl Inference<'_> {
    /// `k` raw decodes for `event`, duplicates kept.
    pub fn generate(&mut self, event: &[usize], k: usize, strategy: DecodeStrategy, rng: &mut impl Rng) -> Result<Vec<Generation>> {
        let out = self.generate_inner(event, k, strategy, rng);
        self.tape.truncate(self.mark);
        out
    }

    fn generate_inner(&mut self, event: &[usize], k: usize, strategy: DecodeStrategy, rng: &mut impl Rng) -> Result<Vec<Generation>> {
        if k == 0 {
            return Err(Error::contract("k must be positive"));
        }
        let (m, tape, bound) = (self.model, &mut self.tape, &self.bound);
        let hx = m.encode_event(tape, bound, SeqRef::new(event))?;
        let dz = m.config.latent;
        match strategy {
            DecodeStrategy::SampleGreedy if !m.kind().has_latent() => {
                let g = m.greedy_decode(tape, bound, &hx, None)?;
                Ok(vec![g; k])
            }
            DecodeStrategy::SampleGreedy => (0..k)
                .map(|_| {
                    let noise = Noise::sample(rng, dz);
                    let z = m.sample_latent(tape, bound, &hx, &noise)?;
                    m.greedy_decode(tape, bound, &hx, z)
                })
                .collect(),
            DecodeStrategy::Beam { width } => {
                let z = m.sample_latent(tape, bound, &hx, &Noise::zeros(dz))?;
                let mut beams = m.beam_decode(tape, bound, &hx, z, width.max(k))?;
                beams.truncate(k);
                Ok(beams)
            }
        }
    }

    /// Estimates `log p(y|x)` with `k_samples` importance samples from the posterior.
    pub fn log_likelihood(&mut self, example: ExampleRef<'_>, k_samples: usize, rng: &mut impl Rng) -> Result<LikelihoodEstimate> {
        let out = self.log_likelihood_inner(example, k_samples, rng);
        self.tape.truncate(self.mark);
        out
    }

    fn log_likelihood_inner(&mut self, example: ExampleRef<'_>, k_samples: usize, rng: &mut impl Rng) -> Result<LikelihoodEstimate> {
        if k_samples < 1 {
            return Err(Error::contract("need at least one importance sample"));
        }
        let (m, tape, bound) = (self.model, &mut self.tape, &self.bound);
        let target = example.target.valid();
        let tokens = target.len() + 1;
        let hx = m.encode(tape, bound, &m.encoder_x, example.event)?;
        if let LatentNets::None = m.latent {
            let nll = m.reconstruction(tape, bound, &hx, &target, None)?;
            let ll = -tape.scalar(nll);
            return Ok(LikelihoodEstimate { iwae: ll, elbo: ll, tokens });
        }
        let hy = match m.latent {
            LatentNets::Vrnmt { .. } | LatentNets::Cwvae(_) => Some(m.encode(tape, bound, &m.encoder_y, example.target)?),
            _ => None,
        };
        let mut log_w = Vec::with_capacity(k_samples);
        for _ in 0..k_samples {
            let mark = tape.len();
            let noise = Noise::sample(rng, m.config.latent);
            let (latent, log_ratio) = match &m.latent {
                LatentNets::None => unreachable!(),
                LatentNets::Variational { .. } => {
                    let q = m.variational_posterior(tape, bound, &hx)?;
                    let z = reparam_sample(tape, &q, &noise.semantic)?;
                    let zv = tape.value(z).to_vec();
                    let prior = crate::latent::gaussian_log_density(&zv, &vec![0.0; zv.len()], &vec![1.0; zv.len()]);
                    (z, prior - q.log_density(tape, &zv))
                }
                LatentNets::Vrnmt { posterior, prior } => {
                    let hy = hy.as_ref().expect("encoded target");
                    let q = abi(tape, bound, posterior, hy, &hx)?;
                    let p = abi(tape, bound, prior, &hx, &hx)?;
                    let z = reparam_sample(tape, &q, &noise.semantic)?;
                    let zv = tape.value(z).to_vec();
                    (z, p.log_density(tape, &zv) - q.log_density(tape, &zv))
                }
                LatentNets::Cwvae(_) => {
                    let hy = hy.as_ref().expect("encoded target");
                    let q = m.recognition(tape, bound, &hx, hy, None, &noise)?;
                    let p = m.prior(tape, bound, &hx, &noise, Some(q.zc_prime))?;
                    let zc = tape.value(q.zc_prime).to_vec();
                    let z = tape.value(q.z).to_vec();
                    let ratio = p.context_aware.log_density(tape, &zc) + p.semantic.log_density(tape, &z)
                        - q.context_aware.log_density(tape, &zc)
                        - q.semantic.log_density(tape, &z);
                    (tape.concat(&[q.z, q.zc_prime], 1)?, ratio)
                }
            };
            let nll = m.reconstruction(tape, bound, &hx, &target, Some(latent))?;
            log_w.push(log_ratio - tape.scalar(nll));
            tape.truncate(mark);
        }
        let iwae = log_sum_exp(&log_w) - (k_samples as f64).ln();
        let elbo = log_w.iter().sum::<f64>() / k_samples as f64;
        Ok(LikelihoodEstimate { iwae, elbo, tokens })
    }
}
