//! Diagonal-Gaussian latents and the attention-based inferer (ABI).
//!
//! An ABI cross-attends two sequences `a` and `b`:
//!
//! ```text
//! S[t, i]  = (a_t·W_a) · (b_i·W_b)
//! c̄ᵃ       = mean over b-positions i of  Σ_t softmax_t(S[·, i]) a_t
//! c̄ᵇ       = mean over a-positions t of  Σ_i softmax_i(S[t, ·]) b_i
//! h_z      = tanh([c̄ᵃ; c̄ᵇ]·W + b_z)
//! μ        = h_z·W_μ + b_μ
//! σ        = softplus(h_z·W_σ + b_σ)
//! ```
//!
//! A latent vector passed as `a` is a length-1 sequence.

use rand::Rng;

use crate::encoder::EncodedSeq;
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ModelParams, ParamId};
use crate::tensor::{softplus_inverse, Tape, Var};

/// Mean and standard deviation of a diagonal Gaussian, each `[1 × d_z]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianParams {
    pub fn dim(&self, tape: &Tape) -> usize {
        tape.value(self.mu).len()
    }

    /// `N(0, I)` as constants on the tape.
    pub fn standard(tape: &mut Tape, dim: usize) -> Result<Self> {
        Ok(Self {
            mu: tape.zeros(vec![1, dim])?,
            sigma: tape.constant(vec![1, dim], vec![1.0; dim])?,
        })
    }

    /// Log density of `x` under the distribution, from tape values.
    pub fn log_density(&self, tape: &Tape, x: &[f64]) -> f64 {
        gaussian_log_density(x, tape.value(self.mu), tape.value(self.sigma))
    }
}

pub fn gaussian_log_density(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    x.iter()
        .zip(mu.iter().zip(sigma))
        .map(|(&x, (&m, &s))| {
            let u = (x - m) / s;
            -0.5 * u * u - s.ln() - HALF_LN_2PI
        })
        .sum()
}

/// Dimensions of one ABI block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AbiDims {
    pub d_a: usize,
    pub d_b: usize,
    /// Shared attention space of `W_a`, `W_b`.
    pub attention: usize,
    /// Width of `h_z`.
    pub hidden: usize,
    pub latent: usize,
}

/// Weights of one ABI block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AbiParams {
    pub w_a: ParamId,
    pub w_b: ParamId,
    pub w: ParamId,
    pub b_z: ParamId,
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub w_sigma: ParamId,
    pub b_sigma: ParamId,
    pub dims: AbiDims,
}

/// Initial `b_σ`, chosen so that σ starts at 1.
pub fn initial_sigma_bias() -> f64 {
    softplus_inverse(1.0)
}

impl AbiParams {
    pub fn new(params: &mut ModelParams, name: &str, dims: AbiDims, scale: f64, rng: &mut impl Rng) -> Self {
        let AbiDims { d_a, d_b, attention, hidden, latent } = dims;
        Self {
            w_a: params.uniform(&format!("{name}.w_a"), vec![d_a, attention], scale, rng),
            w_b: params.uniform(&format!("{name}.w_b"), vec![d_b, attention], scale, rng),
            w: params.uniform(&format!("{name}.w"), vec![d_a + d_b, hidden], scale, rng),
            b_z: params.filled(&format!("{name}.b_z"), vec![hidden], 0.0),
            w_mu: params.uniform(&format!("{name}.w_mu"), vec![hidden, latent], scale, rng),
            b_mu: params.filled(&format!("{name}.b_mu"), vec![latent], 0.0),
            w_sigma: params.uniform(&format!("{name}.w_sigma"), vec![hidden, latent], scale, rng),
            b_sigma: params.filled(&format!("{name}.b_sigma"), vec![latent], initial_sigma_bias()),
            dims,
        }
    }

    pub fn ids(&self) -> [ParamId; 8] {
        [self.w_a, self.w_b, self.w, self.b_z, self.w_mu, self.b_mu, self.w_sigma, self.b_sigma]
    }
}

/// Runs an ABI block over sequences `a` and `b`.
pub fn abi(tape: &mut Tape, bound: &Bound, p: &AbiParams, a: &EncodedSeq, b: &EncodedSeq) -> Result<GaussianParams> {
    let (pooled_a, pooled_b) = co_attend(tape, bound, p, a, b)?;
    let joined = tape.concat(&[pooled_a, pooled_b], 1)?;
    let pre = Linear { weight: p.w, bias: p.b_z }.forward(tape, bound, joined)?;
    let h_z = tape.tanh(pre)?;
    let mu = Linear { weight: p.w_mu, bias: p.b_mu }.forward(tape, bound, h_z)?;
    let pre_sigma = Linear { weight: p.w_sigma, bias: p.b_sigma }.forward(tape, bound, h_z)?;
    let sigma = tape.softplus(pre_sigma)?;
    Ok(GaussianParams { mu, sigma })
}

/// Pooled attended context vectors `(c̄ᵃ, c̄ᵇ)`, widths `d_a` and `d_b`.
pub fn co_attend(tape: &mut Tape, bound: &Bound, p: &AbiParams, a: &EncodedSeq, b: &EncodedSeq) -> Result<(Var, Var)> {
    if a.valid_len() == 0 || b.valid_len() == 0 {
        return Err(Error::contract("abi needs unmasked positions in both sequences"));
    }
    let proj_a = tape.matmul(a.states, bound[p.w_a])?;
    let proj_b = tape.matmul(b.states, bound[p.w_b])?;
    let proj_b_t = tape.transpose(proj_b)?;
    let scores = tape.matmul(proj_a, proj_b_t)?;

    // weights over a-positions for every b-position
    let over_a = tape.softmax(scores, 0, Some(&a.mask))?;
    let over_a_t = tape.transpose(over_a)?;
    let ctx_a = tape.matmul(over_a_t, a.states)?;
    let pooled_a = tape.mean_pool(ctx_a, 0, Some(&b.mask))?;

    // weights over b-positions for every a-position
    let over_b = tape.softmax(scores, 1, Some(&b.mask))?;
    let ctx_b = tape.matmul(over_b, b.states)?;
    let pooled_b = tape.mean_pool(ctx_b, 0, Some(&a.mask))?;
    Ok((pooled_a, pooled_b))
}

/// `μ + σ ⊙ ε` with caller-supplied standard-normal noise.
pub fn reparam_sample(tape: &mut Tape, g: &GaussianParams, eps: &[f64]) -> Result<Var> {
    let dim = g.dim(tape);
    if eps.len() != dim {
        return Err(Error::Dimension { op: "reparam_sample", left: vec![1, dim], right: vec![eps.len()] });
    }
    let noise = tape.constant(vec![1, dim], eps.to_vec())?;
    let scaled = tape.mul(g.sigma, noise)?;
    tape.add(g.mu, scaled)
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians:
/// `Σ log(σ_p/σ_q) + (σ_q² + (μ_q − μ_p)²) / (2σ_p²) − ½`.
pub fn kl_diag_gauss(tape: &mut Tape, q: &GaussianParams, p: &GaussianParams) -> Result<Var> {
    let dim = q.dim(tape);
    if p.dim(tape) != dim || tape.value(q.sigma).len() != dim || tape.value(p.sigma).len() != dim {
        return Err(Error::Dimension {
            op: "kl_diag_gauss",
            left: tape.shape(q.mu).to_vec(),
            right: tape.shape(p.mu).to_vec(),
        });
    }
    if tape.value(q.sigma).iter().chain(tape.value(p.sigma)).any(|&s| s <= 0.0) {
        return Err(Error::contract("kl_diag_gauss needs strictly positive sigma"));
    }
    let ln_p = tape.ln(p.sigma)?;
    let ln_q = tape.ln(q.sigma)?;
    let log_ratio = tape.sub(ln_p, ln_q)?;
    let var_q = tape.square(q.sigma)?;
    let diff = tape.sub(q.mu, p.mu)?;
    let diff_sq = tape.square(diff)?;
    let num = tape.add(var_q, diff_sq)?;
    let var_p = tape.square(p.sigma)?;
    let den = tape.scale(var_p, 2.0)?;
    let frac = tape.div(num, den)?;
    let terms = tape.add(log_ratio, frac)?;
    let total = tape.sum(terms)?;
    tape.add_scalar(total, -0.5 * dim as f64)
}

/// KL between Gaussians given as plain values.
pub fn kl_values(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let row = |tape: &mut Tape, v: &[f64]| tape.constant(vec![1, v.len().max(1)], v.to_vec());
    let q = GaussianParams { mu: row(&mut tape, mu_q)?, sigma: row(&mut tape, sigma_q)? };
    let p = GaussianParams { mu: row(&mut tape, mu_p)?, sigma: row(&mut tape, sigma_p)? };
    let kl = kl_diag_gauss(&mut tape, &q, &p)?;
    Ok(tape.scalar(kl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const DIMS: AbiDims = AbiDims { d_a: 6, d_b: 4, attention: 5, hidden: 7, latent: 3 };

    fn seq(tape: &mut Tape, rng: &mut ChaCha8Rng, rows: usize, width: usize) -> EncodedSeq {
        let data = (0..rows * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = tape.constant(vec![rows, width], data).unwrap();
        EncodedSeq { states: v, mask: vec![true; rows], last: v }
    }

    fn abi_fixture(seed: u64) -> (ModelParams, AbiParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let p = AbiParams::new(&mut params, "abi", DIMS, 0.5, &mut rng);
        (params, p)
    }

    #[test]
    fn singleton_attention_is_identity() {
        let (params, p) = abi_fixture(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = seq(&mut tape, &mut rng, 1, 6);
        let b = seq(&mut tape, &mut rng, 1, 4);
        let (pooled_a, pooled_b) = co_attend(&mut tape, &bound, &p, &a, &b).unwrap();
        assert_eq!(tape.value(pooled_a), tape.value(a.states));
        assert_eq!(tape.value(pooled_b), tape.value(b.states));
    }

    #[test]
    fn zero_params_give_bias_outputs() {
        let (mut params, p) = abi_fixture(4);
        for (name, t) in params.iter_mut() {
            if !name.ends_with("b_mu") && !name.ends_with("b_sigma") {
                t.data_mut().fill(0.0);
            }
        }
        params.set("abi.b_mu", &[0.3, -1.0, 2.0]).unwrap();
        params.set("abi.b_sigma", &[0.0, 1.0, -2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = seq(&mut tape, &mut rng, 3, 6);
        let b = seq(&mut tape, &mut rng, 5, 4);
        let g = abi(&mut tape, &bound, &p, &a, &b).unwrap();
        assert_eq!(tape.value(g.mu), &[0.3, -1.0, 2.0]);
        let expect: Vec<f64> = [0.0f64, 1.0, -2.0].iter().map(|&x| crate::tensor::softplus(x)).collect();
        assert_eq!(tape.value(g.sigma), expect.as_slice());
    }

    #[test]
    fn sigma_positive_on_random_draws() {
        let (params, p) = abi_fixture(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let mut tape = Tape::new();
            let bound = params.bind_frozen(&mut tape);
            let la = rng.random_range(1..4);
            let lb = rng.random_range(1..4);
            let a = seq(&mut tape, &mut rng, la, 6);
            let b = seq(&mut tape, &mut rng, lb, 4);
            let g = abi(&mut tape, &bound, &p, &a, &b).unwrap();
            assert!(tape.value(g.sigma).iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn permuting_a_leaves_output_unchanged() {
        let (params, p) = abi_fixture(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b_data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let bound = params.bind_frozen(&mut tape);
            let a_data = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let av = tape.constant(vec![4, 6], a_data).unwrap();
            let bv = tape.constant(vec![3, 4], b_data.clone()).unwrap();
            let a = EncodedSeq { states: av, mask: vec![true; 4], last: av };
            let b = EncodedSeq { states: bv, mask: vec![true; 3], last: bv };
            let g = abi(&mut tape, &bound, &p, &a, &b).unwrap();
            (tape.value(g.mu).to_vec(), tape.value(g.sigma).to_vec())
        };
        let (m1, s1) = run(&[0, 1, 2, 3]);
        let (m2, s2) = run(&[2, 0, 3, 1]);
        for (x, y) in m1.iter().chain(&s1).zip(m2.iter().chain(&s2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn all_masked_is_contract_error() {
        let (params, p) = abi_fixture(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut a = seq(&mut tape, &mut rng, 2, 6);
        a.mask = vec![false, false];
        let b = seq(&mut tape, &mut rng, 2, 4);
        assert!(matches!(abi(&mut tape, &bound, &p, &a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn abi_jacobian_matches_finite_differences() {
        let (params, p) = abi_fixture(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a_data: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let outputs = |params: &ModelParams, tape: &mut Tape| {
            let bound = params.bind(tape);
            let av = tape.constant(vec![3, 6], a_data.clone()).unwrap();
            let bv = tape.constant(vec![2, 4], b_data.clone()).unwrap();
            let a = EncodedSeq { states: av, mask: vec![true; 3], last: av };
            let b = EncodedSeq { states: bv, mask: vec![true; 2], last: bv };
            let g = abi(tape, &bound, &p, &a, &b).unwrap();
            (bound, g)
        };
        // one output coordinate at a time: row of the Jacobian
        for (which, coord) in [(0, 0), (0, 2), (1, 1), (1, 2)] {
            let pick = |tape: &mut Tape, g: &GaussianParams| {
                let v = if which == 0 { g.mu } else { g.sigma };
                tape.slice(v, 1, coord, 1).unwrap()
            };
            let mut tape = Tape::new();
            let (bound, g) = outputs(&params, &mut tape);
            let out = pick(&mut tape, &g);
            tape.backward(out).unwrap();
            for id in p.ids() {
                let analytic = tape.grad(bound[id]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params.get(id).numel()]);
                for idx in 0..params.get(id).numel() {
                    let eval = |delta: f64| {
                        let mut q = params.clone();
                        q.get_mut(id).data_mut()[idx] += delta;
                        let mut t = Tape::new();
                        let (_, g) = outputs(&q, &mut t);
                        let o = pick(&mut t, &g);
                        t.scalar(o)
                    };
                    let numeric = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                    let a = analytic[idx];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{id:?}[{idx}] {a} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn reparam_cases() {
        let mut tape = Tape::new();
        let mu = tape.leaf(&Tensor::row(vec![0.5, -1.0]).requiring_grad());
        let sigma = tape.leaf(&Tensor::row(vec![2.0, 0.3]).requiring_grad());
        let g = GaussianParams { mu, sigma };
        let s0 = reparam_sample(&mut tape, &g, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value(s0), &[0.5, -1.0]);

        let eps = [0.7, -1.3];
        let s = reparam_sample(&mut tape, &g, &eps).unwrap();
        let first = tape.slice(s, 1, 0, 1).unwrap();
        tape.backward(first).unwrap();
        assert_eq!(tape.grad(mu).unwrap(), &[1.0, 0.0]);
        assert_eq!(tape.grad(sigma).unwrap(), &[0.7, 0.0]);
        assert!(reparam_sample(&mut tape, &g, &[0.0]).is_err());
    }

    #[test]
    fn reparam_monte_carlo_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut tape = Tape::new();
        let g = GaussianParams::standard(&mut tape, 1).unwrap();
        let mark = tape.len();
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let s = reparam_sample(&mut tape, &g, &[e]).unwrap();
            let v = tape.scalar(s);
            sum += v;
            sq += v * v;
            tape.truncate(mark);
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_values(&[0.2, -0.4], &[1.5, 0.7], &[0.2, -0.4], &[1.5, 0.7]).unwrap(), 0.0);
        assert!((kl_values(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-12);
        // ln(1/2) + 4/2 - 1/2
        let expect = 0.5f64.ln() + 1.5;
        let kl = kl_values(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.80685).abs() < 1e-4);
        assert!(matches!(kl_values(&[0.0], &[0.0], &[0.0], &[1.0]), Err(Error::Contract(_))));
        assert!(kl_values(&[0.0, 1.0], &[1.0, 1.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let base = [0.3, -0.2, 1.4, 0.6, -0.5, 0.1, 0.9, 2.0];
        let eval = |v: &[f64]| kl_values(&v[0..2], &v[2..4], &v[4..6], &v[6..8]).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = (0..4).map(|i| tape.leaf(&Tensor::row(base[2 * i..2 * i + 2].to_vec()).requiring_grad())).collect();
        let q = GaussianParams { mu: vars[0], sigma: vars[1] };
        let p = GaussianParams { mu: vars[2], sigma: vars[3] };
        let kl = kl_diag_gauss(&mut tape, &q, &p).unwrap();
        tape.backward(kl).unwrap();
        for i in 0..8 {
            let mut plus = base;
            plus[i] += 1e-5;
            let mut minus = base;
            minus[i] -= 1e-5;
            let numeric = (eval(&plus) - eval(&minus)) / 2e-5;
            let analytic = tape.grad(vars[i / 2]).unwrap()[i % 2];
            assert!((analytic - numeric).abs() / numeric.abs().max(1e-6) < 1e-6);
        }
    }

    #[test]
    fn log_density_of_standard_normal_at_zero() {
        let v = gaussian_log_density(&[0.0], &[0.0], &[1.0]);
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }
}
