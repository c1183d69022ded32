//! Acceptance suite. One line per criterion; exits nonzero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,5` runs a subset.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cwvae_core::corpus::{Batch, Dimension, Example, IfThenFormat, RESERVED};
use cwvae_core::evaluation::{coverage, distinct_n, generate_all, group_by_event, perplexity, sentence_bleu, DecodeConfig, GenerationReport};
use cwvae_core::latent::kl_values;
use cwvae_core::models::{LossWeights, Model, ModelConfig, ModelKind, Noise, Stage};
use cwvae_core::pipeline::{self, RunPaths, TaskSource};
use cwvae_core::tensor::Tape;
use cwvae_core::training::{batch_loss, run_stage, LossBreakdown, TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn ex(event: Vec<usize>, target: Vec<usize>, context: Option<Vec<usize>>) -> Example {
    Example { context, event, dimension: Dimension::XIntent, target }
}

fn noise(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Noise> {
    (0..n).map(|_| Noise::sample(rng, dim)).collect()
}

fn loss_value(m: &Model, batch: &Batch, noise: &[Noise], w: LossWeights) -> LossBreakdown {
    let mut tape = Tape::new();
    let bound = m.params().bind_frozen(&mut tape);
    batch_loss(m, &mut tape, &bound, batch, noise, w).expect("loss").1
}

/// Replaces embedding rows past the reserved block with N(0, 1) draws, the
/// scale of pretrained word vectors.
fn wide_embedding(m: &mut Model, seed: u64) {
    let d = m.config().embedding_dim;
    let mut table = m.params().by_name("embedding").expect("embedding").clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in table.data_mut()[RESERVED.len() * d..].iter_mut() {
        *x = rng.sample(rand_distr::StandardNormal);
    }
    m.set_embedding(&table).expect("embedding shape");
}

// 1 ------------------------------------------------------------------------

fn gradient_check(kind: ModelKind, stage: Stage, seed: u64) -> (f64, usize) {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut m = Model::new(ModelConfig { seed, init_scale: 0.5, ..ModelConfig::small(kind, 20, 8, 4) }).expect("model");
    let seq = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> Vec<usize> {
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| rng.random_range(4..20)).collect()
    };
    let examples: Vec<Example> = (0..3)
        .map(|_| {
            let context = (stage == Stage::Pretrain).then(|| seq(&mut rng, 2, 5));
            ex(seq(&mut rng, 1, 4), seq(&mut rng, 1, 3), context)
        })
        .collect();
    let batch = Batch::new(examples).expect("batch");
    let eps = noise(&mut rng, batch.len(), 4);
    let w = match stage {
        Stage::Pretrain => LossWeights::pretrain(0.1),
        Stage::Finetune => LossWeights::finetune(),
    };

    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let (loss, _) = batch_loss(&m, &mut tape, &bound, &batch, &eps, w).expect("loss");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = m
        .params()
        .iter()
        .zip(bound.vars())
        .map(|((_, t), &v)| tape.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let names: Vec<String> = m.params().iter().map(|(n, _)| n.to_owned()).collect();
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for (name, grad) in names.iter().zip(&analytic) {
        for (i, &g) in grad.iter().enumerate() {
            let orig = m.params().by_name(name).expect("param").data()[i];
            let mut at = |x: f64| {
                m.params_mut().by_name_mut(name).expect("param").data_mut()[i] = x;
                loss_value(&m, &batch, &eps, w).total
            };
            let (up, down) = (at(orig + H), at(orig - H));
            at(orig);
            let numeric = (up - down) / (2.0 * H);
            // the floor keeps relative error defined where both gradients vanish
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut runs = 0;
    for kind in ModelKind::ALL {
        for seed in 0..5 {
            let stages: &[Stage] = match kind {
                ModelKind::Cwvae => &[Stage::Pretrain, Stage::Finetune],
                _ => &[Stage::Finetune],
            };
            for &stage in stages {
                let (w, n) = gradient_check(kind, stage, seed);
                worst = worst.max(w);
                checked += n;
                runs += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!("{runs} runs, {checked} coordinates, worst relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

// 2 ------------------------------------------------------------------------

fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn criterion_2() -> Outcome {
    const SAMPLES: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut misses = Vec::new();
    let mut negative = 0;
    let mut worst_z = 0.0f64;
    for pair in 0..100 {
        let d = rng.random_range(1..=6);
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (mq, sq, mp, sp) = (draw(-1.5, 1.5), draw(0.4, 1.6), draw(-1.5, 1.5), draw(0.4, 1.6));
        let closed = kl_values(&mq, &sq, &mp, &sp).expect("kl");
        if closed < 0.0 {
            negative += 1;
        }
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..SAMPLES {
            let mut lr = 0.0;
            for j in 0..d {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                let x = mq[j] + sq[j] * e;
                lr += log_normal(x, mq[j], sq[j]) - log_normal(x, mp[j], sp[j]);
            }
            sum += lr;
            sum_sq += lr * lr;
        }
        let n = SAMPLES as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) * n / (n - 1.0)).sqrt() / n.sqrt();
        let z = (mean - closed).abs() / se;
        worst_z = worst_z.max(z);
        if z > 3.0 {
            misses.push(pair);
        }
    }
    let same = kl_values(&[0.3, -0.7], &[0.5, 2.0], &[0.3, -0.7], &[0.5, 2.0]).expect("kl");
    let shift = kl_values(&[1.0], &[1.0], &[0.0], &[1.0]).expect("kl");
    let pass = misses.is_empty() && negative == 0 && same.abs() <= 1e-12 && (shift - 0.5).abs() <= 1e-12;
    outcome(
        pass,
        format!(
            "100 pairs x 1e6 samples, worst |z| {worst_z:.2}, pairs beyond 3 SE {misses:?}, negative {negative}, KL(q,q) {same:.1e}, unit shift {shift:.15}"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut worst_gap = 0.0f64;
    for seed in 0..5 {
        let m = Model::new(ModelConfig { seed, init_scale: 0.3, ..ModelConfig::small(ModelKind::Cwvae, 30, 10, 5) }).expect("model");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = |n: usize| (0..n).map(|_| rng.random_range(4..30)).collect::<Vec<usize>>();
        let with_ctx: Vec<Example> = (0..6).map(|i| ex(seq(1 + i % 3), seq(1 + i % 2), Some(seq(2 + i)))).collect();
        let without: Vec<Example> = with_ctx.iter().map(|e| Example { context: None, ..e.clone() }).collect();
        let eps = noise(&mut ChaCha8Rng::seed_from_u64(100 + seed), 6, 5);
        let pre = loss_value(&m, &Batch::new(with_ctx).expect("batch"), &eps, LossWeights::pretrain(0.0));
        let elbo = loss_value(&m, &Batch::new(without).expect("batch"), &eps, LossWeights::finetune());
        worst_gap = worst_gap.max((pre.total - elbo.total).abs());
    }

    let mut m = Model::new(ModelConfig { seed: 9, init_scale: 0.3, ..ModelConfig::small(ModelKind::Cwvae, 30, 10, 5) }).expect("model");
    let copies: Vec<(String, Vec<f64>)> = m
        .params()
        .iter()
        .filter_map(|(n, t)| {
            let rest = n.strip_prefix("recognition.")?;
            (rest.starts_with("context_aware.") || rest.starts_with("semantic.")).then(|| (format!("prior.{rest}"), t.data().to_vec()))
        })
        .collect();
    for (name, data) in &copies {
        m.params_mut().set(name, data).expect("prior tensor");
    }
    let tied: Vec<Example> = [vec![4, 9, 12], vec![7], vec![20, 21]].into_iter().map(|s| ex(s.clone(), s, None)).collect();
    let eps = noise(&mut ChaCha8Rng::seed_from_u64(4), 3, 5);
    let kl = loss_value(&m, &Batch::new(tied).expect("batch"), &eps, LossWeights::finetune());
    let pass = worst_gap <= 1e-12 && copies.len() == 16 && kl.kl_zc_prime.abs() <= 1e-12 && kl.kl_z.abs() <= 1e-12;
    outcome(
        pass,
        format!(
            "lambda=0 gap {worst_gap:.1e} over 5 seeds; tied q=p: KL(zc') {:.1e}, KL(z) {:.1e} ({} tensors copied)",
            kl.kl_zc_prime,
            kl.kl_z,
            copies.len()
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let data: Vec<Example> = (0..32)
        .map(|i| ex(vec![4 + i % 28, 4 + (i * 7) % 28], vec![32 + i % 28, 32 + (i * 3) % 28, 32 + (i * 5) % 28], None))
        .collect();
    let mut m = Model::new(ModelConfig::small(ModelKind::Cwvae, 60, 16, 8)).expect("model");
    let config = TrainConfig { batch_size: 32, model: m.config().clone(), ..TrainConfig::default() };
    let lr = config.lr;
    let mut trainer = Trainer::new(config, &m).expect("trainer");
    let batch = Batch::new(data).expect("batch");
    let mut reached = None;
    let mut last = f64::NAN;
    for step in 1..=2000 {
        last = trainer.step(&mut m, &batch).expect("step").reconstruction_per_token();
        if last < 0.1 {
            reached = Some(step);
            break;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        reached.is_some() && elapsed < Duration::from_secs(300),
        format!(
            "lr {lr}, below 0.1 nats/token at step {}, last {last:.4}, {:.1}s",
            reached.map_or("never".into(), |s| s.to_string()),
            elapsed.as_secs_f64()
        ),
    )
}

// 5 ------------------------------------------------------------------------

/// 200 events `[a, b]`, each with the four targets `[m, a]`.
fn one_to_many() -> Vec<Example> {
    let mut data = Vec::new();
    for i in 0..20 {
        for j in 0..10 {
            for mode in 0..4 {
                data.push(ex(vec![4 + i, 24 + j], vec![34 + mode, 4 + i], None));
            }
        }
    }
    data
}

struct Diversity {
    distinct2: f64,
    coverage: f64,
}

fn diversity_run(kind: ModelKind, seed: u64, data: &[Example]) -> Diversity {
    let mut m = Model::new(ModelConfig { seed, init_scale: 0.3, max_decode_len: 5, ..ModelConfig::small(kind, 38, 16, 8) }).expect("model");
    wide_embedding(&mut m, seed + 100);
    let config = TrainConfig {
        lr: 0.003,
        max_epochs: 60,
        kl_anneal_steps: 650,
        shuffle_seed: seed,
        eps_seed: seed,
        model: m.config().clone(),
        ..TrainConfig::default()
    };
    run_stage(&config, &mut m, data, &[], None).expect("training");
    let groups = group_by_event(data);
    let events: Vec<Vec<usize>> = groups.iter().map(|g| g.event.clone()).collect();
    let gens = generate_all(&m, &events, &DecodeConfig { k: 10, seed, ..DecodeConfig::default() }).expect("decode");
    let raw: Vec<Vec<Vec<usize>>> = gens.iter().map(|g| g.iter().map(|x| x.tokens.clone()).collect()).collect();
    let pooled: Vec<Vec<usize>> = raw.iter().flatten().cloned().collect();
    let cov: usize = groups.iter().zip(&raw).map(|(g, r)| coverage(r, &g.references)).sum();
    Diversity { distinct2: distinct_n(&pooled, 2).expect("distinct"), coverage: cov as f64 / groups.len() as f64 }
}

fn criterion_5() -> Outcome {
    let data = one_to_many();
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let cw = diversity_run(ModelKind::Cwvae, seed, &data);
        let rnn = diversity_run(ModelKind::RnnSeq2seq, seed, &data);
        let ok = cw.distinct2 > rnn.distinct2 && cw.coverage >= 2.5 && rnn.coverage == 1.0;
        pass &= ok;
        lines.push(format!(
            "seed {seed}: cwvae d2 {:.4} cov {:.2} / rnn d2 {:.4} cov {:.2}",
            cw.distinct2, cw.coverage, rnn.distinct2, rnn.coverage
        ));
    }
    outcome(pass, format!("KL annealing on (650 steps); {}", lines.join("; ")))
}

// 6 ------------------------------------------------------------------------

const T_VOCAB: usize = 70;

/// Target of event `[a, b]` is `[g(a), h(b)]`; story contexts mention both
/// target tokens among filler.
fn transfer_example(a: usize, b: usize, rng: Option<&mut ChaCha8Rng>) -> Example {
    let target = vec![34 + a, 54 + b];
    let context = rng.map(|r| vec![64 + r.random_range(0..6), 34 + a, 64 + r.random_range(0..6), 54 + b]);
    ex(vec![4 + a, 24 + b], target, context)
}

fn story_triples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (a, b) = (rng.random_range(0..20), rng.random_range(0..10));
            transfer_example(a, b, Some(&mut rng))
        })
        .collect()
}

fn transfer_config(seed: u64) -> ModelConfig {
    ModelConfig { seed, init_scale: 0.3, max_decode_len: 4, ..ModelConfig::small(ModelKind::Cwvae, T_VOCAB, 16, 8) }
}

/// Noise-free mean of the context regularizer over a corpus.
fn mean_kl_ctx(m: &Model, data: &[Example]) -> f64 {
    let batch = Batch::new(data.to_vec()).expect("batch");
    let zero = vec![Noise::zeros(m.config().latent); data.len()];
    loss_value(m, &batch, &zero, LossWeights::pretrain(0.1)).kl_context_reg.expect("context term")
}

fn criterion_6() -> Outcome {
    let stories = story_triples(500, 6);
    // finetune sees a < 10 only; dev events use a ≥ 10, which only the stories cover
    let finetune: Vec<Example> = (0..10).flat_map(|a| (0..10).map(move |b| transfer_example(a, b, None))).collect();
    let dev: Vec<Example> = (10..20).flat_map(|a| (0..10).map(move |b| transfer_example(a, b, None))).collect();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let mut pre = Model::new(transfer_config(seed)).expect("model");
        wide_embedding(&mut pre, seed + 100);
        let before = mean_kl_ctx(&pre, &stories);
        let pt = TrainConfig {
            stage: Stage::Pretrain,
            batch_size: 32,
            max_epochs: 40,
            shuffle_seed: seed,
            eps_seed: seed,
            model: pre.config().clone(),
            ..TrainConfig::default()
        };
        run_stage(&pt, &mut pre, &stories, &[], None).expect("pretrain");
        let after = mean_kl_ctx(&pre, &stories);

        let ft = TrainConfig { stage: Stage::Finetune, batch_size: 32, max_epochs: 20, shuffle_seed: seed, eps_seed: seed, ..pt.clone() };
        let mut scratch = Model::new(transfer_config(seed)).expect("model");
        wide_embedding(&mut scratch, seed + 100);
        let from_pre = run_stage(&ft, &mut pre, &finetune, &dev, None).expect("finetune");
        let unpre = run_stage(&ft, &mut scratch, &finetune, &dev, None).expect("finetune");
        let (p, u) = (from_pre.best_dev_ppl.expect("dev"), unpre.best_dev_ppl.expect("dev"));
        let ok = after < 0.1 * before && p <= u;
        pass &= ok;
        lines.push(format!("seed {seed}: kl_ctx {before:.4} -> {after:.4}, dev ppl pretrained {p:.3} vs unpretrained {u:.3}"));
    }
    outcome(pass, lines.join("; "))
}

// 7 ------------------------------------------------------------------------

fn uniform(kind: ModelKind, v: usize) -> Model {
    let mut m = Model::new(ModelConfig { seed: 3, ..ModelConfig::small(kind, v, 6, 3) }).expect("model");
    let zeroed: Vec<String> = m
        .params()
        .iter()
        .map(|(n, _)| n.to_owned())
        .filter(|n| {
            n.starts_with("decoder.out.")
                || [".w_mu", ".b_mu", ".w_sigma", "variational.mu.w", "variational.mu.b", "variational.sigma.w"].iter().any(|s| n.ends_with(s))
        })
        .collect();
    for name in zeroed {
        let n = m.params().by_name(&name).expect("param").numel();
        m.params_mut().set(&name, &vec![0.0; n]).expect("set");
    }
    m
}

fn criterion_7() -> Outcome {
    let words = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
    let cands = vec![words("go home"), words("go away")];
    let d1 = distinct_n(&cands, 1).expect("distinct");
    let d2 = distinct_n(&cands, 2).expect("distinct");
    let test = vec![ex(vec![4, 5], vec![6, 7, 8], None), ex(vec![9], vec![5], None), ex(vec![6, 7, 8, 9], vec![4, 4], None)];
    let mut worst = 0.0f64;
    for kind in ModelKind::ALL {
        let ppl = perplexity(&uniform(kind, 10), &test, 20, 7).expect("ppl").ppl;
        worst = worst.max((ppl - 10.0).abs());
    }
    let msg = words("to send a message");
    let other = words("express themself");
    let b = sentence_bleu(&msg, &[&msg[..], &other[..]], 4).expect("bleu");
    let pass = d1 == 0.75 && d2 == 0.5 && worst <= 1e-9 && b == 1.0;
    outcome(pass, format!("distinct-1 {d1}, distinct-2 {d2}, uniform PPL max |ppl-10| {worst:.1e} over 4 kinds, exact-match BLEU {b}"))
}

// 8 ------------------------------------------------------------------------

struct Fixture {
    event2mind: std::path::PathBuf,
    atomic: std::path::PathBuf,
    stories: std::path::PathBuf,
    glove: std::path::PathBuf,
}

const SUBJECTS: [&str; 8] = ["PersonX", "PersonY", "PersonX 's friend", "PersonX 's mother", "PersonY 's dog", "the boss", "PersonX 's team", "a neighbor"];
const VERBS: [&str; 10] = ["writes", "finds", "loses", "buys", "fixes", "paints", "sells", "cooks", "adopts", "visits"];
const OBJECTS: [&str; 25] = [
    "a letter", "a new job", "the keys", "a car", "the roof", "a picture", "the house", "dinner", "a child", "the museum",
    "a book", "the bike", "a cake", "the garden", "a dog", "the store", "a song", "the fence", "a gift", "the city",
    "a phone", "the boat", "a shirt", "the window", "a lamp",
];
const INTENTS: [&str; 6] = ["to send a message", "to be helpful", "to earn money", "to relax", "to be kind", "to impress others"];
const FEELINGS: [&str; 6] = ["happy", "proud", "tired", "relieved", "excited", "nervous"];

fn write_fixture(dir: &Path) -> Fixture {
    use std::fmt::Write;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pick = |xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
    let list = |xs: &[&str]| serde_json::to_string(xs).expect("json");
    let mut e2m = String::from("Source,Event,Xintent,Xemotion,Otheremotion,Xsent,Osent\n");
    let mut atomic = String::from("event,oEffect,oReact,oWant,xAttr,xEffect,xIntent,xNeed,xReact,xWant,prefix,split\n");
    for s in SUBJECTS {
        for v in VERBS {
            for o in OBJECTS {
                let event = format!("{s} {v} {o}");
                let intents = [pick(&INTENTS), pick(&INTENTS)];
                let feel = [pick(&FEELINGS)];
                let other = [pick(&FEELINGS), "none"];
                let csv = |x: String| format!("\"{}\"", x.replace('"', "\"\""));
                writeln!(e2m, "rocstory,{},{},{},{},,", event, csv(list(&intents)), csv(list(&feel)), csv(list(&other))).expect("write");
                let cells: Vec<String> = (0..9).map(|i| csv(list(&[pick(if i % 2 == 0 { &INTENTS } else { &FEELINGS })]))).collect();
                writeln!(atomic, "{},{},[],trn", event, cells.join(",")).expect("write");
            }
        }
    }
    let mut stories = String::new();
    for i in 0..1000 {
        let n = if i % 7 == 0 { 10 } else { 5 };
        let sentences: Vec<String> = (0..n).map(|_| format!("{} {} {} .", pick(&SUBJECTS), pick(&VERBS), pick(&OBJECTS))).collect();
        writeln!(stories, "{}", serde_json::json!({ "sentences": sentences })).expect("write");
    }
    let mut glove = String::new();
    for w in ["to", "a", "the", "happy", "proud", "personx", "PersonX", "writes", "letter", "job"] {
        let v: Vec<String> = (0..300).map(|_| format!("{:.5}", rng.random_range(-1.0..1.0))).collect();
        writeln!(glove, "{w} {}", v.join(" ")).expect("write");
    }
    let f = Fixture {
        event2mind: dir.join("event2mind.csv"),
        atomic: dir.join("atomic.csv"),
        stories: dir.join("stories.jsonl"),
        glove: dir.join("glove.300d.txt"),
    };
    std::fs::write(&f.event2mind, e2m).expect("write");
    std::fs::write(&f.atomic, atomic).expect("write");
    std::fs::write(&f.stories, stories).expect("write");
    std::fs::write(&f.glove, glove).expect("write");
    f
}

fn well_formed(report: &GenerationReport, k: usize) -> Result<(), String> {
    let a = &report.aggregates;
    let json = serde_json::to_value(report).map_err(|e| e.to_string())?;
    for key in ["metadata", "aggregates", "events"] {
        if json.get(key).is_none() {
            return Err(format!("missing {key}"));
        }
    }
    if report.events.is_empty() {
        return Err("no events".into());
    }
    if !(a.ppl.is_finite() && a.ppl >= 1.0) || !(0.0..=100.0).contains(&a.bleu) {
        return Err(format!("aggregates out of range: {a:?}"));
    }
    if ![a.distinct1, a.distinct2].iter().all(|d| (0.0..=1.0).contains(d)) {
        return Err("distinct outside [0,1]".into());
    }
    if report.events.iter().any(|e| e.candidates.is_empty() || e.candidates.iter().map(|c| c.count).sum::<usize>() != k) {
        return Err("candidate counts do not add up to k".into());
    }
    let table = report.to_table();
    if !table.contains("distinct") {
        return Err("table lacks the aggregate row".into());
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    println!(
        "  note: published Event2Mind/Atomic scores (e.g. CWVAE xIntent PPL 29.23, BLEU 12.98) need the full \
         corpora and training budget and are not reproduced here; this check runs the unmodified pipeline \
         for one epoch on a 1% subsample of files in the release formats"
    );
    let start = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let f = write_fixture(dir.path());
    let config = TrainConfig { max_epochs: 1, data_fraction: 0.01, dev_samples: 2, ..TrainConfig::default() };
    let paths = RunPaths { glove: Some(f.glove.clone()), log: None };
    let task = TaskSource { dim: Some(Dimension::XIntent), fraction: 0.01, ..TaskSource::new(&f.event2mind, IfThenFormat::Event2Mind) };
    let decode = DecodeConfig { k: 10, ppl_samples: 5, ..DecodeConfig::default() };
    let run = || -> cwvae_core::Result<(String, GenerationReport, usize)> {
        let pre_out = dir.path().join("pretrain.ckpt");
        let pre = pipeline::pretrain(&config, &f.stories, Some(&task), &pre_out, &paths)?;
        let ft_config = TrainConfig { data_fraction: 1.0, ..config.clone() };
        let ft_out = dir.path().join("finetune.ckpt");
        let ft = pipeline::finetune(&ft_config, &task, Some(&pre_out), &ft_out, &paths)?;
        if ft.initial_params != pre.final_params {
            return Err(cwvae_core::Error::Contract("finetune did not start from the pretrained weights".into()));
        }
        let vocab = pipeline::read_vocab(&ft_out.with_extension("vocab"))?;
        let report = pipeline::evaluate_checkpoint(&ft_out, &task, &decode, Some(&vocab))?;
        let atomic = TaskSource { dim: Some(Dimension::XNeed), fraction: 0.01, ..TaskSource::new(&f.atomic, IfThenFormat::Atomic) };
        let at = pipeline::finetune(&ft_config, &atomic, None, &dir.path().join("atomic.ckpt"), &paths)?;
        let log = std::fs::read_to_string(ft_out.with_extension("metrics.jsonl"))?;
        Ok((format!("pretrain {} triples, finetune {} pairs, atomic {} pairs, {} log line", pre.train_examples, ft.train_examples, at.train_examples, log.lines().count()), report, pre.vocab_size))
    };
    match run() {
        Ok((summary, report, _)) => match well_formed(&report, decode.k) {
            Ok(()) => outcome(
                true,
                format!(
                    "{summary}; report over {} events, ppl {:.1}, {:.1}s",
                    report.events.len(),
                    report.aggregates.ppl,
                    start.elapsed().as_secs_f64()
                ),
            ),
            Err(e) => outcome(false, format!("malformed report: {e}")),
        },
        Err(e) => outcome(false, format!("pipeline failed: {e}")),
    }
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "gradient correctness", criterion_1),
        (2, "KL oracle equivalence", criterion_2),
        (3, "objective fidelity", criterion_3),
        (4, "overfit sanity", criterion_4),
        (5, "diversity property", criterion_5),
        (6, "pretrain transfer property", criterion_6),
        (7, "metric fixtures", criterion_7),
        (8, "release-format smoke run", criterion_8),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // the libtest harness passes flags such as --nocapture; none apply here
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let r = run();
        println!("[{}] {id}. {name}: {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
