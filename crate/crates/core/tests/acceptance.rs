//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use mapgn_core::corpus::{synth_corpus, SplitSizes, SynthCorpus, SynthRuleSet};
use mapgn_core::decoding::{beam_decode, greedy_decode, BeamConfig};
use mapgn_core::experiment::{
    decode_texts, encode_pairs, encode_sentences, fine_tune, grad_check_config, model_grad_check, pairs_bleu,
    DecodeLimits,
};
use mapgn_core::masking::{masking_report, span_length, MaskingSpec};
use mapgn_core::metrics::{bleu3, lcs_len, meteor_sentence};
use mapgn_core::model::{forward_teacher_forced, Arch, Bound, Mode, ModelConfig, Padded, Params};
use mapgn_core::rng::keyed_rng;
use mapgn_core::tensor::{Float, Graph};
use mapgn_core::training::checkpoint::{load_checkpoint, save_checkpoint};
use mapgn_core::training::trainer::{evaluate_pairs, transfer_params, TrainConfig, TrainData, Trainer};
use mapgn_core::vocab::{TokenId, Vocab, NUM_SPECIALS};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_model(rng: &mut impl Rng, arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        emb_dim: rng.gen_range(2..6),
        enc_layers: rng.gen_range(1..3),
        enc_hidden: rng.gen_range(2..6),
        dec_layers: rng.gen_range(1..3),
        dec_hidden: rng.gen_range(2..6),
        vocab_size: rng.gen_range(NUM_SPECIALS + 2..NUM_SPECIALS + 8),
        dropout: 0.0,
        max_len: 50,
    }
}

fn perturbed<F: Float>(cfg: &ModelConfig, rng: &mut rand_chacha::ChaCha8Rng, scale: f64) -> Params<F> {
    let mut p: Params<F> = Params::init(cfg, rng);
    for (_, t) in p.iter_mut() {
        for x in t.data_mut() {
            *x = *x * F::from(scale).unwrap() + F::from(rng.gen_range(-0.2..0.2)).unwrap();
        }
    }
    p
}

fn tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(NUM_SPECIALS..vocab)).collect()
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let r = model_grad_check(&grad_check_config(), 1).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    check(
        r.max_rel_err < 1e-6 && secs < 60.0,
        format!("max relative error {:.2e} over {} coordinates in {secs:.1}s", r.max_rel_err, r.coordinates),
    )
}

fn mixture_normalization() -> Outcome {
    let mut rng = keyed_rng(101, 0);
    let (mut worst, mut rows, mut bad_support) = (0.0f64, 0usize, 0usize);
    for _ in 0..1000 {
        let cfg = toy_model(&mut rng, Arch::PointerGenerator);
        let params: Params<f32> = perturbed(&cfg, &mut rng, 4.0);
        let m = rng.gen_range(1..6);
        let l = rng.gen_range(1..4);
        let source = tokens(&mut rng, cfg.vocab_size, m);
        let input = tokens(&mut rng, cfg.vocab_size, l);
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &params);
        let out = forward_teacher_forced(
            &mut g,
            &b,
            &cfg,
            &Padded::new(&[&source]).unwrap(),
            &Padded::new(&[&input]).unwrap(),
            &mut Mode::Eval,
        )
        .map_err(|e| e.to_string())?;
        let v = cfg.vocab_size;
        let (probs, gen, gate) = (g.value(out.probs), g.value(out.gen), g.value(out.p_gen.unwrap()));
        for t in 0..l {
            let row = &probs[t * v..(t + 1) * v];
            let sum: f64 = row.iter().map(|&x| x as f64).sum();
            worst = worst.max((sum - 1.0).abs());
            if row.iter().any(|&x| x < 0.0) {
                worst = f64::INFINITY;
            }
            for tok in (0..v).filter(|tok| !source.contains(tok)) {
                bad_support += usize::from(row[tok] != gate[t] * gen[t * v + tok]);
            }
            rows += 1;
        }
    }
    check(
        worst < 1e-5 && bad_support == 0,
        format!("{rows} distributions, max |sum-1| {worst:.1e}, {bad_support} copy-free tokens off P_gen*G"),
    )
}

fn masking_conformance() -> Outcome {
    let mut rng = keyed_rng(102, 0);
    let corpus: Vec<Vec<TokenId>> = (0..400)
        .map(|_| {
            let n = rng.gen_range(1..40);
            tokens(&mut rng, 40, n)
        })
        .collect();
    let expected = [
        ("mass1", 0.8, 0.1, 0.1),
        ("mass2", 0.4, 0.4, 0.2),
        ("mass3", 0.4, 0.0, 0.6),
        ("mapgn", 0.4, 0.4, 0.2),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (name, em, er, eu)) in expected.into_iter().enumerate() {
        let spec = MaskingSpec::preset(name).map_err(|e| e.to_string())?;
        let s = masking_report(&corpus, &spec, 40, &mut keyed_rng(103, i as u64), 12_000).map_err(|e| e.to_string())?;
        let (m, r, u) = s.fractions();
        ok &= s.positions >= 100_000;
        ok &= (m - em).abs() <= 0.01 && (r - er).abs() <= 0.01 && (u - eu).abs() <= 0.01;
        ok &= s.span_length_violations == 0 && s.outside_span_changes == 0;
        if name == "mapgn" {
            ok &= s.random_in_span == s.random;
        }
        parts.push(format!("{name} ({m:.3},{r:.3},{u:.3})"));
    }
    ok &= (1..=500).all(|n| span_length(n, 0.5) == ((0.5 * n as f64 + 0.5).floor() as usize).max(1));
    check(ok, parts.join(" "))
}

fn lcs_brute(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ar)), Some((y, br))) if x == y => 1 + lcs_brute(ar, br),
        (Some((_, ar)), Some((_, br))) => lcs_brute(ar, b).max(lcs_brute(a, br)),
        _ => 0,
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = keyed_rng(104, 0);
    let alphabet = ['a', 'b', 'c', 'd'];
    let mut lcs_bad = 0;
    for _ in 0..1000 {
        let mut s = || -> Vec<char> {
            let n = rng.gen_range(0..=12);
            (0..n).map(|_| alphabet[rng.gen_range(0..4)]).collect()
        };
        let (a, b) = (s(), s());
        lcs_bad += usize::from(lcs_len(&a, &b) != lcs_brute(&a, &b));
    }
    let bleu = bleu3(&["abc".into()], &["abcd".into()]).map_err(|e| e.to_string())?;
    let bleu_err = (bleu - (1.0f64 - 4.0 / 3.0).exp()).abs();
    let mut meteor_err = 0.0f64;
    for s in ["a", "abc", "spoken text", "normalize me please"] {
        let c: Vec<char> = s.chars().collect();
        let want = 1.0 - 0.5 * (1.0 / c.len() as f64).powi(3);
        meteor_err = meteor_err.max((meteor_sentence(&c, &c).0 - want).abs());
    }
    let mut beam_bad = 0;
    for seed in 0..100 {
        let mut rng = keyed_rng(105, seed);
        let arch = if seed % 2 == 0 { Arch::PointerGenerator } else { Arch::EncoderDecoder };
        let cfg = toy_model(&mut rng, arch);
        let params: Params<f64> = perturbed(&cfg, &mut rng, 3.0);
        let n = rng.gen_range(1..8);
        let src = tokens(&mut rng, cfg.vocab_size, n);
        let g = greedy_decode(&params, &cfg, &src, 15).map_err(|e| e.to_string())?;
        let b = beam_decode(&params, &cfg, &src, &BeamConfig::greedy(15)).map_err(|e| e.to_string())?;
        beam_bad += usize::from(g.tokens != b.tokens || g.log_prob.to_bits() != b.log_prob.to_bits());
    }
    check(
        lcs_bad == 0 && bleu_err < 1e-6 && meteor_err < 1e-9 && beam_bad == 0,
        format!(
            "LCS mismatches {lcs_bad}/1000, BLEU-3(abc|abcd) err {bleu_err:.1e}, METEOR identity err {meteor_err:.1e}, beam1!=greedy {beam_bad}/100"
        ),
    )
}

fn synth(seed: u64, unpaired: usize, sizes: SplitSizes) -> SynthCorpus {
    synth_corpus(&SynthRuleSet::default(), unpaired, sizes, &mut keyed_rng(seed, 0)).unwrap()
}

fn pg_model(vocab: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        arch: Arch::PointerGenerator,
        emb_dim: 32,
        enc_hidden: 32,
        dec_hidden: 32,
        vocab_size: vocab,
        dropout,
        ..ModelConfig::default()
    }
}

fn overfit_smoke() -> Outcome {
    let t = Instant::now();
    let c = synth(201, 0, SplitSizes { train: 200, valid: 0, test: 0 });
    let vocab = Vocab::build(c.train.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]), 1, None).unwrap();
    let model = pg_model(vocab.len(), 0.0);
    let pairs = encode_pairs(&vocab, &c.train);
    let config = TrainConfig { lr: 1e-2, batch_size: 20, steps: 2000, seed: 201, ..TrainConfig::default() };
    let params: Params<f32> = Params::init(&model, &mut keyed_rng(201, 1));
    let mut trainer = Trainer::new(model.clone(), config, params, TrainData::Paired(pairs.clone())).unwrap();
    let mut reached = None;
    while trainer.step_count() < 2000 && reached.is_none() {
        trainer.step().map_err(|e| e.to_string())?;
        if trainer.step_count() % 100 == 0 {
            let acc = evaluate_pairs(&trainer.params, &model, &pairs, 50).map_err(|e| e.to_string())?;
            if acc.accuracy >= 0.99 {
                reached = Some((trainer.step_count(), acc));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    match reached {
        Some((step, acc)) => check(
            secs < 300.0,
            format!(
                "V={}, {:.2}% token accuracy at step {step} in {secs:.0}s; mean P_gen on copy positions {:.3}",
                vocab.len(),
                100.0 * acc.accuracy,
                acc.mean_p_gen_copy.unwrap_or(f64::NAN)
            ),
        ),
        None => {
            let acc = evaluate_pairs(&trainer.params, &model, &pairs, 50).map_err(|e| e.to_string())?;
            Err(format!("only {:.2}% after 2000 steps", 100.0 * acc.accuracy))
        }
    }
}

/// Mean test BLEU-3 for (baseline, MASS-1, MAPGN) on one seed.
fn transfer_run(seed: u64) -> Result<[f64; 3], String> {
    let e = |x: mapgn_core::Error| x.to_string();
    let c = synth(seed, 10_000, SplitSizes { train: 500, valid: 100, test: 200 });
    let vocab = Vocab::build(
        c.unpaired.iter().map(|s| s.as_str()).chain(c.train.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()])),
        1,
        None,
    )
    .map_err(e)?;
    let model = pg_model(vocab.len(), 0.1);
    let limits = DecodeLimits::default();
    let sentences = encode_sentences(&vocab, &c.unpaired);
    let pretrain_cfg = TrainConfig { lr: 1e-3, batch_size: 32, steps: 1500, seed, ..TrainConfig::default() };
    let finetune_cfg =
        TrainConfig { lr: 5e-3, batch_size: 20, steps: 1000, eval_every: 100, seed, ..TrainConfig::default() };
    let pairs = encode_pairs(&vocab, &c.train);

    let finetune = |init: Params<f32>| -> Result<f64, String> {
        let mut t = Trainer::new(model.clone(), finetune_cfg.clone(), init, TrainData::Paired(pairs.clone())).map_err(e)?;
        let out = fine_tune(&mut t, &vocab, &c.valid, &limits, |_, _| Ok(())).map_err(e)?;
        pairs_bleu(&out.params, &model, &vocab, &c.test, &limits).map_err(e)
    };

    let baseline = finetune(Params::init(&model, &mut keyed_rng(seed + 100, 0)))?;
    let mut scores = [baseline, 0.0, 0.0];
    for (slot, name) in [(1, "mass1"), (2, "mapgn")] {
        let spec = MaskingSpec::preset(name).map_err(e)?;
        let init: Params<f32> = Params::init(&model, &mut keyed_rng(seed, 1));
        let data = TrainData::Unpaired { sentences: sentences.clone(), spec };
        let mut t = Trainer::new(model.clone(), pretrain_cfg.clone(), init, data).map_err(e)?;
        t.run(|_, _| Ok(())).map_err(e)?;
        let (moved, _) = transfer_params(&t.params, &model, &mut keyed_rng(seed, 2)).map_err(e)?;
        scores[slot] = finetune(moved)?;
    }
    Ok(scores)
}

fn directional_reproduction() -> Outcome {
    let t = Instant::now();
    let mut sums = [0.0; 3];
    let mut per_seed = Vec::new();
    for seed in 1..=3 {
        let s = transfer_run(seed)?;
        for k in 0..3 {
            sums[k] += s[k] / 3.0;
        }
        per_seed.push(format!("seed {seed}: {:.3}/{:.3}/{:.3}", s[0], s[1], s[2]));
    }
    let secs = t.elapsed().as_secs_f64();
    let gap = if sums[2] > sums[1] { "MAPGN > MASS-1" } else { "MAPGN <= MASS-1" };
    check(
        sums[2] > sums[0] && secs < 7200.0,
        format!(
            "mean test BLEU-3 baseline {:.3}, MAPGN {:.3}; diagnostic MASS-1 {:.3} ({gap}); [{}] baseline/MASS-1/MAPGN; {secs:.0}s",
            sums[0],
            sums[2],
            sums[1],
            per_seed.join(", ")
        ),
    )
}

fn small_setup() -> (Vocab, ModelConfig, SynthCorpus) {
    let c = synth(301, 300, SplitSizes { train: 40, valid: 0, test: 10 });
    let vocab = Vocab::build(
        c.unpaired.iter().map(|s| s.as_str()).chain(c.train.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()])),
        1,
        None,
    )
    .unwrap();
    let model = ModelConfig { emb_dim: 16, enc_hidden: 16, dec_hidden: 16, ..pg_model(vocab.len(), 0.1) };
    (vocab, model, c)
}

fn losses(trainer: &mut Trainer<f64>, n: usize) -> Result<Vec<f64>, String> {
    (0..n).map(|_| trainer.step().map(|r| r.loss).map_err(|e| e.to_string())).collect()
}

fn determinism() -> Outcome {
    let (vocab, model, c) = small_setup();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let data = TrainData::Unpaired { sentences: encode_sentences(&vocab, &c.unpaired), spec: MaskingSpec::mapgn() };
        let cfg = TrainConfig { batch_size: 8, steps: 10, seed: 7, ..TrainConfig::default() };
        let params: Params<f64> = Params::init(&model, &mut keyed_rng(7, 1));
        let mut t = Trainer::new(model.clone(), cfg, params, data).map_err(|e| e.to_string())?;
        let l = losses(&mut t, 10)?;
        let paired = TrainData::Paired(encode_pairs(&vocab, &c.train));
        let cfg = TrainConfig { batch_size: 8, steps: 20, seed: 7, ..TrainConfig::default() };
        let mut t = Trainer::new(model.clone(), cfg, t.params, paired).map_err(|e| e.to_string())?;
        let l2 = losses(&mut t, 10)?;
        let sources: Vec<String> = c.test.iter().map(|p| p.0.clone()).collect();
        let decoded = decode_texts(&t.params, &model, &vocab, &sources, &DecodeLimits::default()).map_err(|e| e.to_string())?;
        runs.push((l, l2, decoded));
    }
    let same_bits = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    let (a, b) = (&runs[0], &runs[1]);
    check(
        same_bits(&a.0, &b.0) && same_bits(&a.1, &b.1) && a.2 == b.2,
        format!(
            "pre-training and fine-tuning losses bit-identical over 10 steps each; {} decodes identical",
            a.2.len()
        ),
    )
}

fn checkpoint_integrity() -> Outcome {
    let (vocab, model, c) = small_setup();
    let data = || TrainData::Unpaired { sentences: encode_sentences(&vocab, &c.unpaired), spec: MaskingSpec::mapgn() };
    let cfg = TrainConfig { batch_size: 8, steps: 20, seed: 9, ..TrainConfig::default() };
    let init: Params<f64> = Params::init(&model, &mut keyed_rng(9, 1));
    let mut straight = Trainer::new(model.clone(), cfg.clone(), init.clone(), data()).map_err(|e| e.to_string())?;
    let full = losses(&mut straight, 20)?;

    let mut first = Trainer::new(model.clone(), cfg.clone(), init, data()).map_err(|e| e.to_string())?;
    losses(&mut first, 10)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &first.checkpoint_meta(&vocab.sha256()), &first.params, Some(&first.optimizer))
        .map_err(|e| e.to_string())?;
    let ck = load_checkpoint::<f64>(&path).map_err(|e| e.to_string())?;
    ck.expect_vocab(&vocab).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(ck, cfg, data()).map_err(|e| e.to_string())?;
    let rest = losses(&mut resumed, 10)?;
    let worst = full[10..].iter().zip(&rest).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(worst <= 1e-10, format!("max |loss difference| over steps 11-20 after reload: {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradient_correctness),
        ("mixture normalization", mixture_normalization),
        ("masking conformance", masking_conformance),
        ("metric oracles", metric_oracles),
        ("overfit smoke test", overfit_smoke),
        ("directional reproduction", directional_reproduction),
        ("determinism", determinism),
        ("checkpoint integrity", checkpoint_integrity),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(d) => println!("criterion {} {name}: PASS ({d})", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({d})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
