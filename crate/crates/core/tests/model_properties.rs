//! Copy-mixture, architecture-transfer and search properties over many
//! random models.

use mapgn_core::decoding::{beam_decode, greedy_decode, sequence_log_prob, BeamConfig};
use mapgn_core::model::{encode, forward_teacher_forced, mix_distributions, Arch, Bound, Mode, ModelConfig, Padded, Params};
use mapgn_core::rng::keyed_rng;
use mapgn_core::tensor::Graph;
use mapgn_core::training::trainer::transfer_params;
use mapgn_core::vocab::{TokenId, EOS, NUM_SPECIALS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_config(rng: &mut impl Rng, arch: Arch) -> ModelConfig {
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

/// Initialized parameters scaled up so that distributions are far from
/// uniform and search decisions are not all ties.
fn random_params<F: mapgn_core::tensor::Float>(cfg: &ModelConfig, rng: &mut ChaCha8Rng, scale: f64) -> Params<F> {
    let mut p: Params<F> = Params::init(cfg, rng);
    for (_, t) in p.iter_mut() {
        for x in t.data_mut() {
            *x = *x * F::from(scale).unwrap() + F::from(rng.gen_range(-0.2..0.2)).unwrap();
        }
    }
    p
}

fn random_tokens(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(NUM_SPECIALS..vocab)).collect()
}

#[test]
fn mixture_is_normalized_and_copy_free_tokens_keep_generator_mass() {
    let mut rng = keyed_rng(21, 0);
    let mut checked = 0usize;
    for _ in 0..1000 {
        let cfg = random_config(&mut rng, Arch::PointerGenerator);
        let params: Params<f32> = random_params(&cfg, &mut rng, 4.0);
        let rows = rng.gen_range(1..4);
        let sources: Vec<Vec<TokenId>> = (0..rows)
            .map(|_| {
                let n = rng.gen_range(1..6);
                random_tokens(&mut rng, cfg.vocab_size, n)
            })
            .collect();
        let inputs: Vec<Vec<TokenId>> = (0..rows)
            .map(|_| {
                let n = rng.gen_range(1..4);
                random_tokens(&mut rng, cfg.vocab_size, n)
            })
            .collect();
        let src = Padded::new(&sources.iter().map(|s| s.as_slice()).collect::<Vec<_>>()).unwrap();
        let dec = Padded::new(&inputs.iter().map(|s| s.as_slice()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &params);
        let out = forward_teacher_forced(&mut g, &bound, &cfg, &src, &dec, &mut Mode::Eval).unwrap();
        let v = cfg.vocab_size;
        let steps = dec.width;
        let probs = g.value(out.probs).to_vec();
        let gen = g.value(out.gen).to_vec();
        let p_gen = g.value(out.p_gen.unwrap()).to_vec();
        for r in 0..rows {
            for t in 0..inputs[r].len() {
                let k = r * steps + t;
                let row = &probs[k * v..(k + 1) * v];
                let sum: f64 = row.iter().map(|&x| x as f64).sum();
                assert!((sum - 1.0).abs() < 1e-5, "sum {sum}");
                assert!(row.iter().all(|&x| x >= 0.0));
                for tok in 0..v {
                    if !sources[r].contains(&tok) {
                        assert_eq!(row[tok], p_gen[k] * gen[k * v + tok], "token {tok}");
                    }
                }
                checked += 1;
            }
        }
    }
    assert!(checked >= 1000);
}

#[test]
fn slice_mixture_matches_definition() {
    let mut rng = keyed_rng(22, 0);
    for _ in 0..1000 {
        let v = rng.gen_range(3..12);
        let m = rng.gen_range(1..8);
        let mut gen: Vec<f64> = (0..v).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = gen.iter().sum();
        gen.iter_mut().for_each(|x| *x /= s);
        let mut alpha: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = alpha.iter().sum();
        alpha.iter_mut().for_each(|x| *x /= s);
        let ids: Vec<usize> = (0..m).map(|_| rng.gen_range(0..v)).collect();
        let p: f64 = rng.gen_range(0.0..1.0);
        let out = mix_distributions(&gen, p, &alpha, &ids).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for t in 0..v {
            let copy: f64 = ids.iter().zip(&alpha).filter(|(i, _)| **i == t).map(|(_, a)| a).sum();
            assert!((out[t] - (p * gen[t] + (1.0 - p) * copy)).abs() < 1e-15);
        }
    }
}

#[test]
fn transfer_between_architectures_preserves_encoder_output() {
    let mut rng = keyed_rng(23, 0);
    for i in 0..20 {
        let (from, to) = if i % 2 == 0 {
            (Arch::PointerGenerator, Arch::EncoderDecoder)
        } else {
            (Arch::EncoderDecoder, Arch::PointerGenerator)
        };
        let cfg = random_config(&mut rng, from);
        let target = ModelConfig { arch: to, ..cfg.clone() };
        let params: Params<f64> = random_params(&cfg, &mut rng, 2.0);
        let (moved, report) = transfer_params(&params, &target, &mut rng).unwrap();
        assert!(report.fresh.is_empty() != report.dropped.is_empty());
        let n = rng.gen_range(1..7);
        let source = random_tokens(&mut rng, cfg.vocab_size, n);
        let src = Padded::new(&[&source]).unwrap();
        let run = |c: &ModelConfig, p: &Params<f64>| {
            let mut g = Graph::new();
            let b = Bound::new(&mut g, p);
            let e = encode(&mut g, &b, c, &src, &mut Mode::Eval).unwrap();
            (g.value(e.h).to_vec(), g.value(e.summary).to_vec())
        };
        assert_eq!(run(&cfg, &params), run(&target, &moved));
    }
}

fn search_case(seed: u64) -> (ModelConfig, Params<f64>, Vec<TokenId>) {
    let mut rng = keyed_rng(24, seed);
    let arch = if seed % 3 == 0 { Arch::EncoderDecoder } else { Arch::PointerGenerator };
    let cfg = random_config(&mut rng, arch);
    let mut params: Params<f64> = random_params(&cfg, &mut rng, 3.0);
    // Raise EOS so that a good share of searches terminate.
    params.get_mut("generator.out.bias").unwrap().data_mut()[EOS] += rng.gen_range(0.0..3.0);
    let n = rng.gen_range(1..8);
    let source = random_tokens(&mut rng, cfg.vocab_size, n);
    (cfg, params, source)
}

#[test]
fn beam_one_is_greedy_bit_for_bit() {
    for seed in 0..100 {
        let (cfg, params, source) = search_case(seed);
        let g = greedy_decode(&params, &cfg, &source, 12).unwrap();
        let b = beam_decode(&params, &cfg, &source, &BeamConfig::greedy(12)).unwrap();
        assert_eq!(g.tokens, b.tokens, "seed {seed}");
        assert_eq!(g.log_prob.to_bits(), b.log_prob.to_bits(), "seed {seed}");
        assert_eq!(g.finished, b.finished);
    }
}

#[test]
fn reported_scores_match_rescoring() {
    for seed in 0..30 {
        let (cfg, params, source) = search_case(seed);
        let h = beam_decode(&params, &cfg, &source, &BeamConfig { beam: 3, max_len: 12, length_norm: false }).unwrap();
        if h.finished {
            let lp = sequence_log_prob(&params, &cfg, &source, &h.tokens).unwrap();
            assert!((lp - h.log_prob).abs() < 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn beam_three_finds_at_least_the_greedy_score() {
    // Scores are comparable when both searches finished, or when neither did
    // (both then hold exactly `max_len` tokens with no EOS term).
    let mut compared = 0;
    for seed in 0..100 {
        let (cfg, params, source) = search_case(seed);
        let g = greedy_decode(&params, &cfg, &source, 30).unwrap();
        let b = beam_decode(&params, &cfg, &source, &BeamConfig { beam: 3, max_len: 30, length_norm: false }).unwrap();
        if g.finished == b.finished {
            assert!(b.log_prob >= g.log_prob - 1e-12, "seed {seed}: beam {} < greedy {}", b.log_prob, g.log_prob);
            compared += 1;
        }
    }
    assert!(compared >= 50, "{compared}");
}

#[test]
fn beam_score_is_monotone_in_width() {
    let mut compared = 0;
    for seed in 0..100 {
        let (cfg, params, source) = search_case(seed);
        let scores: Vec<(bool, f64)> = (1..=5)
            .map(|k| {
                let h = beam_decode(&params, &cfg, &source, &BeamConfig { beam: k, max_len: 30, length_norm: false }).unwrap();
                (h.finished, h.log_prob)
            })
            .collect();
        for w in scores.windows(2) {
            if let [(fa, a), (fb, b)] = w {
                if fa != fb {
                    continue;
                }
                assert!(*b >= a - 1e-12, "seed {seed}: {scores:?}");
                compared += 1;
            }
        }
    }
    assert!(compared >= 200, "{compared}");
}
