//! Text-level pipeline pieces shared by the command line and the test suite.

use crate::decoding::{decode_all, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::bleu3;
use crate::model::{ModelConfig, Params};
use crate::tensor::Float;
use crate::training::loss::Pair;
use crate::training::trainer::{StepRecord, Trainer};
use crate::vocab::{TokenId, Vocab};

pub fn encode_pairs(vocab: &Vocab, pairs: &[(String, String)]) -> Vec<Pair> {
    pairs
        .iter()
        .map(|(s, t)| Pair {
            source: vocab.encode(s),
            target: vocab.encode(t),
        })
        .collect()
}

pub fn encode_sentences(vocab: &Vocab, sentences: &[String]) -> Vec<Vec<TokenId>> {
    sentences.iter().map(|s| vocab.encode(s)).collect()
}

/// Decoding limits for text-level decoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeLimits {
    pub beam: BeamConfig,
    /// Output cap relative to the source: `ratio·|source| + slack` tokens.
    pub max_len_ratio: f64,
    pub max_len_slack: usize,
    pub threads: usize,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        Self {
            beam: BeamConfig {
                beam: 1,
                max_len: 200,
                length_norm: false,
            },
            max_len_ratio: 2.0,
            max_len_slack: 10,
            threads: 1,
        }
    }
}

/// Decodes source texts to output texts. Sources longer than the model's
/// `max_len` are truncated; empty sources decode to empty outputs.
pub fn decode_texts<F: Float>(
    params: &Params<F>,
    model: &ModelConfig,
    vocab: &Vocab,
    sources: &[String],
    limits: &DecodeLimits,
) -> Result<Vec<String>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    let encoded: Vec<Vec<TokenId>> = sources
        .iter()
        .map(|s| {
            let mut ids = vocab.encode(s);
            ids.truncate(model.max_len);
            ids
        })
        .collect();
    for (i, ids) in encoded.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let cap = ((limits.max_len_ratio * ids.len() as f64).ceil() as usize + limits.max_len_slack)
            .min(limits.beam.max_len);
        match groups.iter_mut().find(|(c, _)| *c == cap) {
            Some((_, v)) => v.push(i),
            None => groups.push((cap, vec![i])),
        }
    }
    let mut out = vec![String::new(); sources.len()];
    for (cap, idx) in groups {
        let batch: Vec<Vec<TokenId>> = idx.iter().map(|&i| encoded[i].clone()).collect();
        let bc = BeamConfig {
            max_len: cap,
            ..limits.beam
        };
        let hyps = decode_all(params, model, &batch, &bc, limits.threads)?;
        for (&i, h) in idx.iter().zip(hyps) {
            out[i] = vocab.decode(&h.tokens)?;
        }
    }
    Ok(out)
}

/// Corpus BLEU-3 of the model's decodes against reference pairs.
pub fn pairs_bleu<F: Float>(
    params: &Params<F>,
    model: &ModelConfig,
    vocab: &Vocab,
    pairs: &[(String, String)],
    limits: &DecodeLimits,
) -> Result<f64> {
    let (src, refs): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
    let hyps = decode_texts(params, model, vocab, &src, limits)?;
    bleu3(&hyps, &refs)
}

/// Best validation point seen during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Selection {
    pub step: u64,
    pub bleu3: f64,
}

/// Outcome of [`fine_tune`]: the kept parameters and what was logged.
pub struct FineTuned<F> {
    pub params: Params<F>,
    pub selection: Option<Selection>,
    pub records: Vec<StepRecord>,
}

/// Runs the trainer to completion. With validation pairs and a positive
/// `eval_every`, keeps the parameters with the best validation BLEU-3
/// (earliest on ties); otherwise keeps the final parameters.
pub fn fine_tune<F: Float>(
    trainer: &mut Trainer<F>,
    vocab: &Vocab,
    valid: &[(String, String)],
    limits: &DecodeLimits,
    mut on_step: impl FnMut(&Trainer<F>, &StepRecord) -> Result<()>,
) -> Result<FineTuned<F>> {
    let every = trainer.config.eval_every;
    let selecting = every > 0 && !valid.is_empty();
    let mut best: Option<(Selection, Params<F>)> = None;
    let total = trainer.config.steps;
    let model = trainer.model.clone();
    let records = trainer.run(|t, r| {
        on_step(t, r)?;
        if selecting && (r.step % every == 0 || r.step == total) {
            let b = pairs_bleu(&t.params, &model, vocab, valid, limits)?;
            if best.as_ref().is_none_or(|(s, _)| b > s.bleu3) {
                best = Some((Selection { step: r.step, bleu3: b }, t.params.clone()));
            }
        }
        Ok(())
    })?;
    if records.is_empty() && selecting {
        return Err(Error::Invalid("no steps to run; raise steps".into()));
    }
    Ok(match best {
        Some((s, p)) => FineTuned {
            params: p,
            selection: Some(s),
            records,
        },
        None => FineTuned {
            params: trainer.params.clone(),
            selection: None,
            records,
        },
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tensors: usize,
    pub coordinates: usize,
}

/// Toy pointer-generator used for the whole-model gradient check:
/// vocabulary 7, every width 4, one layer each side.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        arch: crate::model::Arch::PointerGenerator,
        emb_dim: 4,
        enc_layers: 1,
        enc_hidden: 4,
        dec_layers: 1,
        dec_hidden: 4,
        vocab_size: 7,
        dropout: 0.0,
        max_len: 10,
    }
}

/// Central-difference check of the full teacher-forced loss over every
/// parameter, on a source of length 3 with 2 decoder steps plus a shorter
/// padded row.
pub fn model_grad_check(model: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    use crate::model::{Bound, Mode};
    use crate::tensor::grad_check_many;
    use crate::training::loss::fine_tune_loss;
    use rand::Rng;

    let mut rng = crate::rng::keyed_rng(seed, 0);
    let mut params: Params<f64> = Params::init(model, &mut rng);
    // Move away from zero biases so that every path carries gradient.
    for (_, t) in params.iter_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let hi = model.vocab_size;
    let lo = crate::vocab::NUM_SPECIALS.min(hi - 1);
    let mut tok = || rng.gen_range(lo..hi);
    let pairs = [
        Pair { source: vec![tok(), tok(), tok()], target: vec![tok()] },
        Pair { source: vec![tok(), tok()], target: vec![] },
    ];
    let names: Vec<String> = params.names().cloned().collect();
    let points: Vec<_> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let err = grad_check_many(&points, 1e-5, |g, vars| {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let refs: Vec<&Pair> = pairs.iter().collect();
        Ok(fine_tune_loss(g, &bound, model, &refs, 0.1, &mut Mode::Eval)?.loss)
    });
    Ok(GradCheckReport {
        max_rel_err: err,
        tensors: points.len(),
        coordinates: points.iter().map(|p| p.numel()).sum(),
    })
}
