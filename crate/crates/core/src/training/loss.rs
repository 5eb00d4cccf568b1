//! Label-smoothed negative log-likelihood for fine-tuning (paired data) and
//! span-masked pre-training.

use crate::error::{Error, Result};
use crate::masking::MaskedExample;
use crate::model::{forward_teacher_forced, Bound, Mode, ModelConfig, Padded};
use crate::tensor::{Float, Graph, Var};
use crate::vocab::{TokenId, BOS, EOS, PAD};

/// Keeps `ln` finite for zero-probability tokens.
pub const PROB_FLOOR: f64 = 1e-12;

/// Smoothed target `q = (1−ε)·onehot(target) + ε/V_eff` over every index not
/// in `exclude`; excluded indices get zero mass.
pub fn smoothing_target(vocab: usize, target: TokenId, eps: f64, exclude: &[TokenId]) -> Vec<f64> {
    let support = vocab - exclude.iter().filter(|&&t| t < vocab).count();
    let share = if support == 0 { 0.0 } else { eps / support as f64 };
    let mut q: Vec<f64> = (0..vocab)
        .map(|t| if exclude.contains(&t) { 0.0 } else { share })
        .collect();
    q[target] += 1.0 - eps;
    q
}

/// `−Σ_t q[t]·ln(dist[t] + floor)` for a single distribution.
pub fn smoothed_nll(dist: &[f64], target: TokenId, eps: f64, exclude: &[TokenId]) -> f64 {
    smoothing_target(dist.len(), target, eps, exclude)
        .iter()
        .zip(dist)
        .map(|(&q, &p)| -q * (p + PROB_FLOOR).ln())
        .sum()
}

/// A paired training example, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl Pair {
    /// Truncates to `max_len` tokens on the source side and `max_len − 1` on
    /// the target side so that `BOS ++ target` fits.
    pub fn truncated(source: &[TokenId], target: &[TokenId], max_len: usize) -> Self {
        Self {
            source: source[..source.len().min(max_len)].to_vec(),
            target: target[..target.len().min(max_len.saturating_sub(1))].to_vec(),
        }
    }

    pub fn decoder_input(&self) -> Vec<TokenId> {
        std::iter::once(BOS).chain(self.target.iter().copied()).collect()
    }

    pub fn decoder_target(&self) -> Vec<TokenId> {
        self.target.iter().copied().chain(std::iter::once(EOS)).collect()
    }
}

/// Teacher-forced training batch.
pub struct LossBatch {
    pub source: Padded,
    pub decoder_input: Padded,
    /// Right-padded with PAD to the decoder width.
    pub targets: Padded,
}

impl LossBatch {
    pub fn from_pairs(pairs: &[&Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let src: Vec<&[TokenId]> = pairs.iter().map(|p| &p.source[..]).collect();
        let dec: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.decoder_input()).collect();
        let tgt: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.decoder_target()).collect();
        Self::build(&src, &dec, &tgt)
    }

    pub fn from_masked(examples: &[&MaskedExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let src: Vec<&[TokenId]> = examples.iter().map(|e| &e.encoder_input[..]).collect();
        let dec: Vec<Vec<TokenId>> = examples.iter().map(|e| e.decoder_input.clone()).collect();
        let tgt: Vec<Vec<TokenId>> = examples.iter().map(|e| e.targets.clone()).collect();
        Self::build(&src, &dec, &tgt)
    }

    fn build(src: &[&[TokenId]], dec: &[Vec<TokenId>], tgt: &[Vec<TokenId>]) -> Result<Self> {
        if dec.iter().zip(tgt).any(|(d, t)| d.len() != t.len()) {
            return Err(Error::Invalid("decoder input and target lengths differ".into()));
        }
        let dec_refs: Vec<&[TokenId]> = dec.iter().map(|d| &d[..]).collect();
        let tgt_refs: Vec<&[TokenId]> = tgt.iter().map(|t| &t[..]).collect();
        Ok(Self {
            source: Padded::new(src)?,
            decoder_input: Padded::new(&dec_refs)?,
            targets: Padded::new(&tgt_refs)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.source.rows()
    }

    /// Number of non-PAD target steps.
    pub fn target_steps(&self) -> usize {
        self.targets.lens.iter().sum()
    }
}

/// Loss node plus the forward outputs it was computed from.
pub struct LossOutput {
    pub loss: Var,
    pub probs: Var,
    pub p_gen: Option<Var>,
}

/// Batch mean of per-sentence summed smoothed NLL. PAD target steps
/// contribute nothing and receive no gradient.
pub fn batch_loss<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &LossBatch,
    eps: f64,
    mode: &mut Mode,
) -> Result<LossOutput> {
    let out = forward_teacher_forced(g, p, cfg, &batch.source, &batch.decoder_input, mode)?;
    let v = cfg.vocab_size;
    let rows = batch.rows();
    let width = batch.targets.width;
    let scale = -1.0 / rows as f64;
    let mut weights = vec![F::zero(); rows * width * v];
    for r in 0..rows {
        for t in 0..batch.targets.lens[r] {
            let target = batch.targets.ids[r * width + t];
            let q = smoothing_target(v, target, eps, &[PAD]);
            let o = (r * width + t) * v;
            for (w, qv) in weights[o..o + v].iter_mut().zip(q) {
                *w = F::of(qv * scale);
            }
        }
    }
    let logp = g.ln_floor(out.probs, F::of(PROB_FLOOR));
    let loss = g.dot_const(logp, weights)?;
    Ok(LossOutput {
        loss,
        probs: out.probs,
        p_gen: out.p_gen,
    })
}

/// Fine-tuning loss on paired data: decoder input `BOS ++ Y`, targets
/// `Y ++ EOS`.
pub fn fine_tune_loss<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &ModelConfig,
    pairs: &[&Pair],
    eps: f64,
    mode: &mut Mode,
) -> Result<LossOutput> {
    batch_loss(g, p, cfg, &LossBatch::from_pairs(pairs)?, eps, mode)
}

/// Pre-training loss: reconstruct the span from the corrupted sentence.
pub fn pretrain_loss<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &ModelConfig,
    examples: &[&MaskedExample],
    eps: f64,
    mode: &mut Mode,
) -> Result<LossOutput> {
    batch_loss(g, p, cfg, &LossBatch::from_masked(examples)?, eps, mode)
}
