//! Token-span masking for self-supervised pre-training.
//!
//! One contiguous span of roughly half the sentence is selected. Each span
//! position is independently replaced with MASK, replaced with a random
//! token, or left unchanged. The four presets differ in those probabilities
//! and in where random tokens come from: the whole vocabulary (MASS-1/2) or
//! the original tokens of the span itself (MAPGN).
//!
//! The decoder is fed only the span prefix `y[a-1] ++ y[a..b-1]` (BOS when the
//! span starts the sentence) and predicts `y[a..=b]`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{is_special, TokenId, Vocab, BOS, MASK, NUM_SPECIALS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomSource {
    /// Uniform over every non-special vocabulary token.
    AllVocab,
    /// Uniform, with replacement, over the span's original tokens.
    MaskingSpan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSpec {
    pub name: String,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_unchanged: f64,
    pub random_source: RandomSource,
    #[serde(default = "default_span_ratio")]
    pub span_ratio: f64,
}

fn default_span_ratio() -> f64 {
    0.5
}

pub const PRESET_NAMES: [&str; 4] = ["mass1", "mass2", "mass3", "mapgn"];

impl MaskingSpec {
    pub fn new(
        name: impl Into<String>,
        p_mask: f64,
        p_random: f64,
        p_unchanged: f64,
        random_source: RandomSource,
        span_ratio: f64,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            p_mask,
            p_random,
            p_unchanged,
            random_source,
            span_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_mask, self.p_random, self.p_unchanged];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid(format!(
                "masking spec {}: probabilities must lie in [0, 1], got {ps:?}",
                self.name
            )));
        }
        if (ps.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "masking spec {}: probabilities {ps:?} do not sum to 1",
                self.name
            )));
        }
        if !(self.span_ratio > 0.0 && self.span_ratio <= 1.0) {
            return Err(Error::Invalid(format!(
                "masking spec {}: span ratio {} outside (0, 1]",
                self.name, self.span_ratio
            )));
        }
        Ok(())
    }

    /// 80% MASK, 10% random from all tokens, 10% unchanged.
    pub fn mass1() -> Self {
        Self::preset_unchecked("mass1", 0.8, 0.1, 0.1, RandomSource::AllVocab)
    }

    /// 40% MASK, 40% random from all tokens, 20% unchanged.
    pub fn mass2() -> Self {
        Self::preset_unchecked("mass2", 0.4, 0.4, 0.2, RandomSource::AllVocab)
    }

    /// 40% MASK, 60% unchanged.
    pub fn mass3() -> Self {
        Self::preset_unchecked("mass3", 0.4, 0.0, 0.6, RandomSource::AllVocab)
    }

    /// 40% MASK, 40% random from the masking span, 20% unchanged.
    pub fn mapgn() -> Self {
        Self::preset_unchecked("mapgn", 0.4, 0.4, 0.2, RandomSource::MaskingSpan)
    }

    fn preset_unchecked(name: &str, m: f64, r: f64, u: f64, src: RandomSource) -> Self {
        Self {
            name: name.into(),
            p_mask: m,
            p_random: r,
            p_unchanged: u,
            random_source: src,
            span_ratio: 0.5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mass1" => Ok(Self::mass1()),
            "mass2" => Ok(Self::mass2()),
            "mass3" => Ok(Self::mass3()),
            "mapgn" => Ok(Self::mapgn()),
            other => Err(Error::Invalid(format!(
                "unknown masking preset {other:?} (expected one of {PRESET_NAMES:?})"
            ))),
        }
    }

    fn draw_action(&self, rng: &mut impl Rng) -> Action {
        let u: f64 = rng.gen();
        if u < self.p_mask {
            Action::Mask
        } else if u < self.p_mask + self.p_random {
            Action::Random
        } else {
            Action::Unchanged
        }
    }
}

/// 1-based inclusive span `[a, b]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub a: usize,
    pub b: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.b - self.a + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.a - 1..self.b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Mask,
    Random,
    Unchanged,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub encoder_input: Vec<TokenId>,
    pub decoder_input: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub span: Span,
}

/// Span length for a sentence of `n` tokens: `max(1, floor(ratio·n + 0.5))`.
pub fn span_length(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).clamp(1, n.max(1))
}

pub fn sample_span(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<Span> {
    if n == 0 {
        return Err(Error::Invalid("cannot select a span in an empty sentence".into()));
    }
    let k = span_length(n, ratio);
    let a = rng.gen_range(1..=n - k + 1);
    Ok(Span { a, b: a + k - 1 })
}

fn check_tokens(tokens: &[TokenId]) -> Result<()> {
    if let Some(pos) = tokens.iter().position(|&t| is_special(t)) {
        return Err(Error::Invalid(format!(
            "special token id {} at position {} in a sentence offered to masking",
            tokens[pos],
            pos + 1
        )));
    }
    Ok(())
}

fn check_span(n: usize, span: Span) -> Result<()> {
    if span.a < 1 || span.a > span.b || span.b > n {
        return Err(Error::Invalid(format!(
            "span ({}, {}) out of range for length {n}",
            span.a, span.b
        )));
    }
    Ok(())
}

/// Per-position record of what the corruption did.
#[derive(Clone, Debug)]
pub struct Corruption {
    pub output: Vec<TokenId>,
    pub actions: Vec<Action>,
}

/// Corrupts `tokens[a..=b]` according to `spec`, tracing the per-position
/// actions. `vocab_size` bounds the all-vocabulary random source.
pub fn corrupt_span_traced(
    tokens: &[TokenId],
    span: Span,
    spec: &MaskingSpec,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<Corruption> {
    check_span(tokens.len(), span)?;
    check_tokens(tokens)?;
    if spec.p_random > 0.0
        && spec.random_source == RandomSource::AllVocab
        && vocab_size <= NUM_SPECIALS
    {
        return Err(Error::Invalid("vocabulary has no regular tokens to sample".into()));
    }
    let original = &tokens[span.range()];
    let mut output = tokens.to_vec();
    let mut actions = Vec::with_capacity(span.len());
    for pos in span.range() {
        let action = spec.draw_action(rng);
        output[pos] = match action {
            Action::Mask => MASK,
            Action::Unchanged => tokens[pos],
            Action::Random => match spec.random_source {
                RandomSource::AllVocab => rng.gen_range(NUM_SPECIALS..vocab_size),
                RandomSource::MaskingSpan => original[rng.gen_range(0..original.len())],
            },
        };
        actions.push(action);
    }
    Ok(Corruption { output, actions })
}

pub fn corrupt_span(
    tokens: &[TokenId],
    span: Span,
    spec: &MaskingSpec,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    corrupt_span_traced(tokens, span, spec, vocab_size, rng).map(|c| c.output)
}

/// Builds the pre-training example for a given span.
pub fn example_for_span(
    sentence: &[TokenId],
    span: Span,
    spec: &MaskingSpec,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<MaskedExample> {
    let encoder_input = corrupt_span(sentence, span, spec, vocab_size, rng)?;
    let prev = if span.a == 1 { BOS } else { sentence[span.a - 2] };
    let mut decoder_input = Vec::with_capacity(span.len());
    decoder_input.push(prev);
    decoder_input.extend_from_slice(&sentence[span.a - 1..span.b - 1]);
    Ok(MaskedExample {
        encoder_input,
        decoder_input,
        targets: sentence[span.range()].to_vec(),
        span,
    })
}

pub fn build_pretrain_example(
    sentence: &[TokenId],
    spec: &MaskingSpec,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<MaskedExample> {
    check_tokens(sentence)?;
    let span = sample_span(sentence.len(), spec.span_ratio, rng)?;
    example_for_span(sentence, span, spec, vocab_size, rng)
}

/// Aggregate statistics over many corruptions, for auditing a spec.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MaskingStats {
    pub positions: usize,
    pub mask: usize,
    pub random: usize,
    pub unchanged: usize,
    pub span_lengths: BTreeMap<usize, usize>,
    /// Random replacements whose value is in the original span multiset.
    pub random_in_span: usize,
    pub special_random: usize,
    pub span_length_violations: usize,
    pub outside_span_changes: usize,
}

impl MaskingStats {
    pub fn fractions(&self) -> (f64, f64, f64) {
        let n = self.positions.max(1) as f64;
        (
            self.mask as f64 / n,
            self.random as f64 / n,
            self.unchanged as f64 / n,
        )
    }

    /// Share of random replacements drawn from the span; 1.0 when no random
    /// replacement happened.
    pub fn containment_rate(&self) -> f64 {
        if self.random == 0 {
            1.0
        } else {
            self.random_in_span as f64 / self.random as f64
        }
    }
}

/// Corrupts `samples` sentences (cycling through `corpus`) and tallies what
/// happened.
pub fn masking_report(
    corpus: &[Vec<TokenId>],
    spec: &MaskingSpec,
    vocab_size: usize,
    rng: &mut impl Rng,
    samples: usize,
) -> Result<MaskingStats> {
    if corpus.is_empty() {
        return Err(Error::Invalid("masking report needs a non-empty corpus".into()));
    }
    if samples == 0 {
        return Err(Error::Invalid("masking report needs at least one sample".into()));
    }
    let mut stats = MaskingStats::default();
    for i in 0..samples {
        let sentence = &corpus[i % corpus.len()];
        let span = sample_span(sentence.len(), spec.span_ratio, rng)?;
        let c = corrupt_span_traced(sentence, span, spec, vocab_size, rng)?;
        let original = &sentence[span.range()];
        *stats.span_lengths.entry(span.len()).or_default() += 1;
        if span.len() != span_length(sentence.len(), spec.span_ratio) {
            stats.span_length_violations += 1;
        }
        stats.outside_span_changes += (0..sentence.len())
            .filter(|p| !span.range().contains(p) && c.output[*p] != sentence[*p])
            .count();
        for (j, &action) in c.actions.iter().enumerate() {
            stats.positions += 1;
            match action {
                Action::Mask => stats.mask += 1,
                Action::Unchanged => stats.unchanged += 1,
                Action::Random => {
                    stats.random += 1;
                    let value = c.output[span.a - 1 + j];
                    if original.contains(&value) {
                        stats.random_in_span += 1;
                    }
                    if is_special(value) {
                        stats.special_random += 1;
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// One tab-separated preview row: original, encoder input, decoder input,
/// targets, a, b.
pub fn preview_line(vocab: &Vocab, original: &[TokenId], ex: &MaskedExample) -> Result<String> {
    Ok(format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        vocab.decode(original)?,
        vocab.decode(&ex.encoder_input)?,
        vocab.decode(&ex.decoder_input)?,
        vocab.decode(&ex.targets)?,
        ex.span.a,
        ex.span.b
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::mock::StepRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const V: usize = 40;

    fn sentence(n: usize) -> Vec<TokenId> {
        (0..n).map(|i| NUM_SPECIALS + 10 + i).collect()
    }

    #[test]
    fn presets_sum_to_one() {
        for name in PRESET_NAMES {
            MaskingSpec::preset(name).unwrap().validate().unwrap();
        }
        assert!(MaskingSpec::new("bad", 0.5, 0.5, 0.1, RandomSource::AllVocab, 0.5).is_err());
        assert!(MaskingSpec::preset("mass4").is_err());
    }

    #[test]
    fn span_length_rule() {
        assert_eq!(span_length(10, 0.5), 5);
        assert_eq!(span_length(7, 0.5), 4);
        assert_eq!(span_length(1, 0.5), 1);
        assert_eq!(span_length(2, 0.1), 1);
    }

    #[test]
    fn sample_span_is_uniform_over_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hits = [0usize; 7];
        let trials = 60_000;
        for _ in 0..trials {
            let s = sample_span(10, 0.5, &mut rng).unwrap();
            assert_eq!(s.len(), 5);
            hits[s.a] += 1;
        }
        assert_eq!(hits[0], 0);
        for &h in &hits[1..] {
            let p = h as f64 / trials as f64;
            assert!((p - 1.0 / 6.0).abs() < 0.01, "{p}");
        }
        let s = sample_span(1, 0.5, &mut rng).unwrap();
        assert_eq!(s, Span { a: 1, b: 1 });
        for _ in 0..100 {
            let s = sample_span(7, 0.5, &mut rng).unwrap();
            assert!(s.len() == 4 && (1..=4).contains(&s.a));
        }
        assert!(sample_span(0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn all_unchanged_draws_are_identity() {
        // All-ones bits make every uniform draw land just below 1.
        let mut rng = StepRng::new(u64::MAX, 0);
        let y = sentence(8);
        let out = corrupt_span(&y, Span { a: 2, b: 7 }, &MaskingSpec::mass3(), V, &mut rng).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn mapgn_random_tokens_come_from_the_span() {
        let y = sentence(8);
        let span = Span { a: 3, b: 6 };
        let allowed = &y[2..6];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen_random = 0;
        for _ in 0..2000 {
            let c = corrupt_span_traced(&y, span, &MaskingSpec::mapgn(), V, &mut rng).unwrap();
            for (j, a) in c.actions.iter().enumerate() {
                if *a == Action::Random {
                    seen_random += 1;
                    assert!(allowed.contains(&c.output[2 + j]));
                }
            }
        }
        assert!(seen_random > 0);
    }

    #[test]
    fn corrupt_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = sentence(4);
        let spec = MaskingSpec::mass1();
        assert!(corrupt_span(&y, Span { a: 0, b: 2 }, &spec, V, &mut rng).is_err());
        assert!(corrupt_span(&y, Span { a: 3, b: 5 }, &spec, V, &mut rng).is_err());
        assert!(corrupt_span(&y, Span { a: 3, b: 2 }, &spec, V, &mut rng).is_err());
        let mut bad = y.clone();
        bad[1] = MASK;
        assert!(corrupt_span(&bad, Span { a: 1, b: 2 }, &spec, V, &mut rng).is_err());
        assert!(build_pretrain_example(&bad, &spec, V, &mut rng).is_err());
        assert!(build_pretrain_example(&[], &spec, V, &mut rng).is_err());
    }

    #[test]
    fn pretrain_example_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = sentence(8);
        let ex = example_for_span(&y, Span { a: 3, b: 6 }, &MaskingSpec::mass1(), V, &mut rng).unwrap();
        assert_eq!(ex.decoder_input, vec![y[1], y[2], y[3], y[4]]);
        assert_eq!(ex.targets, vec![y[2], y[3], y[4], y[5]]);

        let y1 = sentence(1);
        let ex = example_for_span(&y1, Span { a: 1, b: 1 }, &MaskingSpec::mass1(), V, &mut rng).unwrap();
        assert_eq!(ex.decoder_input, vec![BOS]);
        assert_eq!(ex.targets, y1);

        let y4 = sentence(4);
        let ex = example_for_span(&y4, Span { a: 1, b: 2 }, &MaskingSpec::mass1(), V, &mut rng).unwrap();
        assert_eq!(ex.decoder_input, vec![BOS, y4[0]]);
        assert_eq!(ex.targets, vec![y4[0], y4[1]]);
    }

    #[test]
    fn report_examples() {
        let corpus = vec![sentence(10), sentence(10)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stats = masking_report(&corpus, &MaskingSpec::mapgn(), V, &mut rng, 10_000).unwrap();
        assert_eq!(stats.containment_rate(), 1.0);
        assert_eq!(stats.span_lengths.len(), 1);
        assert_eq!(stats.span_lengths[&5], 10_000);

        let stats = masking_report(&corpus, &MaskingSpec::mass2(), V, &mut rng, 20_000).unwrap();
        let (m, r, u) = stats.fractions();
        assert_eq!(stats.positions, 100_000);
        assert!((m - 0.4).abs() < 0.01 && (r - 0.4).abs() < 0.01 && (u - 0.2).abs() < 0.01);
        assert_eq!(stats.special_random, 0);

        assert!(masking_report(&[], &MaskingSpec::mass2(), V, &mut rng, 1).is_err());
    }

    #[test]
    fn preview_renders_mask() {
        let vocab = Vocab::build(["abcdef"], 1, None).unwrap();
        let y = vocab.encode("abcdef");
        let ex = MaskedExample {
            encoder_input: vec![y[0], MASK, y[2], y[3], y[4], y[5]],
            decoder_input: vec![y[0], y[1]],
            targets: vec![y[1], y[2]],
            span: Span { a: 2, b: 3 },
        };
        assert_eq!(
            preview_line(&vocab, &y, &ex).unwrap(),
            "abcdef\ta\u{2581}Mcdef\tab\tbc\t2\t3"
        );
    }

    fn any_spec() -> impl Strategy<Value = MaskingSpec> {
        prop_oneof![
            Just(MaskingSpec::mass1()),
            Just(MaskingSpec::mass2()),
            Just(MaskingSpec::mass3()),
            Just(MaskingSpec::mapgn()),
        ]
    }

    proptest! {
        #[test]
        fn corruption_preserves_outside_and_length(
            spec in any_spec(),
            toks in proptest::collection::vec(NUM_SPECIALS..V, 1..30),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = build_pretrain_example(&toks, &spec, V, &mut rng).unwrap();
            let (a, b) = (ex.span.a, ex.span.b);
            prop_assert_eq!(ex.encoder_input.len(), toks.len());
            prop_assert_eq!(b - a + 1, span_length(toks.len(), 0.5));
            for p in 0..toks.len() {
                if p + 1 < a || p + 1 > b {
                    prop_assert_eq!(ex.encoder_input[p], toks[p]);
                } else if ex.encoder_input[p] != MASK {
                    prop_assert!(!is_special(ex.encoder_input[p]));
                }
            }
            prop_assert_eq!(&ex.targets[..], &toks[a - 1..b]);
            prop_assert_eq!(ex.decoder_input[0] == BOS, a == 1);
            prop_assert_eq!(ex.decoder_input.len(), ex.targets.len());
        }
    }
}
