//! Character-level BLEU-3, ROUGE-L and exact-match METEOR.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};

pub const BLEU_ORDER: usize = 3;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Search states explored per sentence before METEOR falls back to the
/// greedy alignment.
const METEOR_STATE_CAP: usize = 200_000;

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

fn check_corpus(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Aggregated BLEU counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BleuStats {
    /// Clipped n-gram matches per order 1..=3.
    pub matches: [usize; BLEU_ORDER],
    /// Hypothesis n-gram counts per order.
    pub totals: [usize; BLEU_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(s: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn add_sentence(&mut self, hyp: &[char], reference: &[char]) {
        for n in 1..=BLEU_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
    }

    /// Modified precisions; a level with no matches is floored at
    /// `1/(2·count)`, with the count taken as 1 if the hypothesis has no
    /// n-grams of that order.
    pub fn precisions(&self) -> [f64; BLEU_ORDER] {
        let mut p = [0.0; BLEU_ORDER];
        for n in 0..BLEU_ORDER {
            p[n] = if self.matches[n] > 0 {
                self.matches[n] as f64 / self.totals[n] as f64
            } else {
                1.0 / (2.0 * self.totals[n].max(1) as f64)
            };
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let log_mean = self.precisions().iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
        self.brevity_penalty() * log_mean.exp()
    }
}

/// Corpus BLEU-3 over characters.
pub fn bleu3(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut s = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        s.add_sentence(&chars(h), &chars(r));
    }
    Ok(s.score())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F with β = 1, plus the LCS length.
/// Two empty sentences count as an exact match.
pub fn rouge_l_sentence(hyp: &[char], reference: &[char]) -> (f64, usize) {
    if hyp.is_empty() && reference.is_empty() {
        return (1.0, 0);
    }
    if hyp.is_empty() || reference.is_empty() {
        return (0.0, 0);
    }
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return (0.0, 0);
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    (2.0 * p * r / (p + r), lcs)
}

/// Mean sentence ROUGE-L F.
pub fn rouge_l(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| rouge_l_sentence(&chars(h), &chars(r)).0)
        .sum();
    Ok(total / hyps.len() as f64)
}

/// Exact-match unigram alignment summary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
    /// False when the state cap forced the greedy fallback.
    pub exact: bool,
}

struct ChunkSearch<'a> {
    hyp: &'a [char],
    reference: &'a [char],
    /// Matches of `hyp[i]`'s character still required after position i.
    need_after: Vec<usize>,
    memo: HashMap<(usize, Vec<u64>, usize), usize>,
    states: usize,
}

const NONE: usize = usize::MAX;

impl ChunkSearch<'_> {
    /// Minimum chunks for `hyp[i..]` given used reference positions and the
    /// reference index matched to `hyp[i-1]` (`NONE` if unmatched).
    fn best(&mut self, i: usize, used: &mut Vec<u64>, prev: usize, need: &mut HashMap<char, usize>) -> Option<usize> {
        if i == self.hyp.len() {
            return need.values().all(|&n| n == 0).then_some(0);
        }
        let key = (i, used.clone(), prev);
        if let Some(&v) = self.memo.get(&key) {
            return (v != NONE).then_some(v);
        }
        self.states += 1;
        if self.states > METEOR_STATE_CAP {
            return None;
        }
        let c = self.hyp[i];
        let required = need.get(&c).copied().unwrap_or(0);
        let mut best = NONE;
        if required > 0 {
            for j in 0..self.reference.len() {
                if self.reference[j] != c || used[j / 64] >> (j % 64) & 1 == 1 {
                    continue;
                }
                used[j / 64] |= 1 << (j % 64);
                *need.get_mut(&c).unwrap() -= 1;
                if let Some(rest) = self.best(i + 1, used, j, need) {
                    let extends = prev != NONE && prev + 1 == j;
                    best = best.min(rest + usize::from(!extends));
                }
                *need.get_mut(&c).unwrap() += 1;
                used[j / 64] &= !(1 << (j % 64));
            }
        }
        // Skipping is allowed only if later occurrences can still supply
        // every required match of this character.
        if self.need_after[i] >= required {
            if let Some(rest) = self.best(i + 1, used, NONE, need) {
                best = best.min(rest);
            }
        }
        if self.states > METEOR_STATE_CAP {
            return None;
        }
        self.memo.insert(key, best);
        (best != NONE).then_some(best)
    }
}

fn char_counts(s: &[char]) -> HashMap<char, usize> {
    let mut m = HashMap::new();
    for &c in s {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}

/// Greedy alignment: each hypothesis position takes the reference position
/// right after the previous match when possible, else the earliest free one.
fn greedy_chunks(hyp: &[char], reference: &[char], mut need: HashMap<char, usize>) -> usize {
    let mut used = vec![false; reference.len()];
    let mut prev = NONE;
    let mut chunks = 0;
    for &c in hyp {
        let req = need.get(&c).copied().unwrap_or(0);
        if req == 0 {
            prev = NONE;
            continue;
        }
        let next = if prev != NONE && prev + 1 < reference.len() && !used[prev + 1] && reference[prev + 1] == c {
            Some(prev + 1)
        } else {
            (0..reference.len()).find(|&j| !used[j] && reference[j] == c)
        };
        let j = next.expect("required match has a free reference position");
        if !(prev != NONE && prev + 1 == j) {
            chunks += 1;
        }
        used[j] = true;
        *need.get_mut(&c).unwrap() -= 1;
        prev = j;
    }
    chunks
}

/// Maximum exact matching with the fewest chunks.
pub fn align(hyp: &[char], reference: &[char]) -> Alignment {
    let hc = char_counts(hyp);
    let rc = char_counts(reference);
    let need: HashMap<char, usize> = hc
        .iter()
        .filter_map(|(c, &n)| rc.get(c).map(|&m| (*c, n.min(m))))
        .collect();
    let matches: usize = need.values().sum();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0, exact: true };
    }
    let mut need_after = vec![0; hyp.len()];
    let mut seen: HashMap<char, usize> = HashMap::new();
    for i in (0..hyp.len()).rev() {
        need_after[i] = seen.get(&hyp[i]).copied().unwrap_or(0);
        *seen.entry(hyp[i]).or_insert(0) += 1;
    }
    let mut search = ChunkSearch {
        hyp,
        reference,
        need_after,
        memo: HashMap::new(),
        states: 0,
    };
    let mut used = vec![0u64; reference.len().div_ceil(64)];
    let mut work = need.clone();
    match search.best(0, &mut used, NONE, &mut work) {
        Some(chunks) => Alignment { matches, chunks, exact: true },
        None => Alignment {
            matches,
            chunks: greedy_chunks(hyp, reference, need),
            exact: false,
        },
    }
}

pub fn meteor_from(al: &Alignment, hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 && ref_len == 0 {
        return 1.0;
    }
    if al.matches == 0 {
        return 0.0;
    }
    let m = al.matches as f64;
    let p = m / hyp_len as f64;
    let r = m / ref_len as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (al.chunks as f64 / m).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor_sentence(hyp: &[char], reference: &[char]) -> (f64, Alignment) {
    let al = align(hyp, reference);
    (meteor_from(&al, hyp.len(), reference.len()), al)
}

/// Mean sentence METEOR.
pub fn meteor(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| meteor_sentence(&chars(h), &chars(r)).0)
        .sum();
    Ok(total / hyps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SentenceRow {
    pub index: usize,
    pub bleu3: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub lcs: usize,
    pub matches: usize,
    pub chunks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub sentences: usize,
    pub bleu3: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub bleu_counts: BleuStats,
    /// Sentences whose METEOR alignment used the greedy fallback.
    pub meteor_inexact: usize,
    #[serde(skip)]
    pub rows: Vec<SentenceRow>,
}

impl MetricReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("index,bleu3,rouge_l,meteor,lcs,matches,chunks\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.index, r.bleu3, r.rouge_l, r.meteor, r.lcs, r.matches, r.chunks
            ));
        }
        out
    }
}

pub fn evaluate(hyps: &[String], refs: &[String]) -> Result<MetricReport> {
    check_corpus(hyps, refs)?;
    let mut counts = BleuStats::default();
    let mut rows = Vec::with_capacity(hyps.len());
    let mut inexact = 0;
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        let (h, r) = (chars(h), chars(r));
        counts.add_sentence(&h, &r);
        let mut single = BleuStats::default();
        single.add_sentence(&h, &r);
        let (rl, lcs) = rouge_l_sentence(&h, &r);
        let (met, al) = meteor_sentence(&h, &r);
        inexact += usize::from(!al.exact);
        rows.push(SentenceRow {
            index: i,
            bleu3: single.score(),
            rouge_l: rl,
            meteor: met,
            lcs,
            matches: al.matches,
            chunks: al.chunks,
        });
    }
    let n = rows.len() as f64;
    Ok(MetricReport {
        sentences: rows.len(),
        bleu3: counts.score(),
        rouge_l: rows.iter().map(|r| r.rouge_l).sum::<f64>() / n,
        meteor: rows.iter().map(|r| r.meteor).sum::<f64>() / n,
        bleu_counts: counts,
        meteor_inexact: inexact,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(x: &str) -> Vec<String> {
        vec![x.to_string()]
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu3(&s("abcdef"), &s("abcdef")).unwrap() - 1.0).abs() < 1e-12);
        let v = bleu3(&s("abc"), &s("abcd")).unwrap();
        assert!((v - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-6, "{v}");
        assert_eq!(bleu3(&s(""), &s("abc")).unwrap(), 0.0);
        assert!(bleu3(&[], &[]).is_err());
        assert!(bleu3(&s("a"), &[]).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&s("abc"), &s("abc")).unwrap(), 1.0);
        let (f, lcs) = rouge_l_sentence(&chars("abcd"), &chars("acbd"));
        assert_eq!(lcs, 3);
        assert!((f - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&s(""), &s("abc")).unwrap(), 0.0);
    }

    #[test]
    fn meteor_examples() {
        let v = meteor(&s("abc"), &s("abc")).unwrap();
        assert!((v - (1.0 - 0.5 / 27.0)).abs() < 1e-9, "{v}");
        assert_eq!(meteor(&s("abc"), &s("xyz")).unwrap(), 0.0);
        // "ab" aligns as one chunk even though "a" also appears earlier.
        let al = align(&chars("ab"), &chars("a.ab"));
        assert_eq!((al.matches, al.chunks), (2, 1));
    }

    #[test]
    fn greedy_fallback_counts_all_matches() {
        let h: Vec<char> = "ab".repeat(40).chars().collect();
        let r: Vec<char> = "ba".repeat(40).chars().collect();
        let al = align(&h, &r);
        assert_eq!(al.matches, 80);
        assert!(al.chunks >= 1 && al.chunks <= 80);
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_order_free(
            pairs in proptest::collection::vec(("[abcd]{0,10}", "[abcd]{0,10}"), 1..8)
        ) {
            let hyps: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<String> = pairs.iter().map(|p| p.1.clone()).collect();
            let r = evaluate(&hyps, &refs).unwrap();
            for v in [r.bleu3, r.rouge_l, r.meteor] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let rh: Vec<String> = hyps.iter().rev().cloned().collect();
            let rr: Vec<String> = refs.iter().rev().cloned().collect();
            let q = evaluate(&rh, &rr).unwrap();
            prop_assert!((r.bleu3 - q.bleu3).abs() < 1e-12);
            prop_assert!((r.rouge_l - q.rouge_l).abs() < 1e-12);
            prop_assert!((r.meteor - q.meteor).abs() < 1e-12);
        }

        #[test]
        fn identity_scores(text in "[a-z]{3,20}") {
            let r = evaluate(&s(&text), &s(&text)).unwrap();
            prop_assert!((r.bleu3 - 1.0).abs() < 1e-12);
            prop_assert!((r.rouge_l - 1.0).abs() < 1e-12);
            let expect = 1.0 - 0.5 * (1.0 / text.len() as f64).powi(3);
            prop_assert!((r.meteor - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_long_hypothesis_bleu_is_small() {
        let h = "x".repeat(60);
        let r = "y".repeat(60);
        assert!(bleu3(&s(&h), &s(&r)).unwrap() < 0.01);
    }
}
