use std::collections::HashSet;

use mapgn_core::corpus::{char_overlap, synth_corpus, SplitSizes, SynthRuleSet};
use mapgn_core::metrics::bleu3;
use mapgn_core::rng::keyed_rng;
use mapgn_core::vocab::Vocab;

fn big_corpus() -> mapgn_core::corpus::SynthCorpus {
    let rules = SynthRuleSet::default();
    let sizes = SplitSizes { train: 8000, valid: 1000, test: 1000 };
    synth_corpus(&rules, 2000, sizes, &mut keyed_rng(41, 0)).unwrap()
}

#[test]
fn ten_thousand_pairs_meet_the_overlap_floor_and_oracle_ceiling() {
    let rules = SynthRuleSet::default();
    let c = big_corpus();
    let pairs: Vec<&(String, String)> = c.train.iter().chain(&c.valid).chain(&c.test).collect();
    assert_eq!(pairs.len(), 10_000);
    let mut total = 0.0;
    let mut differ = 0;
    for (spoken, normalized) in &pairs {
        let o = char_overlap(spoken, normalized);
        assert!(o >= rules.min_overlap, "{spoken:?} / {normalized:?}: {o}");
        total += o;
        differ += usize::from(spoken != normalized);
        assert_eq!(&rules.normalize(spoken), normalized);
    }
    // Most pairs need some rewriting, so copying alone is not enough.
    assert!(differ as f64 > 0.5 * pairs.len() as f64, "{differ}");
    assert!(total / (pairs.len() as f64) < 0.99);
    let (src, refs): (Vec<String>, Vec<String>) = pairs.iter().map(|(s, t)| (rules.normalize(s), t.clone())).unzip();
    assert_eq!(bleu3(&src, &refs).unwrap(), 1.0);
}

#[test]
fn splits_are_disjoint_and_alphabet_is_closed() {
    let rules = SynthRuleSet::default();
    let c = big_corpus();
    let mut seen = HashSet::new();
    for s in c.unpaired.iter().chain(c.train.iter().chain(&c.valid).chain(&c.test).map(|p| &p.1)) {
        assert!(seen.insert(s.clone()), "duplicate {s:?}");
    }
    let alphabet = rules.alphabet();
    for s in c.unpaired.iter().chain(c.train.iter().flat_map(|(a, b)| [a, b])) {
        assert!(s.chars().all(|ch| alphabet.contains(&ch)), "{s:?}");
    }
    let vocab = Vocab::build(c.unpaired.iter().map(|s| s.as_str()), 1, None).unwrap();
    assert!(vocab.len() < 60);
}

#[test]
fn generation_is_deterministic() {
    let rules = SynthRuleSet::default();
    let sizes = SplitSizes { train: 50, valid: 10, test: 10 };
    let a = synth_corpus(&rules, 100, sizes, &mut keyed_rng(42, 0)).unwrap();
    let b = synth_corpus(&rules, 100, sizes, &mut keyed_rng(42, 0)).unwrap();
    assert_eq!(a, b);
}
