//! Corpus loading and a synthetic spoken-to-normalized task.
//!
//! Normalized sentences are word sequences drawn from a small lexicon plus
//! the normalized side of a substitution table. The spoken side replaces
//! normalized fragments with their spoken forms and sprinkles in fillers.
//! Spoken forms and fillers are single words outside the lexicon, so the
//! mapping is exactly invertible by [`SynthRuleSet::normalize`].

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::lcs_len;

pub const DEFAULT_MAX_CHARS: usize = 1000;

fn read_lines(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => Error::Data {
            path: path.to_path_buf(),
            line: 0,
            msg: "file is not valid UTF-8".into(),
        },
        _ => Error::Io(e),
    })
}

fn check_len(path: &Path, line: usize, text: &str, max_chars: usize) -> Result<()> {
    let n = text.chars().count();
    if n > max_chars {
        return Err(Error::Data {
            path: path.to_path_buf(),
            line,
            msg: format!("{n} characters exceeds the limit of {max_chars}"),
        });
    }
    Ok(())
}

/// One sentence per line; blank lines skipped.
pub fn load_unpaired(path: &Path, max_chars: usize) -> Result<Vec<String>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        check_len(path, i + 1, line, max_chars)?;
        out.push(line.to_string());
    }
    Ok(out)
}

/// `source<TAB>target` per line; blank lines skipped.
pub fn load_paired(path: &Path, max_chars: usize) -> Result<Vec<(String, String)>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        check_len(path, i + 1, fields[0], max_chars)?;
        check_len(path, i + 1, fields[1], max_chars)?;
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(out)
}

pub fn write_unpaired(path: &Path, sentences: &[String]) -> Result<()> {
    let mut s = String::new();
    for line in sentences {
        s.push_str(line);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_paired(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (a, b) in pairs {
        s.push_str(a);
        s.push('\t');
        s.push_str(b);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    /// Single spoken word.
    pub spoken: String,
    /// Normalized words it stands for.
    pub normalized: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRuleSet {
    pub substitutions: Vec<Substitution>,
    pub fillers: Vec<String>,
    /// Chance of a filler before each spoken word.
    pub insertion_prob: f64,
    /// Chance that an eligible normalized fragment is spoken in its
    /// substituted form.
    pub substitution_prob: f64,
    /// Chance that a sentence slot is filled with a substitutable fragment
    /// rather than a lexicon word.
    pub fragment_prob: f64,
    pub lexicon: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
    /// Pairs whose verbatim character overlap falls below this are redrawn.
    pub min_overlap: f64,
    pub seed: u64,
}

const LEXICON: &[&str] = &[
    "i", "we", "they", "she", "he", "you", "go", "see", "make", "take", "the", "a", "home", "work",
    "store", "park", "food", "book", "car", "today", "now", "later", "there", "here", "very", "good",
    "big", "small", "new", "old", "it", "and", "but", "with", "this", "that", "time", "day", "call",
    "read", "eat", "need", "to", "buy", "cook", "walk", "friend", "bus",
];

const SUBSTITUTIONS: &[(&str, &str)] = &[
    ("gonna", "going to"),
    ("wanna", "want to"),
    ("gotta", "have to"),
    ("dont", "do not"),
    ("cant", "can not"),
    ("kinda", "kind of"),
    ("lemme", "let me"),
    ("cuz", "because"),
    ("yeah", "yes"),
    ("two", "2"),
    ("three", "3"),
    ("four", "4"),
    ("ten", "10"),
];

const FILLERS: &[&str] = &["uh", "um", "er", "hmm", "mhm"];

impl Default for SynthRuleSet {
    fn default() -> Self {
        Self {
            substitutions: SUBSTITUTIONS
                .iter()
                .map(|&(s, n)| Substitution {
                    spoken: s.into(),
                    normalized: n.into(),
                })
                .collect(),
            fillers: FILLERS.iter().map(|s| s.to_string()).collect(),
            insertion_prob: 0.08,
            substitution_prob: 0.85,
            fragment_prob: 0.3,
            lexicon: LEXICON.iter().map(|s| s.to_string()).collect(),
            min_words: 3,
            max_words: 7,
            min_overlap: 0.7,
            seed: 0,
        }
    }
}

fn words(s: &str) -> Vec<&str> {
    s.split(' ').filter(|w| !w.is_empty()).collect()
}

/// `2·LCS / (|a| + |b|)` over characters.
pub fn char_overlap(a: &str, b: &str) -> f64 {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * lcs_len(&a, &b) as f64 / (a.len() + b.len()) as f64
}

impl SynthRuleSet {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.substitutions.is_empty() {
            problems.push("substitution table is empty".to_string());
        }
        if self.lexicon.is_empty() {
            problems.push("lexicon is empty".to_string());
        }
        for (name, p) in [
            ("insertion_prob", self.insertion_prob),
            ("substitution_prob", self.substitution_prob),
            ("fragment_prob", self.fragment_prob),
            ("min_overlap", self.min_overlap),
        ] {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            problems.push(format!(
                "need 1 <= min_words <= max_words, got {}..{}",
                self.min_words, self.max_words
            ));
        }
        let lexicon: HashSet<&str> = self.lexicon.iter().map(|s| s.as_str()).collect();
        let mut spoken = HashSet::new();
        for s in &self.substitutions {
            if words(&s.spoken).len() != 1 || s.spoken.contains(char::is_whitespace) {
                problems.push(format!("spoken form {:?} must be a single word", s.spoken));
            }
            if words(&s.normalized).is_empty() {
                problems.push(format!("normalized form for {:?} is empty", s.spoken));
            }
            if lexicon.contains(s.spoken.as_str()) {
                problems.push(format!("spoken form {:?} is also a lexicon word", s.spoken));
            }
            if !spoken.insert(s.spoken.as_str()) {
                problems.push(format!("spoken form {:?} appears twice", s.spoken));
            }
        }
        for f in &self.fillers {
            if words(f).len() != 1 || f.contains(char::is_whitespace) {
                problems.push(format!("filler {f:?} must be a single word"));
            }
            if lexicon.contains(f.as_str()) || spoken.contains(f.as_str()) {
                problems.push(format!("filler {f:?} collides with a lexicon word or spoken form"));
            }
        }
        let normalized_words: HashSet<&str> =
            self.substitutions.iter().flat_map(|s| words(&s.normalized)).collect();
        for w in spoken.iter().copied().chain(self.fillers.iter().map(|f| f.as_str())) {
            if normalized_words.contains(w) {
                problems.push(format!("word {w:?} is both spoken-only and normalized"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }

    /// Every character that generated text may contain.
    pub fn alphabet(&self) -> BTreeSet<char> {
        let mut a: BTreeSet<char> = BTreeSet::from([' ']);
        for w in self.lexicon.iter().chain(&self.fillers) {
            a.extend(w.chars());
        }
        for s in &self.substitutions {
            a.extend(s.spoken.chars());
            a.extend(s.normalized.chars().filter(|c| *c != ' '));
        }
        a
    }

    fn normalized_sentence(&self, rng: &mut impl Rng) -> String {
        let n = rng.gen_range(self.min_words..=self.max_words);
        let mut out: Vec<&str> = Vec::new();
        while out.len() < n {
            if rng.gen::<f64>() < self.fragment_prob {
                let s = self.substitutions.choose(rng).unwrap();
                out.extend(words(&s.normalized));
            } else {
                out.push(self.lexicon.choose(rng).unwrap());
            }
        }
        out.join(" ")
    }

    /// Spoken rendering of a normalized sentence.
    pub fn speak(&self, normalized: &str, rng: &mut impl Rng) -> String {
        let w = words(normalized);
        let mut subs: Vec<(Vec<&str>, &str)> = self
            .substitutions
            .iter()
            .map(|s| (words(&s.normalized), s.spoken.as_str()))
            .collect();
        subs.sort_by_key(|s| std::cmp::Reverse(s.0.len()));
        let mut out: Vec<&str> = Vec::new();
        let mut i = 0;
        while i < w.len() {
            if !self.fillers.is_empty() && rng.gen::<f64>() < self.insertion_prob {
                out.push(self.fillers.choose(rng).unwrap());
            }
            match subs.iter().find(|(n, _)| w[i..].starts_with(n)) {
                Some((n, s)) if rng.gen::<f64>() < self.substitution_prob => {
                    out.push(s);
                    i += n.len();
                }
                _ => {
                    out.push(w[i]);
                    i += 1;
                }
            }
        }
        out.join(" ")
    }

    /// Oracle normalizer: drops fillers and expands spoken forms.
    pub fn normalize(&self, spoken: &str) -> String {
        let mut out: Vec<&str> = Vec::new();
        for w in words(spoken) {
            if self.fillers.iter().any(|f| f == w) {
                continue;
            }
            match self.substitutions.iter().find(|s| s.spoken == w) {
                Some(s) => out.extend(words(&s.normalized)),
                None => out.push(w),
            }
        }
        out.join(" ")
    }

    /// A spoken rendering meeting `min_overlap`, if one is found quickly.
    fn pair_for(&self, normalized: &str, rng: &mut impl Rng) -> Option<String> {
        (0..20)
            .map(|_| self.speak(normalized, rng))
            .find(|s| char_overlap(s, normalized) >= self.min_overlap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    /// Normalized-style sentences only.
    pub unpaired: Vec<String>,
    /// `(spoken, normalized)` pairs.
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

/// Generates all splits from distinct normalized sentences, so no sentence
/// string appears in more than one split (unpaired included).
pub fn synth_corpus(rules: &SynthRuleSet, n_unpaired: usize, sizes: SplitSizes, rng: &mut impl Rng) -> Result<SynthCorpus> {
    rules.validate()?;
    let n_paired = sizes.train + sizes.valid + sizes.test;
    if n_unpaired + n_paired == 0 {
        return Err(Error::Invalid("nothing to generate".into()));
    }
    let mut seen = HashSet::new();
    let mut unpaired = Vec::with_capacity(n_unpaired);
    let mut pairs = Vec::with_capacity(n_paired);
    let mut attempts = 0usize;
    let budget = 50 * (n_unpaired + n_paired) + 1000;
    while unpaired.len() < n_unpaired || pairs.len() < n_paired {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Invalid(format!(
                "could not draw {} distinct sentences from the rule set; raise max_words or enlarge the lexicon",
                n_unpaired + n_paired
            )));
        }
        let sentence = rules.normalized_sentence(rng);
        if seen.contains(&sentence) {
            continue;
        }
        // Alternate consumers so both sets draw from the same distribution.
        let want_pair = pairs.len() < n_paired && (unpaired.len() >= n_unpaired || attempts % 2 == 0);
        if want_pair {
            let Some(spoken) = rules.pair_for(&sentence, rng) else {
                continue;
            };
            seen.insert(sentence.clone());
            pairs.push((spoken, sentence));
        } else {
            seen.insert(sentence.clone());
            unpaired.push(sentence);
        }
    }
    let test = pairs.split_off(sizes.train + sizes.valid);
    let valid = pairs.split_off(sizes.train);
    Ok(SynthCorpus {
        unpaired,
        train: pairs,
        valid,
        test,
    })
}
