//! Character-level vocabulary.
//!
//! Tokens are Unicode scalar values. Ids 0..5 are reserved for the special
//! tokens in the order PAD, BOS, EOS, UNK, MASK.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

/// Rendering of UNK in decoded text.
pub const UNK_CHAR: char = '\u{FFFD}';
/// Rendering of MASK in decoded text.
pub const MASK_STR: &str = "\u{2581}M";

pub fn is_special(id: TokenId) -> bool {
    id < NUM_SPECIALS
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from every character occurring at least
    /// `min_count` times, ordered by descending frequency then codepoint.
    pub fn build<'a, I>(corpus: I, min_count: usize, max_size: Option<usize>) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_count == 0 {
            return Err(Error::Invalid("min-count must be at least 1".into()));
        }
        let mut counts: HashMap<char, usize> = HashMap::new();
        let mut lines = 0usize;
        for line in corpus {
            lines += 1;
            for c in line.chars().filter(|&c| c != '\n' && c != '\r') {
                *counts.entry(c).or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(char, usize)> =
            counts.into_iter().filter(|&(_, n)| n >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        if let Some(cap) = max_size {
            ranked.truncate(cap.saturating_sub(NUM_SPECIALS));
        }
        Ok(Self::from_chars(ranked.into_iter().map(|(c, _)| c).collect()))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + NUM_SPECIALS))
            .collect();
        Self { chars, index }
    }

    /// Size including the special tokens.
    pub fn len(&self) -> usize {
        self.chars.len() + NUM_SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, c: char) -> TokenId {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: TokenId) -> Option<char> {
        id.checked_sub(NUM_SPECIALS)
            .and_then(|i| self.chars.get(i))
            .copied()
    }

    /// Ordinary (non-special) token ids.
    pub fn regular_ids(&self) -> std::ops::Range<TokenId> {
        NUM_SPECIALS..self.len()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => out.push(UNK_CHAR),
                MASK => out.push_str(MASK_STR),
                _ => match self.token_of(id) {
                    Some(c) => out.push(c),
                    None => {
                        return Err(Error::Invalid(format!(
                            "token id {id} out of range for vocabulary of size {}",
                            self.len()
                        )))
                    }
                },
            }
        }
        Ok(out)
    }

    /// File form: the five special names, then one character per line.
    /// Line number (0-based) equals token id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for name in SPECIAL_NAMES {
            s.push_str(name);
            s.push('\n');
        }
        for &c in &self.chars {
            s.push(c);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if lines.next() != Some(name) {
                return Err(Error::Invalid(format!(
                    "vocabulary line {}: expected special token {name}",
                    i + 1
                )));
            }
        }
        let mut chars = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                (None, _) => continue,
                _ => {
                    return Err(Error::Invalid(format!(
                        "vocabulary line {}: expected a single character, got {line:?}",
                        i + NUM_SPECIALS + 1
                    )))
                }
            }
        }
        let v = Self::from_chars(chars);
        if v.index.len() != v.chars.len() {
            return Err(Error::Invalid("vocabulary file lists a character twice".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the file form; identifies a vocabulary in checkpoints.
    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
