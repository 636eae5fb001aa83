use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Prefix marking a character piece that continues the previous piece.
pub const CONTINUATION: &str = "##";

/// Word-level vocabulary with a character fallback.
///
/// Ids are dense in `[0, len)`. Regular tokens come first in insertion
/// order; the four special tokens are appended after them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pad: u32,
    bos: u32,
    eos: u32,
    unk: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocabulary::from_tokens(r.tokens)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Assigns ids in order; specials not already listed are appended.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), list.len() as u32).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
            list.push(t);
        }
        for special in [PAD, BOS, EOS, UNK] {
            if !index.contains_key(special) {
                index.insert(special.to_string(), list.len() as u32);
                list.push(special.to_string());
            }
        }
        Ok(Self {
            pad: index[PAD],
            bos: index[BOS],
            eos: index[EOS],
            unk: index[UNK],
            tokens: list,
            index,
        })
    }

    /// Vocabulary of the `max_words` most frequent whitespace words (ties by
    /// lexical order), plus initial and continuation pieces for every
    /// character seen when `char_fallback` is set.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        max_words: usize,
        char_fallback: bool,
    ) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut chars = BTreeSet::new();
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w).or_default() += 1;
                if char_fallback {
                    chars.extend(w.chars());
                }
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = words
            .into_iter()
            .take(max_words)
            .map(|(w, _)| w.to_string())
            .filter(|w| ![PAD, BOS, EOS, UNK].contains(&w.as_str()))
            .collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for c in chars {
            for piece in [c.to_string(), format!("{CONTINUATION}{c}")] {
                if seen.insert(piece.clone()) {
                    tokens.push(piece);
                }
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn bos_id(&self) -> u32 {
        self.bos
    }

    pub fn eos_id(&self) -> u32 {
        self.eos
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn is_special(&self, id: u32) -> bool {
        id == self.pad || id == self.bos || id == self.eos || id == self.unk
    }

    /// Whole words where known, otherwise one piece per character; pieces
    /// missing from the vocabulary become `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word).filter(|&id| !self.is_special(id)) {
                out.push(id);
                continue;
            }
            for (i, c) in word.chars().enumerate() {
                let piece = if i == 0 {
                    c.to_string()
                } else {
                    format!("{CONTINUATION}{c}")
                };
                out.push(self.id(&piece).unwrap_or(self.unk));
            }
        }
        out
    }

    /// Inverse of [`tokenize`](Self::tokenize) for single-space-separated
    /// text over the vocabulary. Specials other than `<unk>` are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) && id != self.unk {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK);
            match tok.strip_prefix(CONTINUATION).filter(|rest| !rest.is_empty()) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}
