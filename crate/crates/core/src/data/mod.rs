//! Preference data: JSONL ingestion, tokenization, the synthetic corpus, and
//! non-IID client partitions.

mod jsonl;
mod partition;
mod synthetic;
mod vocab;

pub use jsonl::{load_preference_jsonl, parse_preference_jsonl, write_preference_jsonl, PreferenceTriple};
pub use partition::{
    assign_cross_domain, partition_by_label, partition_reward_margin, ClientSplit, PartitionPlan,
    PartitionStrategy,
};
pub use synthetic::{generate_synthetic, MarginDistribution, SyntheticSpec};
pub use vocab::{Vocabulary, BOS, CONTINUATION, EOS, PAD, UNK};

use crate::error::Result;

/// A preference triple mapped to token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTriple {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

impl EncodedTriple {
    pub fn encode(vocab: &Vocabulary, triple: &PreferenceTriple) -> Self {
        Self {
            prompt: vocab.tokenize(&triple.prompt),
            chosen: vocab.tokenize(&triple.chosen),
            rejected: vocab.tokenize(&triple.rejected),
        }
    }

    /// The same pair with chosen and rejected exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
        }
    }
}

pub fn encode_all(vocab: &Vocabulary, triples: &[PreferenceTriple]) -> Vec<EncodedTriple> {
    triples.iter().map(|t| EncodedTriple::encode(vocab, t)).collect()
}

/// Vocabulary over every whitespace word in the corpus with a character
/// fallback, so any text drawn from it tokenizes without `<unk>`.
pub fn corpus_vocabulary(triples: &[PreferenceTriple]) -> Result<Vocabulary> {
    let texts = triples
        .iter()
        .flat_map(|t| [t.prompt.as_str(), t.chosen.as_str(), t.rejected.as_str()]);
    Vocabulary::build(texts, usize::MAX, true)
}
