//! Seeded synthetic preference corpus.
//!
//! The word list `t0 … t{V-1}` is split in half by a rotating rule: word `i`
//! is "preferred" when `(i + style_offset) mod V < V/2`. Chosen responses
//! always carry strictly more preferred words than rejected ones, and the
//! count gap grows with the annotated reward margin, so large-margin pairs are
//! easy and margin-≈0 pairs differ by a single word. Responses within a pair
//! have equal length.

use serde::{Deserialize, Serialize};

use crate::data::PreferenceTriple;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginDistribution {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
}

impl MarginDistribution {
    fn sample(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            MarginDistribution::Constant { value } => value,
            MarginDistribution::Uniform { low, high } => rng.uniform_range(low, high),
            MarginDistribution::Exponential { mean } => -mean * (1.0 - rng.uniform()).ln(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            MarginDistribution::Constant { value } => value.is_finite() && value >= 0.0,
            MarginDistribution::Uniform { low, high } => {
                low.is_finite() && high.is_finite() && 0.0 <= low && low <= high
            }
            MarginDistribution::Exponential { mean } => mean.is_finite() && mean > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid margin distribution {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of content words; at least 4.
    pub vocab_size: usize,
    pub n_samples: usize,
    pub prompt_len: usize,
    pub response_len: usize,
    pub margin: MarginDistribution,
    /// Extra preferred words in the chosen response per unit of margin.
    pub gap_per_margin: f64,
    /// Rotates which half of the word list is preferred.
    pub style_offset: usize,
    pub domain_tag: Option<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            n_samples: 600,
            prompt_len: 3,
            response_len: 6,
            margin: MarginDistribution::Exponential { mean: 1.5 },
            gap_per_margin: 1.0,
            style_offset: 0,
            domain_tag: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "synthetic vocab_size {} < 4",
                self.vocab_size
            )));
        }
        if self.response_len == 0 {
            return Err(Error::Config("synthetic response_len must be positive".into()));
        }
        if !(self.gap_per_margin.is_finite() && self.gap_per_margin >= 0.0) {
            return Err(Error::Config("gap_per_margin must be non-negative".into()));
        }
        self.margin.validate()
    }

    pub fn word(i: usize) -> String {
        format!("t{i}")
    }

    /// All words the generator can emit, in id order.
    pub fn words(&self) -> Vec<String> {
        (0..self.vocab_size).map(Self::word).collect()
    }

    pub fn is_preferred(&self, i: usize) -> bool {
        (i + self.style_offset) % self.vocab_size < self.vocab_size / 2
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<PreferenceTriple>> {
    spec.validate()?;
    let mut rng = SeededRng::new(seed, 0x5157);
    let (preferred, other): (Vec<usize>, Vec<usize>) =
        (0..spec.vocab_size).partition(|&i| spec.is_preferred(i));
    let len = spec.response_len;

    let pick = |pool: &[usize], rng: &mut SeededRng| pool[rng.below(pool.len())];
    let response = |n_pref: usize, rng: &mut SeededRng| -> String {
        let mut ids: Vec<usize> = (0..len)
            .map(|k| {
                if k < n_pref {
                    pick(&preferred, rng)
                } else {
                    pick(&other, rng)
                }
            })
            .collect();
        rng.shuffle(&mut ids);
        ids.into_iter()
            .map(SyntheticSpec::word)
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut out = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let margin = spec.margin.sample(&mut rng).max(0.0);
        let gap = (1 + (margin * spec.gap_per_margin).floor() as usize).min(len);
        let rejected_pref = rng.below(len - gap + 1);
        let prompt = (0..spec.prompt_len)
            .map(|_| SyntheticSpec::word(rng.below(spec.vocab_size)))
            .collect::<Vec<_>>()
            .join(" ");
        let chosen = response(rejected_pref + gap, &mut rng);
        let rejected = response(rejected_pref, &mut rng);
        let base = rng.normal();
        out.push(PreferenceTriple {
            prompt,
            chosen,
            rejected,
            reward_chosen: Some(base + margin),
            reward_rejected: Some(base),
            domain_tag: spec.domain_tag.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_preferred(spec: &SyntheticSpec, text: &str) -> usize {
        text.split_whitespace()
            .filter(|w| spec.is_preferred(w[1..].parse().unwrap()))
            .count()
    }

    #[test]
    fn zero_samples() {
        let spec = SyntheticSpec {
            n_samples: 0,
            ..Default::default()
        };
        assert!(generate_synthetic(&spec, 1).unwrap().is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec, 9).unwrap(), generate_synthetic(&spec, 9).unwrap());
        assert_ne!(generate_synthetic(&spec, 9).unwrap(), generate_synthetic(&spec, 10).unwrap());
    }

    #[test]
    fn constant_margin_is_attached() {
        let spec = SyntheticSpec {
            margin: MarginDistribution::Constant { value: 1.0 },
            n_samples: 50,
            ..Default::default()
        };
        for t in generate_synthetic(&spec, 0).unwrap() {
            assert!((t.margin().unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chosen_always_carries_more_preferred_words() {
        let spec = SyntheticSpec {
            style_offset: 3,
            ..Default::default()
        };
        for t in generate_synthetic(&spec, 4).unwrap() {
            assert_ne!(t.chosen, t.rejected);
            assert!(count_preferred(&spec, &t.chosen) > count_preferred(&spec, &t.rejected));
            assert_eq!(
                t.chosen.split_whitespace().count(),
                t.rejected.split_whitespace().count()
            );
        }
    }

    #[test]
    fn degenerate_vocab_is_config_error() {
        let spec = SyntheticSpec {
            vocab_size: 3,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config(_))));
    }
}
