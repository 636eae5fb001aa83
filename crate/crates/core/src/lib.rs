//! Federated personalized direct preference optimization on a desk-scale
//! transformer, with Monte Carlo checks of the Gumbel–Bradley–Terry
//! identities behind the loss.
//!
//! * [`numerics`]: dense matrices, stable scalar functions, seeded streams.
//! * [`model`]: frozen backbone with LoRA, bottleneck adapter, dual heads.
//! * [`objectives`]: the preference loss, its gradients, AdamW.
//! * [`data`]: JSONL triples, tokenization, synthetic corpus, partitions.
//! * [`federation`]: broadcast, two-phase local rounds, aggregation.
//! * [`theory`]: Gumbel Monte Carlo checks.
//! * [`harness`]: configs, metrics, experiment and ablation runners.

pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod theory;

pub use error::{Error, Result};
