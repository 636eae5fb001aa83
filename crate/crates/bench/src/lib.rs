//! Fixtures shared by the criterion benchmarks.

use fedpdpo_core::data::EncodedTriple;
use fedpdpo_core::harness::desk_model_config;
use fedpdpo_core::model::{ClientModel, LoraSet, ModelConfig};
use fedpdpo_core::numerics::SeededRng;
use fedpdpo_core::objectives::{score_reference, ScoredTriple};

/// The default experiment model with a 32-token vocabulary.
pub fn bench_model_config() -> ModelConfig {
    let mut cfg = desk_model_config();
    cfg.backbone.vocab_size = 32;
    cfg
}

/// Random triples shaped like the default synthetic corpus.
pub fn random_triples(n: usize, vocab: usize, seed: u64) -> Vec<EncodedTriple> {
    let mut rng = SeededRng::new(seed, 1);
    let mut tokens = |len: usize| (0..len).map(|_| 1 + rng.below(vocab - 1) as u32).collect::<Vec<_>>();
    (0..n)
        .map(|_| EncodedTriple {
            prompt: tokens(3),
            chosen: tokens(6),
            rejected: tokens(6),
        })
        .collect()
}

/// A model and a batch scored against its own snapshot.
pub fn scored_batch(batch_size: usize) -> (ClientModel, Vec<ScoredTriple>) {
    let cfg = bench_model_config();
    let model = ClientModel::init(&cfg, 7).expect("valid bench config");
    let triples = random_triples(batch_size, cfg.backbone.vocab_size, 7);
    let scored = score_reference(&model.snapshot(), &triples).expect("in-vocabulary batch");
    (model, scored)
}

/// `n` LoRA sets with the layout of the bench model.
pub fn lora_uploads(n: usize) -> Vec<LoraSet> {
    let cfg = bench_model_config();
    (0..n as u64)
        .map(|i| {
            LoraSet::init(
                &cfg.lora,
                cfg.backbone.hidden_dim,
                cfg.backbone.n_layers,
                &mut SeededRng::new(i, 2),
            )
            .expect("valid LoRA config")
        })
        .collect()
}
