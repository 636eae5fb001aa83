//! Experiment orchestration: JSON configs, data preparation, per-seed
//! federation runs, metrics files, and the three-way ablation.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! summary.json
//! seed_<s>/partition.json
//! seed_<s>/metrics.jsonl                    one line per client per round
//! seed_<s>/checkpoints/round_XXX/...        server LoRA + personalized modules
//! seed_<s>/checkpoints/final/client_<i>.json   full client models with vocabulary
//! ```

mod sink;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use sink::{read_metrics, MetricsSink};

use crate::data::{
    assign_cross_domain, corpus_vocabulary, encode_all, generate_synthetic, load_preference_jsonl,
    partition_by_label, partition_reward_margin, EncodedTriple, PartitionPlan, PartitionStrategy,
    PreferenceTriple, SyntheticSpec, Vocabulary,
};
use crate::error::{Error, Result};
use crate::federation::{run_federation, ClientData, FederationConfig, FederationState, RoundRecord};
use crate::model::checkpoint::{save_model, write_json};
use crate::model::{ModelConfig, Policy};
use crate::objectives::ObjectiveConfig;

/// Environment variable that relative output directories are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "FEDPDPO_OUTPUT_ROOT";

/// Fraction of triples where the policy gives the chosen response strictly
/// higher log-likelihood than the rejected one. Ties count as wrong.
pub fn preference_accuracy(model: &impl Policy, test: &[EncodedTriple]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Contract("preference accuracy of an empty test set".into()));
    }
    let mut correct = 0usize;
    for t in test {
        let w = model.sequence_logprob(&t.prompt, &t.chosen)?;
        let l = model.sequence_logprob(&t.prompt, &t.rejected)?;
        if w > l {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Heads read backbone features directly.
    NoBottleneck,
    /// Implicit margin only: federated averaging of LoRA trained with DPO.
    NoRewardHead,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoBottleneck, Ablation::NoRewardHead, Ablation::Full];

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::NoBottleneck => "A1",
            Ablation::NoRewardHead => "A2",
            Ablation::Full => "A3",
        }
    }

    pub fn apply(self, model: &mut ModelConfig, objective: &mut ObjectiveConfig) {
        match self {
            Ablation::Full => {}
            Ablation::NoBottleneck => model.bottleneck.enabled = false,
            Ablation::NoRewardHead => objective.reward_head_enabled = false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated per run seed.
    Synthetic { spec: SyntheticSpec },
    Jsonl { path: PathBuf },
    /// One named corpus per client (cross-domain strategy only).
    Named { datasets: Vec<NamedDataset> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDataset {
    pub name: String,
    pub source: NamedSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NamedSource {
    Synthetic { spec: SyntheticSpec },
    Jsonl { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub strategy: PartitionStrategy,
    pub train_test_ratio: f64,
    /// `domain_tag → client` for the by-label strategy.
    pub label_groups: BTreeMap<String, usize>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            strategy: PartitionStrategy::RewardMargin,
            train_test_ratio: 0.9,
            label_groups: BTreeMap::new(),
        }
    }
}

/// Top-level experiment description, read from JSON. Every field has a
/// default; unknown keys are rejected.
///
/// `model.backbone.vocab_size` and `model.backbone.bos_token` are overwritten
/// from the vocabulary built over the loaded corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub federation: FederationConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub data: DataSource,
    pub partition: PartitionConfig,
    pub ablation: Ablation,
    /// `None` keeps everything in memory.
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Write round checkpoints every this many rounds (0 disables them).
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "fedpdpo".into(),
            federation: FederationConfig::default(),
            model: desk_model_config(),
            objective: ObjectiveConfig::default(),
            data: DataSource::default(),
            partition: PartitionConfig::default(),
            ablation: Ablation::Full,
            output_dir: None,
            seeds: (0..5).collect(),
            checkpoint_every: 0,
        }
    }
}

/// Single-layer, 16-wide transformer sized for CPU runs in seconds.
pub fn desk_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.hidden_dim = 16;
    cfg.backbone.n_layers = 1;
    cfg.backbone.n_heads = 2;
    cfg.backbone.max_seq_len = 24;
    cfg
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.objective.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(self.partition.train_test_ratio > 0.0 && self.partition.train_test_ratio <= 1.0) {
            return Err(Error::Config("train_test_ratio must lie in (0, 1]".into()));
        }
        let named = matches!(self.data, DataSource::Named { .. });
        let cross = self.partition.strategy == PartitionStrategy::CrossDomain;
        if named != cross {
            return Err(Error::Config(
                "the cross_domain strategy and a named data source go together".into(),
            ));
        }
        if let DataSource::Named { datasets } = &self.data {
            if datasets.len() != self.federation.n_clients {
                return Err(Error::Config(format!(
                    "{} named datasets for n_clients = {}",
                    datasets.len(),
                    self.federation.n_clients
                )));
            }
        }
        if self.partition.strategy == PartitionStrategy::ByLabel {
            let clients: std::collections::BTreeSet<usize> =
                self.partition.label_groups.values().copied().collect();
            if clients != (0..self.federation.n_clients).collect() {
                return Err(Error::Config(
                    "label_groups must map onto every client 0..n_clients".into(),
                ));
            }
        }
        let mut model = self.model.clone();
        let mut objective = self.objective.clone();
        self.ablation.apply(&mut model, &mut objective);
        // Vocabulary-dependent fields are filled in later; check the rest.
        model.backbone.vocab_size = model.backbone.vocab_size.max(1);
        model.backbone.bos_token = 0;
        model.validate()
    }

    /// Model and objective after applying the ablation toggle.
    pub fn effective_configs(&self) -> (ModelConfig, ObjectiveConfig) {
        let mut model = self.model.clone();
        let mut objective = self.objective.clone();
        self.ablation.apply(&mut model, &mut objective);
        (model, objective)
    }

    pub fn resolved_output_dir(&self) -> Option<PathBuf> {
        self.output_dir.as_ref().map(|dir| resolve_output_path(dir))
    }
}

/// Joins relative paths onto `$FEDPDPO_OUTPUT_ROOT` when it is set.
pub fn resolve_output_path(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// The corpus, vocabulary and client split for one seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub corpus: Vec<PreferenceTriple>,
    pub vocabulary: Vocabulary,
    pub plan: PartitionPlan,
}

fn load_named(source: &NamedSource, seed: u64) -> Result<Vec<PreferenceTriple>> {
    match source {
        NamedSource::Synthetic { spec } => generate_synthetic(spec, seed),
        NamedSource::Jsonl { path } => load_preference_jsonl(path),
    }
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let p = &cfg.partition;
    let (corpus, plan) = match &cfg.data {
        DataSource::Named { datasets } => {
            let loaded = datasets
                .iter()
                .enumerate()
                .map(|(i, d)| Ok((d.name.clone(), load_named(&d.source, seed.wrapping_add(i as u64))?)))
                .collect::<Result<Vec<_>>>()?;
            assign_cross_domain(loaded, p.train_test_ratio, seed)?
        }
        source => {
            let corpus = match source {
                DataSource::Synthetic { spec } => generate_synthetic(spec, seed)?,
                DataSource::Jsonl { path } => load_preference_jsonl(path)?,
                DataSource::Named { .. } => unreachable!(),
            };
            let plan = match p.strategy {
                PartitionStrategy::RewardMargin => {
                    partition_reward_margin(&corpus, cfg.federation.n_clients, p.train_test_ratio, seed)?
                }
                PartitionStrategy::ByLabel => {
                    partition_by_label(&corpus, &p.label_groups, p.train_test_ratio, seed)?
                }
                PartitionStrategy::CrossDomain => {
                    return Err(Error::Config("cross_domain needs a named data source".into()))
                }
            };
            (corpus, plan)
        }
    };
    if plan.n_clients != cfg.federation.n_clients {
        return Err(Error::Config(format!(
            "partition produced {} clients for n_clients = {}",
            plan.n_clients, cfg.federation.n_clients
        )));
    }
    let vocabulary = corpus_vocabulary(&corpus)?;
    Ok(PreparedData {
        corpus,
        vocabulary,
        plan,
    })
}

/// Model config with vocabulary-derived fields and the per-seed backbone.
pub fn seeded_model_config(cfg: &ExperimentConfig, vocab: &Vocabulary, seed: u64) -> Result<ModelConfig> {
    let (mut model, _) = cfg.effective_configs();
    model.backbone.vocab_size = vocab.len();
    model.backbone.bos_token = vocab.bos_id();
    model.backbone.seed = model.backbone.seed.wrapping_add(seed);
    model.validate()?;
    Ok(model)
}

fn client_data(prepared: &PreparedData, max_seq_len: usize) -> Result<Vec<ClientData>> {
    let encoded = encode_all(&prepared.vocabulary, &prepared.corpus);
    for (i, t) in encoded.iter().enumerate() {
        let longest = t.chosen.len().max(t.rejected.len());
        if 1 + t.prompt.len() + longest > max_seq_len {
            return Err(Error::Config(format!(
                "sample {i} needs {} positions but max_seq_len is {max_seq_len}",
                1 + t.prompt.len() + longest
            )));
        }
        if t.chosen.is_empty() || t.rejected.is_empty() {
            return Err(Error::Input(format!("sample {i} has an empty response")));
        }
    }
    Ok(prepared
        .plan
        .clients
        .iter()
        .map(|split| ClientData {
            train: split.train.iter().map(|&i| encoded[i].clone()).collect(),
            test: split.test.iter().map(|&i| encoded[i].clone()).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Final-round test accuracy per client.
    pub client_accuracy: Vec<f64>,
    /// Mean over clients of the final-round accuracy.
    pub mean_accuracy: f64,
    /// Mean over clients of the first-round accuracy.
    pub first_round_accuracy: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub ablation: Ablation,
    pub seeds: Vec<SeedSummary>,
    pub mean_accuracy: f64,
    /// Population standard deviation across seeds.
    pub std_accuracy: f64,
}

/// Full outcome of one seed, kept in memory for callers that need more than
/// the summary.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub summary: SeedSummary,
    pub plan: PartitionPlan,
    pub history: Vec<RoundRecord>,
    pub state: FederationState,
}

fn mean_accuracy_of(records: &[&RoundRecord]) -> Result<f64> {
    let accs: Vec<f64> = records.iter().filter_map(|r| r.test_accuracy).collect();
    if accs.is_empty() {
        return Err(Error::Config("no client has a test split; lower train_test_ratio".into()));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let prepared = prepare_data(cfg, seed)?;
    let model = seeded_model_config(cfg, &prepared.vocabulary, seed)?;
    let (_, objective) = cfg.effective_configs();
    let data = client_data(&prepared, model.backbone.max_seq_len)?;
    let fed = FederationConfig {
        seed,
        ..cfg.federation.clone()
    };

    let seed_dir = cfg.resolved_output_dir().map(|d| d.join(format!("seed_{seed}")));
    let mut sink = match &seed_dir {
        Some(dir) => {
            prepared.plan.save(&dir.join("partition.json"))?;
            Some(MetricsSink::create(&dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut state = FederationState::new(fed, &model, objective, data)?;
    let every = cfg.checkpoint_every;
    let ckpt_dir = seed_dir.as_ref().map(|d| d.join("checkpoints"));
    run_federation(&mut state, |st, records| {
        if let Some(sink) = sink.as_mut() {
            for r in records {
                sink.append(r)?;
            }
            sink.flush()?;
        }
        if let (Some(dir), true) = (&ckpt_dir, every > 0 && st.server.round % every == 0) {
            st.save_round_checkpoint(dir)?;
        }
        Ok(())
    })?;
    if let Some(dir) = &ckpt_dir {
        for c in &state.clients {
            save_model(
                &c.model,
                Some(&prepared.vocabulary),
                &dir.join("final").join(format!("client_{}.json", c.id)),
            )?;
        }
    }

    let rounds = state.server.round;
    let last: Vec<&RoundRecord> = state.history.iter().filter(|r| r.round == rounds).collect();
    let first: Vec<&RoundRecord> = state.history.iter().filter(|r| r.round == 1).collect();
    let summary = SeedSummary {
        seed,
        client_accuracy: last.iter().map(|r| r.test_accuracy.unwrap_or(f64::NAN)).collect(),
        mean_accuracy: mean_accuracy_of(&last)?,
        first_round_accuracy: mean_accuracy_of(&first)?,
        rounds,
    };
    Ok(SeedRun {
        summary,
        plan: prepared.plan,
        history: state.history.clone(),
        state,
    })
}

pub fn summarize(name: &str, ablation: Ablation, seeds: Vec<SeedSummary>) -> ExperimentSummary {
    let n = seeds.len() as f64;
    let mean = seeds.iter().map(|s| s.mean_accuracy).sum::<f64>() / n;
    let var = seeds.iter().map(|s| (s.mean_accuracy - mean).powi(2)).sum::<f64>() / n;
    ExperimentSummary {
        name: name.to_string(),
        ablation,
        seeds,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
    }
}

/// Runs every seed and writes `summary.json` when an output directory is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, s).map(|r| r.summary))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&cfg.name, cfg.ablation, seeds);
    if let Some(dir) = cfg.resolved_output_dir() {
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, ablation: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }
}

/// Runs A1, A2 and A3 on the same data and seeds. Each variant writes under
/// `output_dir/<label>` and the table goes to `output_dir/ablation.json`.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(3);
    for ablation in Ablation::ALL {
        let variant = ExperimentConfig {
            ablation,
            output_dir: cfg.output_dir.as_ref().map(|d| d.join(ablation.label())),
            ..cfg.clone()
        };
        let summary = run_experiment(&variant)?;
        rows.push(AblationRow {
            label: ablation.label().to_string(),
            ablation,
            mean_accuracy: summary.mean_accuracy,
            std_accuracy: summary.std_accuracy,
            per_seed: summary.seeds.iter().map(|s| s.mean_accuracy).collect(),
        });
    }
    let table = AblationTable {
        name: cfg.name.clone(),
        seeds: cfg.seeds.clone(),
        rows,
    };
    if let Some(dir) = cfg.resolved_output_dir() {
        write_json(&dir.join("ablation.json"), &table)?;
    }
    Ok(table)
}
