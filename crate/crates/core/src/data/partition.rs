//! Non-IID client partitions: by reward margin, by label group, or one whole
//! dataset per client.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PreferenceTriple;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

const SPLIT_STREAM_BASE: u64 = 0x5_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    RewardMargin,
    ByLabel,
    CrossDomain,
}

/// Indices into the partitioned dataset held by one client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub strategy: PartitionStrategy,
    pub n_clients: usize,
    /// `assignment[sample] = client`.
    pub assignment: Vec<usize>,
    pub train_test_ratio: f64,
    pub seed: u64,
    pub clients: Vec<ClientSplit>,
}

impl PartitionPlan {
    fn from_assignment(
        strategy: PartitionStrategy,
        n_clients: usize,
        assignment: Vec<usize>,
        train_test_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(train_test_ratio > 0.0 && train_test_ratio <= 1.0) {
            return Err(Error::Config(format!("train_test_ratio {train_test_ratio} not in (0, 1]")));
        }
        let mut members = vec![Vec::new(); n_clients];
        for (i, &c) in assignment.iter().enumerate() {
            members[c].push(i);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("client {c} received no samples")));
        }
        let clients = members
            .into_iter()
            .enumerate()
            .map(|(c, mut idx)| {
                let n = idx.len();
                SeededRng::new(seed, SPLIT_STREAM_BASE + c as u64).shuffle(&mut idx);
                let n_train = if train_test_ratio >= 1.0 || n < 2 {
                    n
                } else {
                    ((train_test_ratio * n as f64).round() as usize).clamp(1, n - 1)
                };
                let test = idx.split_off(n_train);
                ClientSplit { train: idx, test }
            })
            .collect();
        Ok(Self {
            strategy,
            n_clients,
            assignment,
            train_test_ratio,
            seed,
            clients,
        })
    }

    pub fn client_of(&self, sample: usize) -> usize {
        self.assignment[sample]
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.train.len()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::checkpoint::write_json(path, self)
    }
}

/// Sorts by margin descending (stable, ties by index) and cuts contiguous
/// shards; the first `len % n` shards take one extra sample.
pub fn partition_reward_margin(
    data: &[PreferenceTriple],
    n_clients: usize,
    train_test_ratio: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients == 0 || n_clients > data.len() {
        return Err(Error::Config(format!(
            "cannot split {} samples across {n_clients} clients",
            data.len()
        )));
    }
    let margins = data
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.margin()
                .ok_or_else(|| Error::Schema(format!("sample {i} has no reward annotations")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then(a.cmp(&b)));

    let base = data.len() / n_clients;
    let extra = data.len() % n_clients;
    let mut assignment = vec![0; data.len()];
    let mut cursor = 0;
    for c in 0..n_clients {
        let size = base + usize::from(c < extra);
        for &i in &order[cursor..cursor + size] {
            assignment[i] = c;
        }
        cursor += size;
    }
    PartitionPlan::from_assignment(
        PartitionStrategy::RewardMargin,
        n_clients,
        assignment,
        train_test_ratio,
        seed,
    )
}

/// Routes each sample to the client mapped from its `domain_tag`.
pub fn partition_by_label(
    data: &[PreferenceTriple],
    label_groups: &BTreeMap<String, usize>,
    train_test_ratio: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if data.is_empty() {
        return Err(Error::Config("cannot partition an empty dataset".into()));
    }
    let assignment = data
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let tag = t
                .domain_tag
                .as_deref()
                .ok_or_else(|| Error::Schema(format!("sample {i} has no domain_tag")))?;
            label_groups
                .get(tag)
                .copied()
                .ok_or_else(|| Error::Schema(format!("label {tag:?} has no client mapping")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let n_clients = assignment.iter().max().map_or(0, |m| m + 1);
    PartitionPlan::from_assignment(
        PartitionStrategy::ByLabel,
        n_clients,
        assignment,
        train_test_ratio,
        seed,
    )
}

/// Client `i` receives dataset `i` wholesale, tagged with its name. Returns
/// the concatenated corpus the plan indexes into.
pub fn assign_cross_domain(
    datasets: Vec<(String, Vec<PreferenceTriple>)>,
    train_test_ratio: f64,
    seed: u64,
) -> Result<(Vec<PreferenceTriple>, PartitionPlan)> {
    if datasets.len() < 2 {
        return Err(Error::Config("cross-domain assignment needs at least 2 datasets".into()));
    }
    let mut names = BTreeSet::new();
    for (name, rows) in &datasets {
        if !names.insert(name.as_str()) {
            return Err(Error::Config(format!("duplicate dataset name {name:?}")));
        }
        if rows.is_empty() {
            return Err(Error::Config(format!("dataset {name:?} is empty")));
        }
    }
    let n_clients = datasets.len();
    let mut corpus = Vec::new();
    let mut assignment = Vec::new();
    for (c, (name, rows)) in datasets.into_iter().enumerate() {
        for mut t in rows {
            t.domain_tag = Some(name.clone());
            corpus.push(t);
            assignment.push(c);
        }
    }
    let plan = PartitionPlan::from_assignment(
        PartitionStrategy::CrossDomain,
        n_clients,
        assignment,
        train_test_ratio,
        seed,
    )?;
    Ok((corpus, plan))
}
