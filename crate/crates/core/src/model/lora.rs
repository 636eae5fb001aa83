use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{checksum, Matrix, SeededRng};

/// Which backbone projection a LoRA adapter sits beside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    /// Fused query/key/value projection, `3d × d`.
    AttnQkv,
    /// Attention output projection, `d × d`.
    AttnOut,
    /// MLP expansion, `4d × d`.
    MlpFc,
    /// MLP contraction, `d × 4d`.
    MlpOut,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [
        LoraTarget::AttnQkv,
        LoraTarget::AttnOut,
        LoraTarget::MlpFc,
        LoraTarget::MlpOut,
    ];

    /// `(out, in)` dimensions of the wrapped weight for hidden size `d`.
    pub fn shape(self, d: usize) -> (usize, usize) {
        match self {
            LoraTarget::AttnQkv => (3 * d, d),
            LoraTarget::AttnOut => (d, d),
            LoraTarget::MlpFc => (4 * d, d),
            LoraTarget::MlpOut => (d, 4 * d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: LoraTarget::ALL.to_vec(),
        }
    }
}

/// Low-rank pair `(A, B)` added in parallel to one frozen projection:
/// `W = W0 + (alpha / rank) · B · A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub layer: usize,
    pub target: LoraTarget,
    pub rank: usize,
    pub alpha: f64,
    /// `rank × in`
    pub a: Matrix,
    /// `out × rank`
    pub b: Matrix,
}

impl LoraAdapter {
    /// `A` Gaussian with std `1/sqrt(in)`, `B` zero.
    pub fn init(
        layer: usize,
        target: LoraTarget,
        d: usize,
        rank: usize,
        alpha: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (m, n) = target.shape(d);
        if rank == 0 || rank > m.min(n) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} invalid for {m}x{n} projection"
            )));
        }
        Ok(Self {
            layer,
            target,
            rank,
            alpha,
            a: Matrix::gaussian(rank, n, 1.0 / (n as f64).sqrt(), rng),
            b: Matrix::zeros(m, rank),
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The dense update `(alpha / rank) · B · A`.
    pub fn delta(&self) -> Matrix {
        let mut d = self.b.matmul(&self.a).expect("LoRA factors are conformable");
        d.scale(self.scaling());
        d
    }

    fn zeros_like(&self) -> Self {
        Self {
            a: Matrix::zeros(self.a.rows(), self.a.cols()),
            b: Matrix::zeros(self.b.rows(), self.b.cols()),
            ..self.clone()
        }
    }
}

/// All LoRA adapters of one model, ordered by `(layer, target)`.
///
/// This is the only parameter set that crosses the client/server boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    pub fn init(cfg: &LoraConfig, d: usize, n_layers: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut targets = cfg.targets.clone();
        targets.sort();
        targets.dedup();
        let mut adapters = Vec::with_capacity(n_layers * targets.len());
        for layer in 0..n_layers {
            for &t in &targets {
                adapters.push(LoraAdapter::init(layer, t, d, cfg.rank, cfg.alpha, rng)?);
            }
        }
        Ok(Self { adapters })
    }

    pub fn get(&self, layer: usize, target: LoraTarget) -> Option<&LoraAdapter> {
        self.adapters
            .iter()
            .find(|a| a.layer == layer && a.target == target)
    }

    pub(crate) fn index_of(&self, layer: usize, target: LoraTarget) -> Option<usize> {
        self.adapters
            .iter()
            .position(|a| a.layer == layer && a.target == target)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            adapters: self.adapters.iter().map(LoraAdapter::zeros_like).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.adapters.iter().flat_map(|a| [&a.a, &a.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.tensors())
    }

    /// Same layers, targets, ranks and factor shapes.
    pub fn same_layout(&self, other: &LoraSet) -> bool {
        self.adapters.len() == other.adapters.len()
            && self.adapters.iter().zip(&other.adapters).all(|(x, y)| {
                x.layer == y.layer
                    && x.target == y.target
                    && x.a.shape() == y.a.shape()
                    && x.b.shape() == y.b.shape()
            })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }
}
