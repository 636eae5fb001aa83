//! Finite-difference audit of the preference-loss gradients on a tiny model.

use serde::Serialize;

use super::{pdpo_loss_fixed_scale, score_reference, ObjectiveConfig, ScoredTriple};
use crate::data::EncodedTriple;
use crate::error::{Error, Result};
use crate::model::{
    BackboneConfig, BottleneckConfig, ClientModel, HeadConfig, LoraConfig, LoraTarget, ModelConfig,
    ParamGroup, Trainable,
};
use crate::numerics::{finite_diff_grad, Matrix, SeededRng};

pub const STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor so that gradients near zero are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

const GROUPS: [ParamGroup; 4] = [
    ParamGroup::Lora,
    ParamGroup::Bottleneck,
    ParamGroup::LmHead,
    ParamGroup::RewardHead,
];

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub n_params: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub hidden_dim: usize,
    pub loss: f64,
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Tiny single-layer model: vocabulary 16, dropout off.
pub fn tiny_model_config(hidden_dim: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            vocab_size: 16,
            hidden_dim,
            n_layers: 1,
            n_heads: if hidden_dim.is_multiple_of(2) { 2 } else { 1 },
            max_seq_len: 12,
            bos_token: 0,
            seed: 11,
        },
        lora: LoraConfig {
            rank: 2,
            alpha: 4.0,
            targets: LoraTarget::ALL.to_vec(),
        },
        bottleneck: BottleneckConfig {
            bottleneck_dim: 4,
            dropout_p: 0.0,
            enabled: true,
        },
        heads: HeadConfig {
            reward_hidden: 5,
            reward_dropout_p: 0.0,
            pool_prompt: false,
        },
    }
}

/// A policy that has drifted from its reference: the reference is the
/// freshly initialized model, the policy additionally carries random LoRA
/// `B` factors and perturbed heads, so every group has a live gradient.
pub fn drifted_fixture(hidden_dim: usize, seed: u64) -> Result<(ClientModel, Vec<ScoredTriple>)> {
    let cfg = tiny_model_config(hidden_dim);
    let mut policy = ClientModel::init(&cfg, seed)?;
    let reference = policy.snapshot();
    let mut rng = SeededRng::new(seed, 0x6c);
    for ad in &mut policy.lora.adapters {
        ad.b = Matrix::gaussian(ad.b.rows(), ad.b.cols(), 0.3, &mut rng);
    }
    for t in policy.trainable_tensors_mut(Trainable::PERSONALIZED) {
        let noise = Matrix::gaussian(t.rows(), t.cols(), 0.05, &mut rng);
        t.add_scaled(&noise, 1.0)?;
    }
    let vocab = cfg.backbone.vocab_size;
    let mut tokens = |n: usize| -> Vec<u32> { (0..n).map(|_| 1 + rng.below(vocab - 1) as u32).collect() };
    let triples: Vec<EncodedTriple> = (0..3)
        .map(|_| EncodedTriple {
            prompt: tokens(2),
            chosen: tokens(3),
            rejected: tokens(4),
        })
        .collect();
    let batch = score_reference(&reference, &triples)?;
    Ok((policy, batch))
}

fn set_group(model: &mut ClientModel, group: ParamGroup, theta: &[f64]) {
    let sel = Trainable::default().with(group);
    let mut offset = 0;
    for t in model.trainable_tensors_mut(sel) {
        let n = t.len();
        t.as_mut_slice().copy_from_slice(&theta[offset..offset + n]);
        offset += n;
    }
}

fn flatten<'a>(tensors: impl IntoIterator<Item = &'a Matrix>) -> Vec<f64> {
    tensors.into_iter().flat_map(|t| t.as_slice().iter().copied()).collect()
}

/// Compares analytic and central-difference gradients of the loss at a
/// fixed scale, group by group.
pub fn check_model(
    policy: &ClientModel,
    batch: &[ScoredTriple],
    cfg: &ObjectiveConfig,
    w_r: f64,
    s: f64,
) -> Result<GradcheckReport> {
    let analytic = pdpo_loss_fixed_scale(policy, batch, cfg, w_r, s, Some(Trainable::ALL))?;
    let mut groups = Vec::new();
    for group in GROUPS {
        let sel = Trainable::default().with(group);
        let theta = flatten(policy.trainable_tensors(sel));
        if theta.is_empty() {
            continue;
        }
        let analytic_flat = flatten(analytic.grads.group_tensors(group));
        let mut probe = policy.clone();
        let numeric = finite_diff_grad(
            |th| {
                set_group(&mut probe, group, th);
                pdpo_loss_fixed_scale(&probe, batch, cfg, w_r, s, None)
                    .map(|o| o.loss)
                    .unwrap_or(f64::NAN)
            },
            &theta,
            STEP,
        )?;
        if numeric.len() != analytic_flat.len() {
            return Err(Error::Oracle(format!(
                "{group:?}: {} numeric vs {} analytic entries",
                numeric.len(),
                analytic_flat.len()
            )));
        }
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for (&a, &n) in analytic_flat.iter().zip(&numeric) {
            max_rel = max_rel.max(relative_error(a, n));
            max_abs = max_abs.max((a - n).abs());
        }
        groups.push(GroupCheck {
            group,
            n_params: theta.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        hidden_dim: policy.config.backbone.hidden_dim,
        loss: analytic.loss,
        groups,
        max_rel_err,
        threshold: MAX_REL_ERR,
        pass: max_rel_err < MAX_REL_ERR,
    })
}

/// Gradient audit on the drifted tiny fixture with the reward term active.
pub fn gradcheck_pdpo(hidden_dim: usize, seed: u64) -> Result<GradcheckReport> {
    if hidden_dim < 2 {
        return Err(Error::Config(format!("gradcheck dim {hidden_dim} < 2")));
    }
    let (policy, batch) = drifted_fixture(hidden_dim, seed)?;
    check_model(&policy, &batch, &ObjectiveConfig::default(), 0.9, 1.7)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let report = gradcheck_pdpo(8, 3).unwrap();
        assert_eq!(report.groups.len(), 4);
        for g in &report.groups {
            assert!(g.max_rel_err < MAX_REL_ERR, "{g:?}");
        }
        assert!(report.pass);
    }
}
