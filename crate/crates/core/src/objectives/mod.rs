//! The personalized preference loss: implicit and explicit margins, the
//! adaptive scale that balances them, sample exclusion, and the logistic loss
//! with its analytic gradients. Also the AdamW optimizer and the
//! loss-triggered learning-rate decay used by local training.
//!
//! Per sample,
//!
//! ```text
//! Δ_ir = [log π(y_w|x) − log π_ref(y_w|x)] − [log π(y_l|x) − log π_ref(y_l|x)]
//! Δ_er = h2(x, y_w) − h2(x, y_l)
//! Δ    = Δ_ir + w_r · s · Δ_er
//! L    = −mean log σ(β Δ)
//! ```
//!
//! `s` and `w_r` are constants inside a step. The explicit term is active only
//! when the reward head is enabled and `w_r > 0`; otherwise the pipeline skips
//! the reward forward, the exclusion filter, and the scaler entirely, and the
//! loss is the plain DPO loss bit for bit.

pub mod gradcheck;
mod optimizer;

use serde::{Deserialize, Serialize};

pub use optimizer::{
    lr_decay_check, LrDecayTracker, OptimizerConfig, OptimizerState, StepStats, LR_DECAY_FACTOR,
    LR_MIN,
};

use crate::data::EncodedTriple;
use crate::error::{Error, Result};
use crate::model::{ClientModel, DropoutMasks, ModelGrads, Policy, SequencePass, Trainable};
use crate::numerics::{log_sigmoid, sigmoid, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Margins are computed in eval mode.
    #[default]
    Off,
    /// One set of masks per pair, shared by the chosen and rejected passes.
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub w_r_start: f64,
    pub w_r_end: f64,
    /// Exclusion threshold in standard deviations; `None` keeps every sample.
    pub exclusion_k: Option<f64>,
    pub exclusion_max_ratio: f64,
    pub reward_head_enabled: bool,
    pub ema_momentum: f64,
    pub scaler_eps: f64,
    pub dropout: DropoutMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            w_r_start: 0.5,
            w_r_end: 1.5,
            exclusion_k: Some(2.0),
            exclusion_max_ratio: 0.5,
            reward_head_enabled: true,
            ema_momentum: 0.95,
            scaler_eps: 1e-8,
            dropout: DropoutMode::Off,
        }
    }
}

impl ObjectiveConfig {
    /// Standard DPO: no reward head, no exclusion.
    pub fn dpo(beta: f64) -> Self {
        Self {
            beta,
            reward_head_enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        let w_ok = |w: f64| w.is_finite() && w >= 0.0;
        if !w_ok(self.w_r_start) || !w_ok(self.w_r_end) {
            return Err(Error::Config("w_r endpoints must be finite and >= 0".into()));
        }
        if let Some(k) = self.exclusion_k {
            if k.is_nan() || k < 0.0 {
                return Err(Error::Config(format!("exclusion_k {k} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.exclusion_max_ratio) {
            return Err(Error::Config("exclusion_max_ratio must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config("ema_momentum must lie in [0, 1)".into()));
        }
        if self.scaler_eps.is_nan() || self.scaler_eps <= 0.0 {
            return Err(Error::Config("scaler_eps must be positive".into()));
        }
        Ok(())
    }

    /// Whether the explicit reward term contributes at reward weight `w_r`.
    pub fn explicit_active(&self, w_r: f64) -> bool {
        self.reward_head_enabled && w_r > 0.0
    }
}

/// Per-sample margins together with the `(w_r, s)` they were combined with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginBundle {
    pub delta_ir: f64,
    pub delta_er: f64,
    pub delta: f64,
}

/// Exponential moving averages of `mean|Δ_ir|` and `mean|Δ_er|`, smoothed
/// separately; their ratio is the scale `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveScaler {
    pub ema_ir: f64,
    pub ema_er: f64,
    pub momentum: f64,
    pub eps: f64,
    pub initialized: bool,
}

impl AdaptiveScaler {
    pub fn new(momentum: f64, eps: f64) -> Self {
        Self {
            ema_ir: 0.0,
            ema_er: 0.0,
            momentum,
            eps,
            initialized: false,
        }
    }

    pub fn from_config(cfg: &ObjectiveConfig) -> Self {
        Self::new(cfg.ema_momentum, cfg.scaler_eps)
    }

    pub fn scale(&self) -> Option<f64> {
        self.initialized.then(|| self.ema_ir / (self.ema_er + self.eps))
    }

    /// Folds batch means of `|Δ_ir|` and `|Δ_er|` into the averages and
    /// returns the new scale.
    pub fn observe(&mut self, mean_ir: f64, mean_er: f64) -> f64 {
        if self.initialized {
            let m = self.momentum;
            self.ema_ir = m * self.ema_ir + (1.0 - m) * mean_ir;
            self.ema_er = m * self.ema_er + (1.0 - m) * mean_er;
        } else {
            self.ema_ir = mean_ir;
            self.ema_er = mean_er;
            self.initialized = true;
        }
        self.ema_ir / (self.ema_er + self.eps)
    }

    pub fn update(&mut self, batch: &[MarginBundle]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("scaler update on an empty batch".into()));
        }
        let n = batch.len() as f64;
        let mean_ir = batch.iter().map(|b| b.delta_ir.abs()).sum::<f64>() / n;
        let mean_er = batch.iter().map(|b| b.delta_er.abs()).sum::<f64>() / n;
        Ok(self.observe(mean_ir, mean_er))
    }
}

/// Linear schedule from `w_r_start` at round 0 to `w_r_end` at round `T − 1`.
pub fn reward_weight_at(cfg: &ObjectiveConfig, t: usize, total_rounds: usize) -> Result<f64> {
    if total_rounds == 0 || t >= total_rounds {
        return Err(Error::Contract(format!(
            "round {t} outside schedule of {total_rounds} rounds"
        )));
    }
    if total_rounds == 1 {
        return Ok(cfg.w_r_start);
    }
    let frac = t as f64 / (total_rounds - 1) as f64;
    Ok(cfg.w_r_start + (cfg.w_r_end - cfg.w_r_start) * frac)
}

pub fn combined_margin(delta_ir: f64, delta_er: f64, w_r: f64, s: f64) -> f64 {
    delta_ir + w_r * s * delta_er
}

/// Indices kept after explicit-margin outlier exclusion.
///
/// Each sample's `Δ_er` is compared with the mean and population standard
/// deviation of the *other* samples in the batch; it is flagged when
/// `|Δ_er − mean| > k·std`. Leave-one-out statistics keep a single outlier
/// from inflating the spread it is measured against. Batches smaller than 3
/// are never filtered. If more than `max_ratio · n` samples are flagged, only
/// the ones farthest from the batch mean are dropped.
pub fn filter_batch(batch: &[MarginBundle], cfg: &ObjectiveConfig) -> Vec<usize> {
    let n = batch.len();
    let all: Vec<usize> = (0..n).collect();
    let Some(k) = cfg.exclusion_k else {
        return all;
    };
    let cap = (cfg.exclusion_max_ratio * n as f64).floor() as usize;
    if n < 3 || cap == 0 || k.is_infinite() {
        return all;
    }
    let er: Vec<f64> = batch.iter().map(|b| b.delta_er).collect();
    let others = (n - 1) as f64;
    let mut flagged: Vec<usize> = (0..n)
        .filter(|&i| {
            let mean = er.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum::<f64>() / others;
            let var = er
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| (v - mean).powi(2))
                .sum::<f64>()
                / others;
            (er[i] - mean).abs() > k * var.sqrt()
        })
        .collect();
    if flagged.len() > cap {
        let mean = er.iter().sum::<f64>() / n as f64;
        flagged.sort_by(|&a, &b| {
            (er[b] - mean).abs().total_cmp(&(er[a] - mean).abs()).then(a.cmp(&b))
        });
        flagged.truncate(cap);
    }
    all.into_iter().filter(|i| !flagged.contains(i)).collect()
}

/// A triple with its reference log-probabilities, computed once since the
/// reference never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriple {
    pub triple: EncodedTriple,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

pub fn score_reference(reference: &impl Policy, triples: &[EncodedTriple]) -> Result<Vec<ScoredTriple>> {
    triples
        .iter()
        .map(|t| {
            Ok(ScoredTriple {
                ref_chosen: reference.sequence_logprob(&t.prompt, &t.chosen)?,
                ref_rejected: reference.sequence_logprob(&t.prompt, &t.rejected)?,
                triple: t.clone(),
            })
        })
        .collect()
}

pub fn implicit_margin(policy: &impl Policy, reference: &impl Policy, t: &EncodedTriple) -> Result<f64> {
    let lw = policy.sequence_logprob(&t.prompt, &t.chosen)? - reference.sequence_logprob(&t.prompt, &t.chosen)?;
    let ll = policy.sequence_logprob(&t.prompt, &t.rejected)?
        - reference.sequence_logprob(&t.prompt, &t.rejected)?;
    Ok(lw - ll)
}

/// `h2(x, y_w) − h2(x, y_l)`; in training mode both responses share one
/// set of dropout masks.
pub fn explicit_margin(
    policy: &ClientModel,
    t: &EncodedTriple,
    rng: &mut SeededRng,
    training: bool,
) -> Result<f64> {
    let masks = if training {
        Some(DropoutMasks::sample(policy, rng)?)
    } else {
        None
    };
    let w = policy.forward_pass(&t.prompt, &t.chosen, masks.as_ref(), true)?;
    let l = policy.forward_pass(&t.prompt, &t.rejected, masks.as_ref(), true)?;
    Ok(w.reward().expect("reward pass") - l.reward().expect("reward pass"))
}

#[derive(Debug, Clone)]
pub struct PdpoOutput {
    pub loss: f64,
    /// Gradients of `loss` for the selected groups; empty when not requested.
    pub grads: ModelGrads,
    /// One bundle per input sample, excluded ones included.
    pub margins: Vec<MarginBundle>,
    pub kept: Vec<usize>,
    pub s: f64,
    pub w_r: f64,
}

struct PairPasses {
    chosen: SequencePass,
    rejected: SequencePass,
}

fn forward_pairs(
    policy: &ClientModel,
    batch: &[ScoredTriple],
    with_reward: bool,
    mut mask_rng: Option<&mut SeededRng>,
) -> Result<(Vec<PairPasses>, Vec<MarginBundle>)> {
    let mut passes = Vec::with_capacity(batch.len());
    let mut margins = Vec::with_capacity(batch.len());
    for st in batch {
        let masks = match mask_rng.as_deref_mut() {
            Some(rng) => Some(DropoutMasks::sample(policy, rng)?),
            None => None,
        };
        let t = &st.triple;
        let chosen = policy.forward_pass(&t.prompt, &t.chosen, masks.as_ref(), with_reward)?;
        let rejected = policy.forward_pass(&t.prompt, &t.rejected, masks.as_ref(), with_reward)?;
        let delta_ir = (chosen.logprob - st.ref_chosen) - (rejected.logprob - st.ref_rejected);
        let delta_er = match (chosen.reward(), rejected.reward()) {
            (Some(a), Some(b)) => a - b,
            _ => 0.0,
        };
        margins.push(MarginBundle {
            delta_ir,
            delta_er,
            delta: delta_ir,
        });
        passes.push(PairPasses { chosen, rejected });
    }
    Ok((passes, margins))
}

fn logistic_loss(margins: &[MarginBundle], kept: &[usize], beta: f64, w_r: f64, s: f64) -> Result<f64> {
    let n = kept.len() as f64;
    let mut total = 0.0;
    for &k in kept {
        total += -log_sigmoid(beta * margins[k].delta);
    }
    let loss = total / n;
    if !loss.is_finite() {
        let mean_abs = kept.iter().map(|&k| margins[k].delta.abs()).sum::<f64>() / n;
        return Err(Error::Numeric(format!(
            "non-finite preference loss (mean |Δ| = {mean_abs}, s = {s}, w_r = {w_r}, beta = {beta})"
        )));
    }
    Ok(loss)
}

fn backprop(
    policy: &ClientModel,
    passes: &[PairPasses],
    margins: &[MarginBundle],
    kept: &[usize],
    beta: f64,
    reward_coeff: f64,
    sel: Trainable,
) -> Result<ModelGrads> {
    let mut grads = ModelGrads::zeros(policy, sel);
    let n = kept.len() as f64;
    for &k in kept {
        // d(−log σ(βΔ))/dΔ = −β σ(−βΔ)
        let g = -beta * sigmoid(-beta * margins[k].delta) / n;
        let (dr_w, dr_l) = if reward_coeff == 0.0 {
            (0.0, 0.0)
        } else {
            (g * reward_coeff, -g * reward_coeff)
        };
        policy.backward(&passes[k].chosen, g, dr_w, &mut grads)?;
        policy.backward(&passes[k].rejected, -g, dr_l, &mut grads)?;
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient in preference loss".into()));
    }
    Ok(grads)
}

/// One training-mode evaluation of the loss: margins, exclusion, scaler
/// update, loss, and gradients for `sel`.
pub fn pdpo_loss_and_grads(
    policy: &ClientModel,
    batch: &[ScoredTriple],
    cfg: &ObjectiveConfig,
    scaler: &mut AdaptiveScaler,
    w_r: f64,
    sel: Trainable,
    rng: &mut SeededRng,
) -> Result<PdpoOutput> {
    if sel.is_empty() {
        return Err(Error::Contract("no trainable parameter group selected".into()));
    }
    if batch.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let explicit = cfg.explicit_active(w_r);
    let mask_rng = (cfg.dropout == DropoutMode::Paired).then_some(rng);
    let (passes, mut margins) = forward_pairs(policy, batch, explicit, mask_rng)?;
    let (kept, s) = if explicit {
        let kept = filter_batch(&margins, cfg);
        if kept.is_empty() {
            return Err(Error::Batch(format!("all {} samples excluded", batch.len())));
        }
        let kept_bundles: Vec<MarginBundle> = kept.iter().map(|&k| margins[k]).collect();
        let s = scaler.update(&kept_bundles)?;
        for m in &mut margins {
            m.delta = combined_margin(m.delta_ir, m.delta_er, w_r, s);
        }
        (kept, s)
    } else {
        ((0..batch.len()).collect(), 0.0)
    };
    let loss = logistic_loss(&margins, &kept, cfg.beta, w_r, s)?;
    let reward_coeff = if explicit { w_r * s } else { 0.0 };
    let grads = backprop(policy, &passes, &margins, &kept, cfg.beta, reward_coeff, sel)?;
    Ok(PdpoOutput {
        loss,
        grads,
        margins,
        kept,
        s,
        w_r,
    })
}

/// Eval-mode loss at a fixed scale `s`, over every sample, without touching
/// any scaler. Gradients are computed when `sel` is given. This is the
/// function whose derivative the training step uses, so it is also what
/// finite-difference checks perturb.
pub fn pdpo_loss_fixed_scale(
    policy: &ClientModel,
    batch: &[ScoredTriple],
    cfg: &ObjectiveConfig,
    w_r: f64,
    s: f64,
    sel: Option<Trainable>,
) -> Result<PdpoOutput> {
    if batch.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let explicit = cfg.explicit_active(w_r) && s != 0.0;
    let (passes, mut margins) = forward_pairs(policy, batch, explicit, None)?;
    if explicit {
        for m in &mut margins {
            m.delta = combined_margin(m.delta_ir, m.delta_er, w_r, s);
        }
    }
    let kept: Vec<usize> = (0..batch.len()).collect();
    let loss = logistic_loss(&margins, &kept, cfg.beta, w_r, s)?;
    let grads = match sel {
        Some(sel) => {
            let reward_coeff = if explicit { w_r * s } else { 0.0 };
            backprop(policy, &passes, &margins, &kept, cfg.beta, reward_coeff, sel)?
        }
        None => ModelGrads::default(),
    };
    Ok(PdpoOutput {
        loss,
        grads,
        margins,
        kept,
        s,
        w_r,
    })
}

/// Reference implementation of the standard DPO loss
/// `−mean log σ(β Δ_ir)` and its gradient, with no reward machinery at all.
pub fn dpo_loss_and_grads(
    policy: &ClientModel,
    batch: &[ScoredTriple],
    beta: f64,
    sel: Trainable,
) -> Result<(f64, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut passes = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for st in batch {
        let t = &st.triple;
        let w = policy.forward_pass(&t.prompt, &t.chosen, None, false)?;
        let l = policy.forward_pass(&t.prompt, &t.rejected, None, false)?;
        let delta_ir = (w.logprob - st.ref_chosen) - (l.logprob - st.ref_rejected);
        total += -log_sigmoid(beta * delta_ir);
        passes.push((w, l, delta_ir));
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite DPO loss".into()));
    }
    let mut grads = ModelGrads::zeros(policy, sel);
    for (w, l, delta_ir) in &passes {
        let g = -beta * sigmoid(-beta * delta_ir) / n;
        policy.backward(w, g, 0.0, &mut grads)?;
        policy.backward(l, -g, 0.0, &mut grads)?;
    }
    Ok((loss, grads))
}
