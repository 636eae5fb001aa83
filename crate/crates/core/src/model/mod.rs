//! The client network: frozen backbone with LoRA adapters, a private
//! bottleneck adapter, and the two private heads (token logits and scalar
//! reward).
//!
//! Every scored sequence is `[bos] ++ prompt ++ response`. Response token
//! `j` is predicted from the hidden state at position `j - 1`, and the reward
//! head mean-pools the bottleneck outputs over the response positions
//! (optionally the whole sequence).

mod backbone;
mod bottleneck;
pub mod checkpoint;
mod heads;
mod lora;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig, BackboneLayer, BackboneTrace};
pub use bottleneck::{BottleneckAdapter, BottleneckConfig, BottleneckTrace};
pub use heads::{HeadConfig, LmHead, RewardHead, RewardTrace};
pub use lora::{LoraAdapter, LoraConfig, LoraSet, LoraTarget};

use crate::error::{Error, Result};
use crate::numerics::{checksum, dropout_mask, Matrix, SeededRng};

pub(crate) const STREAM_BACKBONE: u64 = 1;
pub(crate) const STREAM_LORA: u64 = 2;
pub(crate) const STREAM_BOTTLENECK: u64 = 3;
pub(crate) const STREAM_LM_HEAD: u64 = 4;
pub(crate) const STREAM_REWARD_HEAD: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub lora: LoraConfig,
    pub bottleneck: BottleneckConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let d = self.backbone.hidden_dim;
        for t in &self.lora.targets {
            let (m, n) = t.shape(d);
            if self.lora.rank == 0 || self.lora.rank > m.min(n) {
                return Err(Error::Config(format!("LoRA rank {} invalid for {t:?}", self.lora.rank)));
            }
        }
        if !(self.lora.alpha.is_finite() && self.lora.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        if self.bottleneck.enabled && self.bottleneck.bottleneck_dim == 0 {
            return Err(Error::Config("bottleneck_dim must be positive".into()));
        }
        if self.heads.reward_hidden == 0 {
            return Err(Error::Config("reward_hidden must be positive".into()));
        }
        for p in [self.bottleneck.dropout_p, self.heads.reward_dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p}")));
            }
        }
        Ok(())
    }
}

/// Trainable parameter groups. The backbone is never one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Lora,
    Bottleneck,
    LmHead,
    RewardHead,
}

/// The set of groups that receive gradients in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub lora: bool,
    pub bottleneck: bool,
    pub lm_head: bool,
    pub reward_head: bool,
}

impl Trainable {
    pub const LORA: Trainable = Trainable {
        lora: true,
        bottleneck: false,
        lm_head: false,
        reward_head: false,
    };

    /// Bottleneck adapter and both heads.
    pub const PERSONALIZED: Trainable = Trainable {
        lora: false,
        bottleneck: true,
        lm_head: true,
        reward_head: true,
    };

    pub const ALL: Trainable = Trainable {
        lora: true,
        bottleneck: true,
        lm_head: true,
        reward_head: true,
    };

    pub fn contains(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Lora => self.lora,
            ParamGroup::Bottleneck => self.bottleneck,
            ParamGroup::LmHead => self.lm_head,
            ParamGroup::RewardHead => self.reward_head,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.lora || self.bottleneck || self.lm_head || self.reward_head)
    }

    pub fn with(mut self, g: ParamGroup) -> Self {
        match g {
            ParamGroup::Lora => self.lora = true,
            ParamGroup::Bottleneck => self.bottleneck = true,
            ParamGroup::LmHead => self.lm_head = true,
            ParamGroup::RewardHead => self.reward_head = true,
        }
        self
    }

    pub fn without(mut self, g: ParamGroup) -> Self {
        match g {
            ParamGroup::Lora => self.lora = false,
            ParamGroup::Bottleneck => self.bottleneck = false,
            ParamGroup::LmHead => self.lm_head = false,
            ParamGroup::RewardHead => self.reward_head = false,
        }
        self
    }
}

/// Gradients keyed by parameter group; `None` for groups not selected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelGrads {
    pub lora: Option<LoraSet>,
    pub bottleneck: Option<BottleneckAdapter>,
    pub lm_head: Option<LmHead>,
    pub reward_head: Option<RewardHead>,
}

impl ModelGrads {
    pub fn zeros(model: &ClientModel, sel: Trainable) -> Self {
        Self {
            lora: sel.lora.then(|| model.lora.zeros_like()),
            bottleneck: if sel.bottleneck {
                model.bottleneck.as_ref().map(BottleneckAdapter::zeros_like)
            } else {
                None
            },
            lm_head: sel.lm_head.then(|| model.lm_head.zeros_like()),
            reward_head: sel.reward_head.then(|| model.reward_head.zeros_like()),
        }
    }

    /// Tensors in the canonical group order used by the optimizer.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        if let Some(g) = &self.lora {
            out.extend(g.tensors());
        }
        if let Some(g) = &self.bottleneck {
            out.extend(g.tensors());
        }
        if let Some(g) = &self.lm_head {
            out.extend(g.tensors());
        }
        if let Some(g) = &self.reward_head {
            out.extend(g.tensors());
        }
        out
    }

    /// Tensors of one group; empty when the group was not selected.
    pub fn group_tensors(&self, group: ParamGroup) -> Vec<&Matrix> {
        match group {
            ParamGroup::Lora => self.lora.as_ref().map(LoraSet::tensors),
            ParamGroup::Bottleneck => self.bottleneck.as_ref().map(BottleneckAdapter::tensors),
            ParamGroup::LmHead => self.lm_head.as_ref().map(LmHead::tensors),
            ParamGroup::RewardHead => self.reward_head.as_ref().map(RewardHead::tensors),
        }
        .unwrap_or_default()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        if let Some(g) = &mut self.lora {
            out.extend(g.tensors_mut());
        }
        if let Some(g) = &mut self.bottleneck {
            out.extend(g.tensors_mut());
        }
        if let Some(g) = &mut self.lm_head {
            out.extend(g.tensors_mut());
        }
        if let Some(g) = &mut self.reward_head {
            out.extend(g.tensors_mut());
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) -> Result<()> {
        let mine = self.tensors_mut();
        let theirs = other.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Contract("gradient group mismatch".into()));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            a.add_scaled(b, 1.0)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sum_squares()).sum::<f64>().sqrt()
    }
}

/// Dropout masks shared by both responses of one preference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// One bottleneck mask per sequence position.
    pub bottleneck: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
}

impl DropoutMasks {
    pub fn sample(model: &ClientModel, rng: &mut SeededRng) -> Result<Self> {
        let bottleneck = match &model.bottleneck {
            Some(b) => (0..model.config.backbone.max_seq_len)
                .map(|_| dropout_mask(rng, b.bottleneck_dim(), b.dropout_p, true))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let reward = dropout_mask(
            rng,
            model.reward_head.hidden(),
            model.reward_head.dropout_p,
            true,
        )?;
        Ok(Self { bottleneck, reward })
    }
}

/// Activations of one `(prompt, response)` pass through the client model.
#[derive(Debug, Clone)]
pub struct SequencePass {
    tokens: Vec<u32>,
    response_start: usize,
    backbone: BackboneTrace,
    bottleneck: Vec<Option<BottleneckTrace>>,
    z: Vec<Vec<f64>>,
    lm_probs: Vec<Vec<f64>>,
    pub logprob: f64,
    reward: Option<(f64, RewardTrace)>,
}

impl SequencePass {
    pub fn reward(&self) -> Option<f64> {
        self.reward.as_ref().map(|(r, _)| *r)
    }

    fn pool_span(&self, pool_prompt: bool) -> std::ops::Range<usize> {
        if pool_prompt {
            0..self.tokens.len()
        } else {
            self.response_start..self.tokens.len()
        }
    }
}

/// A client's full network. The backbone sits behind an `Arc` and is never
/// exposed mutably, so it is frozen by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub config: ModelConfig,
    backbone: Arc<Backbone>,
    pub lora: LoraSet,
    /// `None` bypasses the adapter: heads read backbone features directly.
    pub bottleneck: Option<BottleneckAdapter>,
    pub lm_head: LmHead,
    pub reward_head: RewardHead,
}

/// Scores `log π(y | x)`; implemented by trainable models and frozen snapshots.
pub trait Policy {
    fn sequence_logprob(&self, prompt: &[u32], response: &[u32]) -> Result<f64>;
}

impl ClientModel {
    /// Builds a fresh backbone from `cfg.backbone.seed` and client-specific
    /// modules from `client_seed`.
    pub fn init(cfg: &ModelConfig, client_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let backbone = Arc::new(Backbone::init(&cfg.backbone)?);
        Self::with_backbone(backbone, cfg, client_seed)
    }

    /// Client modules on top of an existing (shared) backbone.
    pub fn with_backbone(backbone: Arc<Backbone>, cfg: &ModelConfig, client_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if backbone.config != cfg.backbone {
            return Err(Error::Config("backbone does not match model config".into()));
        }
        let d = cfg.backbone.hidden_dim;
        let lora = LoraSet::init(
            &cfg.lora,
            d,
            cfg.backbone.n_layers,
            &mut SeededRng::new(client_seed, STREAM_LORA),
        )?;
        let bottleneck = if cfg.bottleneck.enabled {
            Some(BottleneckAdapter::init(
                d,
                &cfg.bottleneck,
                &mut SeededRng::new(client_seed, STREAM_BOTTLENECK),
            )?)
        } else {
            None
        };
        let lm_head = LmHead::init(
            d,
            cfg.backbone.vocab_size,
            &mut SeededRng::new(client_seed, STREAM_LM_HEAD),
        );
        let reward_head = RewardHead::init(
            d,
            &cfg.heads,
            &mut SeededRng::new(client_seed, STREAM_REWARD_HEAD),
        )?;
        Ok(Self {
            config: cfg.clone(),
            backbone,
            lora,
            bottleneck,
            lm_head,
            reward_head,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        backbone: Arc<Backbone>,
        lora: LoraSet,
        bottleneck: Option<BottleneckAdapter>,
        lm_head: LmHead,
        reward_head: RewardHead,
    ) -> Self {
        Self {
            config,
            backbone,
            lora,
            bottleneck,
            lm_head,
            reward_head,
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn shared_backbone(&self) -> Arc<Backbone> {
        Arc::clone(&self.backbone)
    }

    pub fn backbone_checksum(&self) -> u64 {
        self.backbone.checksum()
    }

    pub fn lora_checksum(&self) -> u64 {
        self.lora.checksum()
    }

    /// Checksum over bottleneck adapter and both heads.
    pub fn personalized_checksum(&self) -> u64 {
        checksum(self.personalized_tensors())
    }

    pub fn personalized_tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        if let Some(b) = &self.bottleneck {
            out.extend(b.tensors());
        }
        out.extend(self.lm_head.tensors());
        out.extend(self.reward_head.tensors());
        out
    }

    /// Parameter tensors of the selected groups, in the same order as
    /// [`ModelGrads::tensors`].
    pub fn trainable_tensors_mut(&mut self, sel: Trainable) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        if sel.lora {
            out.extend(self.lora.tensors_mut());
        }
        if sel.bottleneck {
            if let Some(b) = &mut self.bottleneck {
                out.extend(b.tensors_mut());
            }
        }
        if sel.lm_head {
            out.extend(self.lm_head.tensors_mut());
        }
        if sel.reward_head {
            out.extend(self.reward_head.tensors_mut());
        }
        out
    }

    pub fn trainable_tensors(&self, sel: Trainable) -> Vec<&Matrix> {
        let mut out = Vec::new();
        if sel.lora {
            out.extend(self.lora.tensors());
        }
        if sel.bottleneck {
            if let Some(b) = &self.bottleneck {
                out.extend(b.tensors());
            }
        }
        if sel.lm_head {
            out.extend(self.lm_head.tensors());
        }
        if sel.reward_head {
            out.extend(self.reward_head.tensors());
        }
        out
    }

    fn sequence(&self, prompt: &[u32], response: &[u32]) -> Result<(Vec<u32>, usize)> {
        if response.is_empty() {
            return Err(Error::Input("empty response".into()));
        }
        let mut tokens = Vec::with_capacity(1 + prompt.len() + response.len());
        tokens.push(self.config.backbone.bos_token);
        tokens.extend_from_slice(prompt);
        let start = tokens.len();
        tokens.extend_from_slice(response);
        self.backbone.check_tokens(&tokens)?;
        Ok((tokens, start))
    }

    /// Hidden states `z'` of the LoRA-adapted backbone, one per token.
    pub fn backbone_forward(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        Ok(self.backbone.forward(&self.lora, tokens)?.output)
    }

    /// Full traced pass. `masks = None` is eval mode.
    pub fn forward_pass(
        &self,
        prompt: &[u32],
        response: &[u32],
        masks: Option<&DropoutMasks>,
        with_reward: bool,
    ) -> Result<SequencePass> {
        let (tokens, response_start) = self.sequence(prompt, response)?;
        let backbone = self.backbone.forward(&self.lora, &tokens)?;
        let mut bottleneck = Vec::with_capacity(tokens.len());
        let mut z = Vec::with_capacity(tokens.len());
        for (t, zp) in backbone.output.iter().enumerate() {
            match &self.bottleneck {
                Some(ad) => {
                    let mask = masks.and_then(|m| m.bottleneck.get(t)).map(Vec::as_slice);
                    let (zt, tr) = ad.forward_traced(zp, mask)?;
                    z.push(zt);
                    bottleneck.push(Some(tr));
                }
                None => {
                    z.push(zp.clone());
                    bottleneck.push(None);
                }
            }
        }
        let mut logprob = 0.0;
        let mut lm_probs = Vec::with_capacity(response.len());
        for j in response_start..tokens.len() {
            let (lp, probs) = self.lm_head.token_logprob(&z[j - 1], tokens[j])?;
            logprob += lp;
            lm_probs.push(probs);
        }
        let mut pass = SequencePass {
            tokens,
            response_start,
            backbone,
            bottleneck,
            z,
            lm_probs,
            logprob,
            reward: None,
        };
        if with_reward {
            let span = pass.pool_span(self.config.heads.pool_prompt);
            if span.is_empty() {
                return Err(Error::Input("empty pooled span".into()));
            }
            let d = self.config.backbone.hidden_dim;
            let mut pooled = vec![0.0; d];
            for t in span.clone() {
                for (p, v) in pooled.iter_mut().zip(&pass.z[t]) {
                    *p += v;
                }
            }
            let n = span.len() as f64;
            pooled.iter_mut().for_each(|p| *p /= n);
            let mask = masks.map(|m| m.reward.as_slice());
            pass.reward = Some(self.reward_head.score_traced(&pooled, mask)?);
        }
        Ok(pass)
    }

    /// Accumulates into `grads` the gradient of
    /// `d_logprob · logprob + d_reward · reward` for the groups present in `grads`.
    pub fn backward(
        &self,
        pass: &SequencePass,
        d_logprob: f64,
        d_reward: f64,
        grads: &mut ModelGrads,
    ) -> Result<()> {
        let d = self.config.backbone.hidden_dim;
        let len = pass.tokens.len();
        let mut dz = vec![vec![0.0; d]; len];
        for (k, j) in (pass.response_start..len).enumerate() {
            let dzj = self.lm_head.backward(
                &pass.z[j - 1],
                &pass.lm_probs[k],
                pass.tokens[j],
                d_logprob,
                grads.lm_head.as_mut(),
            );
            for (a, b) in dz[j - 1].iter_mut().zip(dzj) {
                *a += b;
            }
        }
        if let Some((_, trace)) = &pass.reward {
            let span = pass.pool_span(self.config.heads.pool_prompt);
            let n = span.len() as f64;
            let d_pooled = self
                .reward_head
                .backward(trace, d_reward, grads.reward_head.as_mut());
            for t in span {
                for (a, b) in dz[t].iter_mut().zip(&d_pooled) {
                    *a += b / n;
                }
            }
        } else if grads.reward_head.is_some() && d_reward != 0.0 {
            return Err(Error::Contract("reward gradient requested without reward pass".into()));
        }

        if grads.bottleneck.is_none() && grads.lora.is_none() {
            return Ok(());
        }
        let dzp: Vec<Vec<f64>> = match &self.bottleneck {
            Some(ad) => dz
                .iter()
                .zip(&pass.bottleneck)
                .map(|(g, tr)| {
                    ad.backward(g, tr.as_ref().expect("bottleneck trace"), grads.bottleneck.as_mut())
                })
                .collect(),
            None => dz,
        };
        if let Some(lg) = grads.lora.as_mut() {
            self.backbone.backward(&self.lora, &pass.backbone, &dzp, lg);
        }
        Ok(())
    }

    pub fn reward_score(
        &self,
        prompt: &[u32],
        response: &[u32],
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<f64> {
        let masks = if training {
            Some(DropoutMasks::sample(self, rng)?)
        } else {
            None
        };
        let pass = self.forward_pass(prompt, response, masks.as_ref(), true)?;
        Ok(pass.reward().expect("reward requested"))
    }

    pub fn snapshot(&self) -> ReferenceSnapshot {
        ReferenceSnapshot {
            model: Arc::new(self.clone()),
        }
    }
}

impl Policy for ClientModel {
    fn sequence_logprob(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        Ok(self.forward_pass(prompt, response, None, false)?.logprob)
    }
}

/// Frozen copy of a model used as `π_ref`. Has no mutable API.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot {
    model: Arc<ClientModel>,
}

impl ReferenceSnapshot {
    pub fn model(&self) -> &ClientModel {
        &self.model
    }
}

impl Policy for ReferenceSnapshot {
    fn sequence_logprob(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        self.model.sequence_logprob(prompt, response)
    }
}

pub fn make_reference_snapshot(model: &ClientModel) -> ReferenceSnapshot {
    model.snapshot()
}
