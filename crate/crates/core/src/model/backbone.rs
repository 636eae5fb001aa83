//! Tiny pre-LN causal transformer with frozen random weights.
//!
//! Forward passes record a [`BackboneTrace`]; the backward pass only ever
//! produces gradients for LoRA factors, never for the frozen weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::lora::{LoraAdapter, LoraSet, LoraTarget};
use crate::numerics::{
    checksum, gelu, gelu_grad, layer_norm_backward, layer_norm_traced, LayerNormTrace, Matrix,
    SeededRng,
};

pub(crate) const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Token prepended to every scored sequence.
    pub bos_token: u32,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 24,
            bos_token: 0,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.bos_token as usize >= self.vocab_size {
            return Err(Error::Config(format!(
                "bos_token {} outside vocab of {}",
                self.bos_token, self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneLayer {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub w_qkv: Matrix,
    pub b_qkv: Matrix,
    pub w_attn_out: Matrix,
    pub b_attn_out: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub w_fc: Matrix,
    pub b_fc: Matrix,
    pub w_mlp_out: Matrix,
    pub b_mlp_out: Matrix,
}

impl BackboneLayer {
    fn init(d: usize, rng: &mut SeededRng) -> Self {
        let h = MLP_RATIO * d;
        let s_d = 1.0 / (d as f64).sqrt();
        let s_h = 1.0 / (h as f64).sqrt();
        Self {
            ln1_gamma: Matrix::filled(1, d, 1.0),
            ln1_beta: Matrix::zeros(1, d),
            w_qkv: Matrix::gaussian(3 * d, d, s_d, rng),
            b_qkv: Matrix::zeros(1, 3 * d),
            w_attn_out: Matrix::gaussian(d, d, s_d, rng),
            b_attn_out: Matrix::zeros(1, d),
            ln2_gamma: Matrix::filled(1, d, 1.0),
            ln2_beta: Matrix::zeros(1, d),
            w_fc: Matrix::gaussian(h, d, s_d, rng),
            b_fc: Matrix::zeros(1, h),
            w_mlp_out: Matrix::gaussian(d, h, s_h, rng),
            b_mlp_out: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Matrix; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_attn_out,
            &self.b_attn_out,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_fc,
            &self.b_fc,
            &self.w_mlp_out,
            &self.b_mlp_out,
        ]
    }

    fn projection(&self, target: LoraTarget) -> (&Matrix, &Matrix) {
        match target {
            LoraTarget::AttnQkv => (&self.w_qkv, &self.b_qkv),
            LoraTarget::AttnOut => (&self.w_attn_out, &self.b_attn_out),
            LoraTarget::MlpFc => (&self.w_fc, &self.b_fc),
            LoraTarget::MlpOut => (&self.w_mlp_out, &self.b_mlp_out),
        }
    }
}

/// Frozen backbone weights `W0`. Shared between clients behind an `Arc` and
/// never handed out mutably.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<BackboneLayer>,
    pub lnf_gamma: Matrix,
    pub lnf_beta: Matrix,
}

/// One projection input plus the LoRA bottleneck `A x` when an adapter is attached.
#[derive(Debug, Clone)]
struct LinearTrace {
    input: Vec<f64>,
    low_rank: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    ln1: Vec<LayerNormTrace>,
    qkv_in: Vec<LinearTrace>,
    qkv: Vec<Vec<f64>>,
    /// `[head][query][key ≤ query]`
    probs: Vec<Vec<Vec<f64>>>,
    attn_out_in: Vec<LinearTrace>,
    ln2: Vec<LayerNormTrace>,
    fc_in: Vec<LinearTrace>,
    fc_pre: Vec<Vec<f64>>,
    mlp_out_in: Vec<LinearTrace>,
}

/// Activations from one backbone forward, enough to backprop into LoRA.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    layers: Vec<LayerTrace>,
    lnf: Vec<LayerNormTrace>,
    /// Final hidden states `z'`, one row per position.
    pub output: Vec<Vec<f64>>,
}

fn lora_for(lora: &LoraSet, layer: usize, target: LoraTarget) -> Option<&LoraAdapter> {
    lora.get(layer, target)
}

fn linear_forward(
    w: &Matrix,
    b: &Matrix,
    adapter: Option<&LoraAdapter>,
    x: &[f64],
) -> (Vec<f64>, LinearTrace) {
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b.as_slice()) {
        *yi += bi;
    }
    let low_rank = adapter.map(|ad| {
        let u = ad.a.matvec(x);
        let s = ad.scaling();
        for (yi, di) in y.iter_mut().zip(ad.b.matvec(&u)) {
            *yi += s * di;
        }
        u
    });
    (
        y,
        LinearTrace {
            input: x.to_vec(),
            low_rank,
        },
    )
}

fn linear_backward(
    w: &Matrix,
    adapter: Option<&LoraAdapter>,
    trace: &LinearTrace,
    dy: &[f64],
    grad: Option<&mut LoraAdapter>,
) -> Vec<f64> {
    let mut dx = w.matvec_t(dy);
    if let Some(ad) = adapter {
        let s = ad.scaling();
        let bt_dy = ad.b.matvec_t(dy);
        for (dxi, v) in dx.iter_mut().zip(ad.a.matvec_t(&bt_dy)) {
            *dxi += s * v;
        }
        if let Some(g) = grad {
            let u = trace.low_rank.as_deref().expect("LoRA trace recorded");
            g.b.add_outer(dy, u, s);
            g.a.add_outer(&bt_dy, &trace.input, s);
        }
    }
    dx
}

impl Backbone {
    /// Weights `N(0, 1/fan_in)`, layer-norm gains one, biases zero.
    pub fn init(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut rng = SeededRng::new(config.seed, crate::model::STREAM_BACKBONE);
        let scale = 1.0 / (d as f64).sqrt();
        let token_embedding = Matrix::gaussian(config.vocab_size, d, scale, &mut rng);
        let position_embedding = Matrix::gaussian(config.max_seq_len, d, scale, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| BackboneLayer::init(d, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            lnf_gamma: Matrix::filled(1, d, 1.0),
            lnf_beta: Matrix::zeros(1, d),
        })
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.lnf_gamma);
        out.push(&self.lnf_beta);
        out
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.tensors())
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Effective projection `W0 + (alpha/r)·B·A` for one target, densely.
    pub fn effective_weight(&self, lora: &LoraSet, layer: usize, target: LoraTarget) -> Matrix {
        let (w, _) = self.layers[layer].projection(target);
        let mut w = w.clone();
        if let Some(ad) = lora.get(layer, target) {
            w.add_scaled(&ad.delta(), 1.0).expect("adapter matches projection");
        }
        w
    }

    pub fn forward(&self, lora: &LoraSet, tokens: &[u32]) -> Result<BackboneTrace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let n_heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let att_scale = 1.0 / (hd as f64).sqrt();
        let len = tokens.len();

        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                self.token_embedding
                    .row_slice(tok as usize)
                    .iter()
                    .zip(self.position_embedding.row_slice(t))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();

        let mut layer_traces = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let qkv_ad = lora_for(lora, li, LoraTarget::AttnQkv);
            let out_ad = lora_for(lora, li, LoraTarget::AttnOut);
            let fc_ad = lora_for(lora, li, LoraTarget::MlpFc);
            let proj_ad = lora_for(lora, li, LoraTarget::MlpOut);

            let mut ln1 = Vec::with_capacity(len);
            let mut qkv_in = Vec::with_capacity(len);
            let mut qkv = Vec::with_capacity(len);
            for xt in &x {
                let (a, tr) = layer_norm_traced(
                    xt,
                    layer.ln1_gamma.as_slice(),
                    layer.ln1_beta.as_slice(),
                    LN_EPS,
                )?;
                let (q, lt) = linear_forward(&layer.w_qkv, &layer.b_qkv, qkv_ad, &a);
                ln1.push(tr);
                qkv_in.push(lt);
                qkv.push(q);
            }

            let mut probs = vec![Vec::with_capacity(len); n_heads];
            let mut attn_y = vec![vec![0.0; d]; len];
            for (h, head_probs) in probs.iter_mut().enumerate() {
                let qo = h * hd;
                let ko = d + h * hd;
                let vo = 2 * d + h * hd;
                for i in 0..len {
                    let qi = &qkv[i][qo..qo + hd];
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| att_scale * crate::numerics::dot(qi, &qkv[j][ko..ko + hd]))
                        .collect();
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
                    for (j, pj) in p.iter().enumerate() {
                        for c in 0..hd {
                            attn_y[i][qo + c] += pj * qkv[j][vo + c];
                        }
                    }
                    head_probs.push(p);
                }
            }

            let mut attn_out_in = Vec::with_capacity(len);
            for (xt, y) in x.iter_mut().zip(&attn_y) {
                let (o, lt) = linear_forward(&layer.w_attn_out, &layer.b_attn_out, out_ad, y);
                for (xi, oi) in xt.iter_mut().zip(o) {
                    *xi += oi;
                }
                attn_out_in.push(lt);
            }

            let mut ln2 = Vec::with_capacity(len);
            let mut fc_in = Vec::with_capacity(len);
            let mut fc_pre = Vec::with_capacity(len);
            let mut mlp_out_in = Vec::with_capacity(len);
            for xt in x.iter_mut() {
                let (a, tr) = layer_norm_traced(
                    xt,
                    layer.ln2_gamma.as_slice(),
                    layer.ln2_beta.as_slice(),
                    LN_EPS,
                )?;
                let (h, lt_fc) = linear_forward(&layer.w_fc, &layer.b_fc, fc_ad, &a);
                let g: Vec<f64> = h.iter().map(|&v| gelu(v)).collect();
                let (m, lt_proj) = linear_forward(&layer.w_mlp_out, &layer.b_mlp_out, proj_ad, &g);
                for (xi, mi) in xt.iter_mut().zip(m) {
                    *xi += mi;
                }
                ln2.push(tr);
                fc_in.push(lt_fc);
                fc_pre.push(h);
                mlp_out_in.push(lt_proj);
            }

            layer_traces.push(LayerTrace {
                ln1,
                qkv_in,
                qkv,
                probs,
                attn_out_in,
                ln2,
                fc_in,
                fc_pre,
                mlp_out_in,
            });
        }

        let mut lnf = Vec::with_capacity(len);
        let mut output = Vec::with_capacity(len);
        for xt in &x {
            let (z, tr) =
                layer_norm_traced(xt, self.lnf_gamma.as_slice(), self.lnf_beta.as_slice(), LN_EPS)?;
            lnf.push(tr);
            output.push(z);
        }
        Ok(BackboneTrace {
            layers: layer_traces,
            lnf,
            output,
        })
    }

    /// Accumulates `∂L/∂(A, B)` into `grads` given `∂L/∂z'` per position.
    // Several per-position traces are indexed in lockstep.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(
        &self,
        lora: &LoraSet,
        trace: &BackboneTrace,
        d_output: &[Vec<f64>],
        grads: &mut LoraSet,
    ) {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let hd = cfg.head_dim();
        let att_scale = 1.0 / (hd as f64).sqrt();
        let len = d_output.len();

        let mut dx: Vec<Vec<f64>> = d_output
            .iter()
            .zip(&trace.lnf)
            .map(|(dz, tr)| layer_norm_backward(dz, tr, self.lnf_gamma.as_slice(), None))
            .collect();

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let lt = &trace.layers[li];
            let idx = |t: LoraTarget| lora.index_of(li, t);
            let qkv_i = idx(LoraTarget::AttnQkv);
            let out_i = idx(LoraTarget::AttnOut);
            let fc_i = idx(LoraTarget::MlpFc);
            let proj_i = idx(LoraTarget::MlpOut);
            let ad = |i: Option<usize>| i.map(|i| &lora.adapters[i]);

            // MLP block
            for t in 0..len {
                let dm = dx[t].clone();
                let dg = linear_backward(
                    &layer.w_mlp_out,
                    ad(proj_i),
                    &lt.mlp_out_in[t],
                    &dm,
                    proj_i.map(|i| &mut grads.adapters[i]),
                );
                let dh: Vec<f64> = dg
                    .iter()
                    .zip(&lt.fc_pre[t])
                    .map(|(g, &h)| g * gelu_grad(h))
                    .collect();
                let da = linear_backward(
                    &layer.w_fc,
                    ad(fc_i),
                    &lt.fc_in[t],
                    &dh,
                    fc_i.map(|i| &mut grads.adapters[i]),
                );
                let dres = layer_norm_backward(&da, &lt.ln2[t], layer.ln2_gamma.as_slice(), None);
                for (a, b) in dx[t].iter_mut().zip(dres) {
                    *a += b;
                }
            }

            // Attention block
            let mut d_attn_y = Vec::with_capacity(len);
            for t in 0..len {
                d_attn_y.push(linear_backward(
                    &layer.w_attn_out,
                    ad(out_i),
                    &lt.attn_out_in[t],
                    &dx[t],
                    out_i.map(|i| &mut grads.adapters[i]),
                ));
            }
            let mut dqkv = vec![vec![0.0; 3 * d]; len];
            for h in 0..cfg.n_heads {
                let qo = h * hd;
                let ko = d + h * hd;
                let vo = 2 * d + h * hd;
                for i in 0..len {
                    let p = &lt.probs[h][i];
                    let dy = &d_attn_y[i][qo..qo + hd];
                    let mut dp = vec![0.0; i + 1];
                    for j in 0..=i {
                        let vj = &lt.qkv[j][vo..vo + hd];
                        dp[j] = crate::numerics::dot(dy, vj);
                        for c in 0..hd {
                            dqkv[j][vo + c] += p[j] * dy[c];
                        }
                    }
                    let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - pdp) * att_scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..hd {
                            dqkv[i][qo + c] += ds * lt.qkv[j][ko + c];
                            dqkv[j][ko + c] += ds * lt.qkv[i][qo + c];
                        }
                    }
                }
            }
            for t in 0..len {
                let da = linear_backward(
                    &layer.w_qkv,
                    ad(qkv_i),
                    &lt.qkv_in[t],
                    &dqkv[t],
                    qkv_i.map(|i| &mut grads.adapters[i]),
                );
                let dres = layer_norm_backward(&da, &lt.ln1[t], layer.ln1_gamma.as_slice(), None);
                for (a, b) in dx[t].iter_mut().zip(dres) {
                    *a += b;
                }
            }
        }
    }
}
