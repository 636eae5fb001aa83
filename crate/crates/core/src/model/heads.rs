use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub reward_hidden: usize,
    pub reward_dropout_p: f64,
    /// Pool the prompt positions too when scoring; default pools the response only.
    pub pool_prompt: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            reward_hidden: 8,
            reward_dropout_p: 0.0,
            pool_prompt: false,
        }
    }
}

/// Personalized token head: `logits = W z + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmHead {
    /// `vocab × d`
    pub w: Matrix,
    pub b: Matrix,
}

impl LmHead {
    pub fn init(d: usize, vocab: usize, rng: &mut SeededRng) -> Self {
        Self {
            w: Matrix::gaussian(vocab, d, 1.0 / (d as f64).sqrt(), rng),
            b: Matrix::zeros(1, vocab),
        }
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        let mut l = self.w.matvec(z);
        for (a, b) in l.iter_mut().zip(self.b.as_slice()) {
            *a += b;
        }
        l
    }

    /// `log p(token | z)` and the softmax probabilities for the backward.
    pub fn token_logprob(&self, z: &[f64], token: u32) -> Result<(f64, Vec<f64>)> {
        let lp = log_softmax(&self.logits(z))?;
        let value = lp[token as usize];
        Ok((value, lp.into_iter().map(f64::exp).collect()))
    }

    /// Backward of `coeff · log p(token | z)`; returns `∂/∂z`.
    pub fn backward(
        &self,
        z: &[f64],
        probs: &[f64],
        token: u32,
        coeff: f64,
        grads: Option<&mut LmHead>,
    ) -> Vec<f64> {
        let mut dlogits: Vec<f64> = probs.iter().map(|p| -coeff * p).collect();
        dlogits[token as usize] += coeff;
        if let Some(g) = grads {
            g.w.add_outer(&dlogits, z, 1.0);
            for (b, v) in g.b.as_mut_slice().iter_mut().zip(&dlogits) {
                *b += v;
            }
        }
        self.w.matvec_t(&dlogits)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: Matrix::zeros(1, self.b.cols()),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Scalar preference score on a pooled feature:
/// `W2 · tanh(Dropout(W1 z̄ + b1)) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardHead {
    /// `hidden × d`
    pub w1: Matrix,
    pub b1: Matrix,
    /// `1 × hidden`
    pub w2: Matrix,
    /// `1 × 1`
    pub b2: Matrix,
    pub dropout_p: f64,
}

#[derive(Debug, Clone)]
pub struct RewardTrace {
    pooled: Vec<f64>,
    activated: Vec<f64>,
    mask: Vec<f64>,
}

impl RewardHead {
    pub fn init(d: usize, cfg: &HeadConfig, rng: &mut SeededRng) -> Result<Self> {
        let h = cfg.reward_hidden;
        if h == 0 {
            return Err(Error::Config("reward_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.reward_dropout_p) {
            return Err(Error::Config(format!("reward dropout {}", cfg.reward_dropout_p)));
        }
        Ok(Self {
            w1: Matrix::gaussian(h, d, 1.0 / (d as f64).sqrt(), rng),
            b1: Matrix::zeros(1, h),
            w2: Matrix::gaussian(1, h, 1.0 / (h as f64).sqrt(), rng),
            b2: Matrix::zeros(1, 1),
            dropout_p: cfg.reward_dropout_p,
        })
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn score_traced(&self, pooled: &[f64], mask: Option<&[f64]>) -> Result<(f64, RewardTrace)> {
        if pooled.len() != self.w1.cols() {
            return Err(Error::Contract(format!(
                "reward head expects dim {}, got {}",
                self.w1.cols(),
                pooled.len()
            )));
        }
        let mask = mask.map_or_else(|| vec![1.0; self.hidden()], <[f64]>::to_vec);
        let activated: Vec<f64> = self
            .w1
            .matvec(pooled)
            .iter()
            .zip(self.b1.as_slice())
            .zip(&mask)
            .map(|((a, b), m)| ((a + b) * m).tanh())
            .collect();
        let score = crate::numerics::dot(self.w2.row_slice(0), &activated) + self.b2.get(0, 0);
        Ok((
            score,
            RewardTrace {
                pooled: pooled.to_vec(),
                activated,
                mask,
            },
        ))
    }

    /// Backward of `coeff · score`; returns `∂/∂z̄`.
    pub fn backward(&self, trace: &RewardTrace, coeff: f64, grads: Option<&mut RewardHead>) -> Vec<f64> {
        let d_pre: Vec<f64> = self
            .w2
            .row_slice(0)
            .iter()
            .zip(&trace.activated)
            .zip(&trace.mask)
            .map(|((w, t), m)| coeff * w * (1.0 - t * t) * m)
            .collect();
        if let Some(g) = grads {
            for (gw, t) in g.w2.as_mut_slice().iter_mut().zip(&trace.activated) {
                *gw += coeff * t;
            }
            g.b2.as_mut_slice()[0] += coeff;
            g.w1.add_outer(&d_pre, &trace.pooled, 1.0);
            for (b, v) in g.b1.as_mut_slice().iter_mut().zip(&d_pre) {
                *b += v;
            }
        }
        self.w1.matvec_t(&d_pre)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
            dropout_p: self.dropout_p,
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_mlp_by_hand() {
        let mut rng = SeededRng::new(0, 0);
        let mut head = RewardHead::init(2, &HeadConfig { reward_hidden: 2, ..Default::default() }, &mut rng).unwrap();
        head.w1 = Matrix::identity(2);
        head.b1.fill(0.0);
        head.w2 = Matrix::row(vec![1.0, 1.0]);
        head.b2.fill(0.0);
        let (s, _) = head.score_traced(&[2.0, 4.0], None).unwrap();
        // tanh(2) + tanh(4) = 1.96335687981488392773... (mpmath, 30 digits)
        assert!((s - 1.963_356_879_814_884).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_score_is_bias() {
        let mut rng = SeededRng::new(0, 0);
        let mut head = RewardHead::init(3, &HeadConfig::default(), &mut rng).unwrap();
        for t in head.tensors_mut() {
            t.fill(0.0);
        }
        head.b2.set(0, 0, 0.7);
        assert_eq!(head.score_traced(&[1.0, 2.0, 3.0], None).unwrap().0, 0.7);
    }

    #[test]
    fn lm_head_two_token_logprob() {
        let head = LmHead {
            w: Matrix::zeros(2, 1),
            b: Matrix::row(vec![0.0, 1.0]),
        };
        let (lp, probs) = head.token_logprob(&[0.0], 1).unwrap();
        assert!((lp + 0.313_261_687_518_223).abs() < 1e-12);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
