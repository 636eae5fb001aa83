use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::backbone::LN_EPS;
use crate::numerics::{
    dropout_mask, gelu, gelu_grad, layer_norm_backward, layer_norm_traced, LayerNormTrace, Matrix,
    SeededRng,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckConfig {
    pub bottleneck_dim: usize,
    pub dropout_p: f64,
    /// `false` routes backbone features straight to the heads.
    pub enabled: bool,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            bottleneck_dim: 8,
            dropout_p: 0.0,
            enabled: true,
        }
    }
}

/// Residual bottleneck between the LoRA-adapted backbone and the heads:
/// `z = LayerNorm(z' + Decode(Dropout(GELU(Encode(z')))))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckAdapter {
    /// `k × d`
    pub w_enc: Matrix,
    pub b_enc: Matrix,
    /// `d × k`
    pub w_dec: Matrix,
    pub b_dec: Matrix,
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
    pub dropout_p: f64,
}

#[derive(Debug, Clone)]
pub struct BottleneckTrace {
    input: Vec<f64>,
    enc_pre: Vec<f64>,
    dropped: Vec<f64>,
    mask: Vec<f64>,
    ln: LayerNormTrace,
}

impl BottleneckAdapter {
    /// Encoder `N(0, 1/d)`, decoder `N(0, 0.01/k)` so the residual branch
    /// starts small, layer norm at identity affine.
    pub fn init(d: usize, cfg: &BottleneckConfig, rng: &mut SeededRng) -> Result<Self> {
        let k = cfg.bottleneck_dim;
        if k == 0 || d == 0 {
            return Err(Error::Config("bottleneck dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout_p) {
            return Err(Error::Config(format!("bottleneck dropout {}", cfg.dropout_p)));
        }
        Ok(Self {
            w_enc: Matrix::gaussian(k, d, 1.0 / (d as f64).sqrt(), rng),
            b_enc: Matrix::zeros(1, k),
            w_dec: Matrix::gaussian(d, k, 0.1 / (k as f64).sqrt(), rng),
            b_dec: Matrix::zeros(1, d),
            ln_gamma: Matrix::filled(1, d, 1.0),
            ln_beta: Matrix::zeros(1, d),
            dropout_p: cfg.dropout_p,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.w_enc.rows()
    }

    /// Forward for one hidden state, drawing a fresh dropout mask in training mode.
    pub fn forward(&self, zprime: &[f64], rng: &mut SeededRng, training: bool) -> Result<Vec<f64>> {
        let mask = dropout_mask(rng, self.bottleneck_dim(), self.dropout_p, training)?;
        self.forward_traced(zprime, Some(&mask)).map(|(z, _)| z)
    }

    /// Forward with an explicit mask; `None` is eval mode.
    pub fn forward_traced(
        &self,
        zprime: &[f64],
        mask: Option<&[f64]>,
    ) -> Result<(Vec<f64>, BottleneckTrace)> {
        if zprime.len() != self.dim() {
            return Err(Error::Contract(format!(
                "bottleneck expects dim {}, got {}",
                self.dim(),
                zprime.len()
            )));
        }
        let k = self.bottleneck_dim();
        let mask = mask.map_or_else(|| vec![1.0; k], <[f64]>::to_vec);
        if mask.len() != k {
            return Err(Error::Contract("bottleneck dropout mask length".into()));
        }
        let enc_pre: Vec<f64> = self
            .w_enc
            .matvec(zprime)
            .iter()
            .zip(self.b_enc.as_slice())
            .map(|(a, b)| a + b)
            .collect();
        let dropped: Vec<f64> = enc_pre.iter().zip(&mask).map(|(&h, m)| gelu(h) * m).collect();
        let residual: Vec<f64> = self
            .w_dec
            .matvec(&dropped)
            .iter()
            .zip(self.b_dec.as_slice())
            .zip(zprime)
            .map(|((f, b), z)| z + f + b)
            .collect();
        let (z, ln) = layer_norm_traced(
            &residual,
            self.ln_gamma.as_slice(),
            self.ln_beta.as_slice(),
            LN_EPS,
        )?;
        Ok((
            z,
            BottleneckTrace {
                input: zprime.to_vec(),
                enc_pre,
                dropped,
                mask,
                ln,
            },
        ))
    }

    /// Returns `∂L/∂z'`; accumulates parameter gradients into `grads` if given.
    pub fn backward(
        &self,
        dz: &[f64],
        trace: &BottleneckTrace,
        grads: Option<&mut BottleneckAdapter>,
    ) -> Vec<f64> {
        let mut grads = grads;
        let ds = match grads.as_deref_mut() {
            Some(g) => layer_norm_backward(
                dz,
                &trace.ln,
                self.ln_gamma.as_slice(),
                Some((g.ln_gamma.as_mut_slice(), g.ln_beta.as_mut_slice())),
            ),
            None => layer_norm_backward(dz, &trace.ln, self.ln_gamma.as_slice(), None),
        };
        let d_dropped = self.w_dec.matvec_t(&ds);
        let d_pre: Vec<f64> = d_dropped
            .iter()
            .zip(&trace.mask)
            .zip(&trace.enc_pre)
            .map(|((g, m), &h)| g * m * gelu_grad(h))
            .collect();
        if let Some(g) = grads {
            g.w_dec.add_outer(&ds, &trace.dropped, 1.0);
            for (b, v) in g.b_dec.as_mut_slice().iter_mut().zip(&ds) {
                *b += v;
            }
            g.w_enc.add_outer(&d_pre, &trace.input, 1.0);
            for (b, v) in g.b_enc.as_mut_slice().iter_mut().zip(&d_pre) {
                *b += v;
            }
        }
        let mut dzp = ds;
        for (a, b) in dzp.iter_mut().zip(self.w_enc.matvec_t(&d_pre)) {
            *a += b;
        }
        dzp
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            w_enc: z(&self.w_enc),
            b_enc: z(&self.b_enc),
            w_dec: z(&self.w_dec),
            b_dec: z(&self.b_dec),
            ln_gamma: z(&self.ln_gamma),
            ln_beta: z(&self.ln_beta),
            dropout_p: self.dropout_p,
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.w_enc,
            &self.b_enc,
            &self.w_dec,
            &self.b_dec,
            &self.ln_gamma,
            &self.ln_beta,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_enc,
            &mut self.b_enc,
            &mut self.w_dec,
            &mut self.b_dec,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, layer_norm};

    fn zeroed(d: usize) -> BottleneckAdapter {
        let mut rng = SeededRng::new(0, 0);
        let mut ad = BottleneckAdapter::init(d, &BottleneckConfig::default(), &mut rng).unwrap();
        for t in [&mut ad.w_enc, &mut ad.b_enc, &mut ad.w_dec, &mut ad.b_dec] {
            t.fill(0.0);
        }
        ad
    }

    #[test]
    fn zero_branch_reduces_to_layer_norm() {
        let ad = zeroed(2);
        let mut rng = SeededRng::new(0, 0);
        let z = ad.forward(&[1.0, -1.0], &mut rng, false).unwrap();
        let expected = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], LN_EPS).unwrap();
        assert_eq!(z, expected);
        assert!((z[0] - 1.0).abs() < 1e-4 && (z[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn dropout_zero_makes_train_equal_eval() {
        let mut rng = SeededRng::new(4, 0);
        let ad = BottleneckAdapter::init(6, &BottleneckConfig::default(), &mut rng).unwrap();
        let x = [0.3, -0.2, 1.0, 0.5, -1.5, 0.1];
        let a = ad.forward(&x, &mut rng, true).unwrap();
        let b = ad.forward(&x, &mut rng, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), x.len());
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let ad = zeroed(4);
        let mut rng = SeededRng::new(0, 0);
        assert!(matches!(
            ad.forward(&[1.0, 2.0], &mut rng, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(9, 0);
        let mut ad = BottleneckAdapter::init(5, &BottleneckConfig::default(), &mut rng).unwrap();
        ad.w_dec = Matrix::gaussian(5, 8, 0.7, &mut rng);
        let w = [0.4, -1.0, 0.3, 0.8, -0.2];
        let x = [0.2, -0.4, 1.1, 0.0, 0.6];
        let (_, tr) = ad.forward_traced(&x, None).unwrap();
        let analytic = ad.backward(&w, &tr, None);
        let numeric = finite_diff_grad(
            |x: &[f64]| crate::numerics::dot(&ad.forward_traced(x, None).unwrap().0, &w),
            &x,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }
}
