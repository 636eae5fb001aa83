//! Dense linear algebra, stable scalar functions, seeded randomness and a
//! central-difference gradient oracle. Everything is `f64`.

mod matrix;
mod rng;

pub use matrix::{checksum, dot, Matrix};
pub use rng::SeededRng;

use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Clamp applied to uniforms before the double log in Gumbel sampling.
pub const GUMBEL_UNIFORM_CLAMP: f64 = 1e-15;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` via the branch-stable form.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Checked entry point for the scalar nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Sigmoid,
    LogSigmoid,
    Tanh,
    Gelu,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::Domain(format!("{self:?} of non-finite {x}")));
        }
        Ok(match self {
            Nonlinearity::Sigmoid => sigmoid(x),
            Nonlinearity::LogSigmoid => log_sigmoid(x),
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Gelu => gelu(x),
        })
    }
}

pub fn log_softmax(row: &[f64]) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(Error::Domain("log_softmax of empty row".into()));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("log_softmax of non-finite entry".into()));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(row.iter().map(|v| v - max - lse).collect())
}

/// Intermediate values kept from a layer-norm forward for its backward.
#[derive(Debug, Clone)]
pub struct LayerNormTrace {
    pub normalized: Vec<f64>,
    pub rstd: f64,
}

pub fn layer_norm(z: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    layer_norm_traced(z, gamma, beta, eps).map(|(out, _)| out)
}

/// Population-variance layer norm, returning the trace for backprop.
pub fn layer_norm_traced(
    z: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, LayerNormTrace)> {
    if z.len() != gamma.len() || z.len() != beta.len() {
        return Err(Error::Contract(format!(
            "layer_norm dims z={} gamma={} beta={}",
            z.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if z.is_empty() || eps <= 0.0 {
        return Err(Error::Contract("layer_norm needs non-empty input and eps > 0".into()));
    }
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    let normalized: Vec<f64> = z.iter().map(|v| (v - mean) * rstd).collect();
    let out = normalized
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(x, (g, b))| g * x + b)
        .collect();
    Ok((out, LayerNormTrace { normalized, rstd }))
}

/// Backward of [`layer_norm_traced`]: returns `dz` and accumulates into
/// `dgamma`/`dbeta` when given.
pub fn layer_norm_backward(
    dout: &[f64],
    trace: &LayerNormTrace,
    gamma: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let n = dout.len() as f64;
    if let Some((dgamma, dbeta)) = grads {
        for i in 0..dout.len() {
            dgamma[i] += dout[i] * trace.normalized[i];
            dbeta[i] += dout[i];
        }
    }
    let dnorm: Vec<f64> = dout.iter().zip(gamma).map(|(d, g)| d * g).collect();
    let mean_d = dnorm.iter().sum::<f64>() / n;
    let mean_dx = dnorm
        .iter()
        .zip(&trace.normalized)
        .map(|(d, x)| d * x)
        .sum::<f64>()
        / n;
    dnorm
        .iter()
        .zip(&trace.normalized)
        .map(|(d, x)| trace.rstd * (d - mean_d - x * mean_dx))
        .collect()
}

/// One draw from `Gumbel(mu, 1)`.
pub fn sample_gumbel(rng: &mut SeededRng, mu: f64) -> f64 {
    let u = rng
        .uniform()
        .clamp(GUMBEL_UNIFORM_CLAMP, 1.0 - GUMBEL_UNIFORM_CLAMP);
    mu - (-u.ln()).ln()
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Contract(format!("finite difference step {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite objective around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Inverted-dropout mask: entries are `0` with probability `p`, else
/// `1/(1-p)`. Eval mode returns all ones.
pub fn dropout_mask(rng: &mut SeededRng, len: usize, p: f64, training: bool) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Contract(format!("dropout probability {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(log_sigmoid(0.0), -LN2);
        // 1/(1+e^-1) = 0.73105857863000487925... (high-precision reference)
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn no_overflow_at_extremes() {
        for x in [-700.0, -50.0, 50.0, 700.0] {
            assert!(sigmoid(x).is_finite());
            assert!(log_sigmoid(x).is_finite());
            assert!(gelu(x).is_finite());
        }
        assert!((log_sigmoid(-700.0) + 700.0).abs() < 1e-12);
    }

    #[test]
    fn checked_nonlinearity_rejects_nan() {
        assert!(matches!(
            Nonlinearity::Sigmoid.apply(f64::NAN),
            Err(Error::Domain(_))
        ));
        assert!(Nonlinearity::Tanh.apply(f64::INFINITY).is_err());
        assert_eq!(Nonlinearity::Tanh.apply(0.0).unwrap(), 0.0);
    }

    #[test]
    fn log_softmax_examples() {
        for row in [[0.0, 0.0], [1000.0, 1000.0]] {
            let out = log_softmax(&row).unwrap();
            assert!(out.iter().all(|v| (v + LN2).abs() < 1e-15));
        }
        // Direct evaluation: ln(1 + e) = 1.31326168751822...
        let out = log_softmax(&[0.0, 1.0]).unwrap();
        assert!((out[0] + 1.313_261_687_518_223).abs() < 1e-12);
        assert!((out[1] + 0.313_261_687_518_223).abs() < 1e-12);
        assert!(matches!(log_softmax(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);
        let out = layer_norm(&[3.5, 3.5], &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        let out = layer_norm(&[1.0, -1.0], &[2.0, 2.0], &[1.0, 1.0], 1e-12).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);
        assert!(matches!(
            layer_norm(&[1.0], &[1.0, 1.0], &[0.0], 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0, 0.7];
        let gamma = [1.5, 0.5, -0.7, 1.1];
        let beta = [0.1, 0.0, -0.2, 0.3];
        let w = [0.9, -0.4, 1.3, 0.2];
        let objective = |z: &[f64]| {
            let y = layer_norm(z, &gamma, &beta, 1e-5).unwrap();
            dot(&y, &w)
        };
        let (_, trace) = layer_norm_traced(&z, &gamma, &beta, 1e-5).unwrap();
        let analytic = layer_norm_backward(&w, &trace, &gamma, None);
        let numeric = finite_diff_grad(objective, &z, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for x in [-3.0, -0.5, 0.0, 0.8, 2.5] {
            let n = finite_diff_grad(|t: &[f64]| gelu(t[0]), &[x], 1e-5).unwrap()[0];
            assert!((gelu_grad(x) - n).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|t: &[f64]| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|t: &[f64]| log_sigmoid(t[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-6);
        let g = finite_diff_grad(|_: &[f64]| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let err = finite_diff_grad(|t: &[f64]| 1.0 / (t[0] - 1e-5), &[0.0], 1e-5);
        assert!(matches!(err, Err(Error::Oracle(_))));
    }

    #[test]
    fn gumbel_moments_and_cdf() {
        let mut rng = SeededRng::new(11, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut below_zero = 0usize;
        for _ in 0..n {
            let g = sample_gumbel(&mut rng, 0.0);
            sum += g;
            if g <= 0.0 {
                below_zero += 1;
            }
        }
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        assert!((sum / n as f64 - EULER_GAMMA).abs() < 0.01);
        let frac = below_zero as f64 / n as f64;
        assert!((frac - (-1.0f64).exp()).abs() < 0.005);
    }

    #[test]
    fn gumbel_location_shift_is_exact_per_sample() {
        let mut a = SeededRng::new(3, 9);
        let mut b = SeededRng::new(3, 9);
        for _ in 0..1000 {
            let x = sample_gumbel(&mut a, 2.0);
            let y = sample_gumbel(&mut b, 0.0);
            assert!((x - y - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_contract() {
        let mut rng = SeededRng::new(0, 0);
        assert_eq!(dropout_mask(&mut rng, 5, 0.0, true).unwrap(), vec![1.0; 5]);
        assert_eq!(dropout_mask(&mut rng, 5, 0.7, false).unwrap(), vec![1.0; 5]);
        assert!(matches!(dropout_mask(&mut rng, 5, 1.0, true), Err(Error::Contract(_))));
        let mask = dropout_mask(&mut rng, 1_000_000, 0.5, true).unwrap();
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn log_softmax_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 1..12), c in -500.0f64..500.0) {
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let a = log_softmax(&row).unwrap();
            let b = log_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            let total: f64 = a.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sigmoid_identities(x in -30.0f64..30.0) {
            prop_assert!((log_sigmoid(x).exp() - sigmoid(x)).abs() < 1e-12);
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
            let s = sigmoid(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
