//! Monte Carlo checks of the Gumbel–Bradley–Terry identities.
//!
//! If `R_w ~ Gumbel(r_w, 1)` and `R_l ~ Gumbel(r_l, 1)` are independent, then
//! `Pr(R_w − R_l + c > 0) = σ(r_w − r_l + c)` for every shift `c`, because
//! `R_w − R_l` is logistic with location `r_w − r_l`. Each check compares an
//! empirical frequency with the closed form and passes when they agree within
//! four binomial standard errors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_gumbel, sigmoid, SeededRng};

pub const MIN_SAMPLES: usize = 10_000;
pub const TOLERANCE_SIGMAS: f64 = 4.0;

/// Explicit margins of the first grid (no shift).
pub const PREFERENCE_DELTAS: [f64; 5] = [-3.0, -1.0, 0.0, 0.5, 2.0];
pub const SHIFTED_DELTAS: [f64; 3] = [-1.0, 0.0, 1.0];
pub const SHIFTED_SHIFTS: [f64; 3] = [-2.0, 0.0, 2.0];
/// CDF evaluation points relative to the location of `D`.
pub const CDF_OFFSETS: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub delta_er: f64,
    pub shift: f64,
    pub n_samples: usize,
    pub empirical_p: f64,
    pub analytic_p: f64,
    pub std_err: f64,
    pub pass: bool,
}

impl McReport {
    fn new(delta_er: f64, shift: f64, n: usize, hits: usize, analytic_p: f64) -> Self {
        let empirical_p = hits as f64 / n as f64;
        let std_err = (analytic_p * (1.0 - analytic_p) / n as f64).sqrt();
        Self {
            delta_er,
            shift,
            n_samples: n,
            empirical_p,
            analytic_p,
            std_err,
            pass: (empirical_p - analytic_p).abs() <= TOLERANCE_SIGMAS * std_err,
        }
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::Contract(format!("Monte Carlo needs n >= {MIN_SAMPLES}, got {n}")));
    }
    Ok(())
}

/// Number of draws with `R_w − R_l + c > 0`.
pub fn count_preferences(r_w: f64, r_l: f64, c: f64, n: usize, rng: &mut SeededRng) -> usize {
    (0..n)
        .filter(|_| {
            let w = sample_gumbel(rng, r_w);
            let l = sample_gumbel(rng, r_l);
            w - l + c > 0.0
        })
        .count()
}

pub fn mc_gumbel_preference(r_w: f64, r_l: f64, c: f64, n: usize, rng: &mut SeededRng) -> Result<McReport> {
    check_n(n)?;
    let hits = count_preferences(r_w, r_l, c, n, rng);
    Ok(McReport::new(r_w - r_l, c, n, hits, sigmoid(r_w - r_l + c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub z: f64,
    pub empirical: f64,
    pub analytic: f64,
    pub std_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticReport {
    pub delta: f64,
    pub n_samples: usize,
    pub points: Vec<CdfPoint>,
    pub pass: bool,
}

/// Samples `D = R_w − R_l` with location `delta` and compares its empirical
/// CDF with `σ(z − delta)` at each of `points`.
pub fn logistic_difference_check_at(
    delta: f64,
    points: &[f64],
    n: usize,
    rng: &mut SeededRng,
) -> Result<LogisticReport> {
    check_n(n)?;
    let draws: Vec<f64> = (0..n)
        .map(|_| sample_gumbel(rng, delta) - sample_gumbel(rng, 0.0))
        .collect();
    let points: Vec<CdfPoint> = points
        .iter()
        .map(|&z| {
            let empirical = draws.iter().filter(|&&d| d <= z).count() as f64 / n as f64;
            let analytic = sigmoid(z - delta);
            let std_err = (analytic * (1.0 - analytic) / n as f64).sqrt();
            CdfPoint {
                z,
                empirical,
                analytic,
                std_err,
                pass: (empirical - analytic).abs() <= TOLERANCE_SIGMAS * std_err,
            }
        })
        .collect();
    Ok(LogisticReport {
        delta,
        n_samples: n,
        pass: points.iter().all(|p| p.pass),
        points,
    })
}

/// CDF check at `delta + {−2, −1, 0, 1, 2}`.
pub fn logistic_difference_check(delta: f64, n: usize, rng: &mut SeededRng) -> Result<LogisticReport> {
    let points: Vec<f64> = CDF_OFFSETS.iter().map(|o| delta + o).collect();
    logistic_difference_check_at(delta, &points, n, rng)
}

/// One report per `Δ_er` at `c = 0`; cell `i` uses stream `i`.
pub fn preference_grid(n: usize, seed: u64) -> Result<Vec<McReport>> {
    PREFERENCE_DELTAS
        .par_iter()
        .enumerate()
        .map(|(i, &d)| mc_gumbel_preference(d, 0.0, 0.0, n, &mut SeededRng::new(seed, 0x71_0000 + i as u64)))
        .collect()
}

/// The 3 × 3 grid of `(Δ_er, c)`.
pub fn shifted_preference_grid(n: usize, seed: u64) -> Result<Vec<McReport>> {
    let cells: Vec<(f64, f64)> = SHIFTED_DELTAS
        .iter()
        .flat_map(|&d| SHIFTED_SHIFTS.iter().map(move |&c| (d, c)))
        .collect();
    cells
        .par_iter()
        .enumerate()
        .map(|(i, &(d, c))| mc_gumbel_preference(d, 0.0, c, n, &mut SeededRng::new(seed, 0x72_0000 + i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub n_samples: usize,
    pub seed: u64,
    pub preference: Vec<McReport>,
    pub shifted: Vec<McReport>,
    pub logistic: Vec<LogisticReport>,
    pub pass: bool,
}

/// Both grids plus logistic CDF checks at `delta ∈ {0, 2}`.
pub fn verify_theorems(n: usize, seed: u64) -> Result<TheoryReport> {
    let preference = preference_grid(n, seed)?;
    let shifted = shifted_preference_grid(n, seed)?;
    let logistic = [0.0, 2.0]
        .par_iter()
        .enumerate()
        .map(|(i, &d)| logistic_difference_check(d, n, &mut SeededRng::new(seed, 0x73_0000 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let pass = preference.iter().chain(&shifted).all(|r| r.pass) && logistic.iter().all(|r| r.pass);
    Ok(TheoryReport {
        n_samples: n,
        seed,
        preference,
        shifted,
        logistic,
        pass,
    })
}
