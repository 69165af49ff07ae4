//! Analytic reference values: pilot collision probability, chi-squared
//! detection error probabilities, the admissible threshold interval and the
//! large-array SINR limit.

use statrs::function::gamma;

use crate::error::{Error, Result};
use crate::model::PilotBook;

/// Probability that at least two of `n` devices draw the same pilot out of
/// `4^tau_p` equiprobable Bernoulli sequences.
pub fn collision_probability(tau_p: u32, n: u64) -> f64 {
    let log2_books = 2.0 * tau_p as f64;
    if log2_books < 64.0 && n > 1u64 << (2 * tau_p) {
        return 1.0;
    }
    let books = log2_books.exp2();
    let log_free: f64 = (1..n).map(|k| (-(k as f64) / books).ln_1p()).sum();
    -log_free.exp_m1()
}

/// Regularised lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma::gamma_lr(a, x)
    }
}

/// Regularised upper incomplete gamma `Q(a, x) = 1 - P(a, x)`, evaluated
/// without cancellation in either tail.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma::gamma_ur(a, x)
    }
}

/// Miss and false-alarm probabilities of the energy test `||x||^2 > zeta` on
/// an `M`-antenna pseudo-data row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionErrorPrediction {
    pub pr_md: f64,
    pub pr_fa: f64,
    pub zeta: f64,
    /// `zeta / (beta + mu2)`.
    pub zeta_md: f64,
    /// `zeta / mu2`.
    pub zeta_fa: f64,
}

/// `2||x||^2/s` is chi-squared with `2M` degrees of freedom when each entry
/// has variance `s`, so `Pr^MD = P(M, zeta_md)` and `Pr^FA = Q(M, zeta_fa)`
/// with the thresholds normalised by the per-entry variance.
pub fn detection_error_probabilities(m: usize, zeta: f64, beta: f64, mu2: f64) -> Result<DetectionErrorPrediction> {
    if m == 0 || !(zeta > 0.0) || !(beta >= 0.0) || !(mu2 > 0.0) {
        return Err(Error::OutOfRange(format!("M={m}, zeta={zeta}, beta={beta}, mu2={mu2}")));
    }
    let zeta_md = zeta / (beta + mu2);
    let zeta_fa = zeta / mu2;
    let a = m as f64;
    Ok(DetectionErrorPrediction {
        pr_md: gamma_p(a, zeta_md),
        pr_fa: gamma_q(a, zeta_fa),
        zeta,
        zeta_md,
        zeta_fa,
    })
}

/// `(M mu2, M (beta + mu2))`: thresholds for which both error probabilities
/// vanish as `M` grows.
pub fn threshold_interval(m: usize, beta: f64, mu2: f64) -> (f64, f64) {
    let m = m as f64;
    (m * mu2, m * (beta + mu2))
}

/// Large-array SINR of MRC with LMMSE estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AsymptoticSinr {
    Bounded(f64),
    /// No interferer shares pilot energy with the device.
    InterferenceFree,
}

impl AsymptoticSinr {
    pub fn value(&self) -> f64 {
        match self {
            AsymptoticSinr::Bounded(v) => *v,
            AsymptoticSinr::InterferenceFree => f64::INFINITY,
        }
    }
}

/// `rho_k^2 beta_k^2 / sum_{k' != k} |phi_k^H phi_k'|^2 rho_k'^2 beta_k'^2`.
pub fn asymptotic_sinr(
    k: usize,
    active: &[usize],
    book: &PilotBook,
    powers: &[f64],
    betas: &[f64],
) -> Result<AsymptoticSinr> {
    if book.columns_per_device != 1 {
        return Err(Error::Shape("one pilot per device required".into()));
    }
    let n = book.n_devices();
    if k >= n || active.iter().any(|j| *j >= n) || powers.len() != n || betas.len() != n {
        return Err(Error::Shape("device index, powers or gains out of range".into()));
    }
    let den: f64 = active
        .iter()
        .filter(|&&j| j != k)
        .map(|&j| book.inner(k, j).norm_sqr() * (powers[j] * betas[j]).powi(2))
        .sum();
    if den == 0.0 {
        return Ok(AsymptoticSinr::InterferenceFree);
    }
    Ok(AsymptoticSinr::Bounded((powers[k] * betas[k]).powi(2) / den))
}
