//! Non-coherent signalling: each device owns `2^r` pilots and conveys `r`
//! bits through the one it sends. The modified AMP (M-AMP) gates the MMSE
//! denoiser of each pilot with a sigmoid of its sequence likelihood fraction
//! (SLF), the softmax of the per-pilot likelihood ratios within the device.

use std::io::Write;

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Zip};
use num_complex::Complex64;

use crate::amp::{
    decide_row, logistic, row_stats, AmpOptions, AmpProblem, BlockDenoiser, MmseDenoiser, RowPrior,
};
use crate::error::{Error, Result};
use crate::model::{LargeScaleProfile, PilotBook, ReceivedBlock, SystemConfig};

/// A pilot book read as `2^r` consecutive columns per device.
#[derive(Debug, Clone, Copy)]
pub struct ExtendedBookView<'a> {
    pub book: &'a PilotBook,
    pub bits: u32,
}

impl<'a> ExtendedBookView<'a> {
    pub fn new(book: &'a PilotBook, bits: u32) -> Result<Self> {
        if book.columns_per_device != 1usize << bits {
            return Err(Error::Shape(format!(
                "book has {} columns per device, {bits} bits need {}",
                book.columns_per_device,
                1usize << bits
            )));
        }
        Ok(ExtendedBookView { book, bits })
    }

    pub fn columns_per_device(&self) -> usize {
        1 << self.bits
    }

    pub fn device_of_column(&self, column: usize) -> usize {
        column >> self.bits
    }

    pub fn index_of_column(&self, column: usize) -> usize {
        column & (self.columns_per_device() - 1)
    }
}

/// Column transmitted by `device` to convey `message`.
pub fn encode_message(device: usize, message: usize, bits: u32) -> Result<usize> {
    let per = 1usize << bits;
    if message >= per {
        return Err(Error::OutOfRange(format!("message {message} needs more than {bits} bits")));
    }
    Ok(device * per + message)
}

/// Log-likelihood ratio (active over inactive) of one pilot's pseudo-data:
/// `-M ln(1 + beta/mu2) + ||x||^2 (1/mu2 - 1/(mu2 + beta))`.
pub fn sequence_likelihood(x: &[Complex64], beta: f64, mu2: f64) -> Result<f64> {
    if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("sequence likelihood"));
    }
    let prior = RowPrior::new(beta, 0.5, mu2)?;
    let e: f64 = x.iter().map(|z| z.norm_sqr()).sum();
    Ok(log_likelihood(&prior, e, x.len()))
}

fn log_likelihood(prior: &RowPrior, energy: f64, m: usize) -> f64 {
    prior.energy_weight() * energy - m as f64 * (prior.beta / prior.mu2).ln_1p()
}

/// Sequence likelihood fractions: softmax of the log-likelihoods.
pub fn slf(loglik: &[f64]) -> Vec<f64> {
    let mut out = loglik.to_vec();
    slf_in_place(&mut out);
    out
}

fn slf_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// `f(x) = 1 / (1 + exp(-c (x - 1/2)))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidGate {
    pub sharpness: f64,
}

/// Default sharpness: `f(1)` and `1 - f(0)` are within about 2e-9 of 1.
pub const DEFAULT_SHARPNESS: f64 = 40.0;

impl Default for SigmoidGate {
    fn default() -> Self {
        SigmoidGate { sharpness: DEFAULT_SHARPNESS }
    }
}

impl SigmoidGate {
    pub fn new(sharpness: f64) -> Result<Self> {
        if !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(Error::OutOfRange(format!("sigmoid sharpness {sharpness}")));
        }
        Ok(SigmoidGate { sharpness })
    }

    pub fn apply(&self, x: f64) -> f64 {
        logistic(self.sharpness * (x - 0.5))
    }
}

pub fn sigmoid_gate(x: f64, gate: SigmoidGate) -> f64 {
    gate.apply(x)
}

/// Gating applied on top of the MMSE denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    Sigmoid(SigmoidGate),
    /// `f = 1` exactly.
    Bypass,
}

impl Default for Gate {
    fn default() -> Self {
        Gate::Sigmoid(SigmoidGate::default())
    }
}

impl Gate {
    /// `(f(x), f'(x))`.
    fn eval(&self, x: f64) -> (f64, f64) {
        match self {
            Gate::Bypass => (1.0, 0.0),
            Gate::Sigmoid(g) => {
                let f = g.apply(x);
                (f, g.sharpness * f * (1.0 - f))
            }
        }
    }
}

/// The modified denoiser over one device's `2^r` pseudo-data rows.
#[derive(Debug, Clone, Copy)]
pub struct MampDenoiser {
    /// Activity prior of a single column.
    pub eps: f64,
    pub gate: Gate,
    pub block: usize,
}

impl BlockDenoiser for MampDenoiser {
    fn block_len(&self) -> usize {
        self.block
    }

    fn denoise_block(
        &self,
        pseudo: ArrayView2<'_, Complex64>,
        beta: f64,
        mu2: f64,
        mut out: ArrayViewMut2<'_, Complex64>,
    ) -> f64 {
        let prior = RowPrior { beta, eps: self.eps, mu2 };
        let m = pseudo.ncols();
        let gain = prior.gain();
        let weight = prior.energy_weight();
        let stats: Vec<_> = pseudo.outer_iter().map(|x| row_stats(x.iter(), &prior)).collect();
        let mut fractions: Vec<f64> = stats.iter().map(|s| log_likelihood(&prior, s.energy, m)).collect();
        slf_in_place(&mut fractions);

        let mut div = 0.0;
        for ((x, mut o), (st, phi)) in pseudo
            .outer_iter()
            .zip(out.outer_iter_mut())
            .zip(stats.iter().zip(&fractions))
        {
            let (f, df) = self.gate.eval(*phi);
            let scale = f * st.v * gain;
            Zip::from(&mut o).and(&x).for_each(|o, z| *o = z * scale);
            let gate_term = if df == 0.0 {
                0.0
            } else {
                df * phi * (1.0 - phi) * weight * gain * st.v * st.energy / m as f64
            };
            div += f * st.divergence(&prior, m) + gate_term;
        }
        div
    }
}

fn block_matrix(block: &[Vec<Complex64>]) -> Result<Array2<Complex64>> {
    let m = block.first().map_or(0, Vec::len);
    if block.is_empty() || block.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("device block rows must be non-empty and equally long".into()));
    }
    if block.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("modified denoiser input"));
    }
    Ok(Array2::from_shape_fn((block.len(), m), |(i, j)| block[i][j]))
}

/// Applies the modified denoiser to one device's rows.
pub fn mamp_denoise(
    block: &[Vec<Complex64>],
    beta: f64,
    eps: f64,
    mu2: f64,
    gate: Gate,
) -> Result<Vec<Vec<Complex64>>> {
    let x = block_matrix(block)?;
    RowPrior::new(beta, eps, mu2)?;
    let mut out = Array2::zeros(x.dim());
    MampDenoiser { eps, gate, block: block.len() }.denoise_block(x.view(), beta, mu2, out.view_mut());
    Ok(out.outer_iter().map(|r| r.to_vec()).collect())
}

/// Sum over the block of the per-row mean Wirtinger derivatives of
/// [`mamp_denoise`].
pub fn mamp_divergence(block: &[Vec<Complex64>], beta: f64, eps: f64, mu2: f64, gate: Gate) -> Result<f64> {
    let x = block_matrix(block)?;
    RowPrior::new(beta, eps, mu2)?;
    let mut out = Array2::zeros(x.dim());
    Ok(MampDenoiser { eps, gate, block: block.len() }.denoise_block(x.view(), beta, mu2, out.view_mut()))
}

/// Per-device decisions and soft outputs of a non-coherent detector.
#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    pub active: Vec<bool>,
    /// Decoded pilot index of each device declared active.
    pub messages: Vec<Option<usize>>,
    /// Posterior activity `v` of every column.
    pub column_stats: Vec<f64>,
    /// SLF of every column within its device.
    pub slf: Vec<f64>,
    pub estimates: Array2<Complex64>,
    pub mu2: f64,
    pub noise_state_trace: Vec<f64>,
    /// `||R_t||_F` per iteration, index 0 being the observation.
    pub residual_trace: Vec<f64>,
    pub iterations: usize,
}

impl DetectionOutcome {
    /// Writes `(device, index, v, slf, active, decoded)` rows.
    pub fn write_soft_outputs_csv<W: Write>(&self, w: W) -> Result<()> {
        let per = self.slf.len() / self.active.len().max(1);
        let mut wr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        wr.write_record(["device", "index", "v", "slf", "active", "decoded"]).map_err(err)?;
        for (c, (v, f)) in self.column_stats.iter().zip(&self.slf).enumerate() {
            let d = c / per;
            let decoded = self.messages[d].map_or(String::new(), |m| m.to_string());
            wr.write_record([
                d.to_string(),
                (c % per).to_string(),
                format!("{v:e}"),
                format!("{f:e}"),
                self.active[d].to_string(),
                decoded,
            ])
            .map_err(err)?;
        }
        wr.flush().map_err(|source| Error::Io { path: "<soft outputs>".into(), source })
    }
}

/// Which denoiser drives the non-coherent detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoncoherentDetector {
    /// M-AMP with the given gate.
    Mamp(Gate),
    /// Unmodified AMP on the extended book, every pilot a fictitious device.
    AmpEib,
}

/// Activity prior of one column when a device is active with probability
/// `eps` and picks one of `2^r` pilots uniformly.
pub fn column_prior(eps: f64, bits: u32) -> f64 {
    eps / (1u64 << bits) as f64
}

/// M-AMP: joint activity detection and pilot-index decoding.
pub fn mamp_detect(
    received: &ReceivedBlock,
    view: &ExtendedBookView<'_>,
    profile: &LargeScaleProfile,
    eps: f64,
    config: &SystemConfig,
    options: &AmpOptions,
    gate: Gate,
) -> Result<DetectionOutcome> {
    noncoherent_detect(received, view, profile, eps, config, options, NoncoherentDetector::Mamp(gate))
}

/// Plain AMP on the extended book ("AMP with embedded bits").
pub fn amp_eib_detect(
    received: &ReceivedBlock,
    view: &ExtendedBookView<'_>,
    profile: &LargeScaleProfile,
    eps: f64,
    config: &SystemConfig,
    options: &AmpOptions,
) -> Result<DetectionOutcome> {
    noncoherent_detect(received, view, profile, eps, config, options, NoncoherentDetector::AmpEib)
}

pub fn noncoherent_detect(
    received: &ReceivedBlock,
    view: &ExtendedBookView<'_>,
    profile: &LargeScaleProfile,
    eps: f64,
    config: &SystemConfig,
    options: &AmpOptions,
    detector: NoncoherentDetector,
) -> Result<DetectionOutcome> {
    let eps_col = column_prior(eps, view.bits);
    let per = view.columns_per_device();
    let problem = AmpProblem::new(received, view.book, profile, eps_col, config)?;
    let run = match detector {
        NoncoherentDetector::Mamp(gate) => {
            problem.run(&MampDenoiser { eps: eps_col, gate, block: per }, options)?
        }
        NoncoherentDetector::AmpEib => problem.run(&MmseDenoiser { eps: eps_col }, options)?,
    };
    let state = &run.state;
    let mu2 = if state.pseudo_mu2.is_nan() { state.noise_state } else { state.pseudo_mu2 };
    let m = problem.antennas();
    let n = view.book.n_devices();

    let mut active = vec![false; n];
    let mut messages = vec![None; n];
    let mut column_stats = Vec::with_capacity(n * per);
    let mut fractions = Vec::with_capacity(n * per);
    for d in 0..n {
        let prior = RowPrior { beta: problem.device_betas[d], eps: eps_col, mu2 };
        let energies: Vec<f64> = view
            .book
            .device_columns(d)
            .map(|c| state.pseudo.row(c).iter().map(|z| z.norm_sqr()).sum())
            .collect();
        let mut lik: Vec<f64> = energies.iter().map(|e| log_likelihood(&prior, *e, m)).collect();
        slf_in_place(&mut lik);
        let best = (0..per)
            .max_by(|a, b| lik[*a].total_cmp(&lik[*b]))
            .unwrap_or(0);
        let hit = energies.iter().any(|e| decide_row(*e, m, &prior, options.decision));
        active[d] = hit;
        if hit {
            messages[d] = Some(best);
        }
        column_stats.extend(energies.iter().map(|e| prior.posterior_pair(*e, m).0));
        fractions.extend(lik);
    }
    Ok(DetectionOutcome {
        active,
        messages,
        column_stats,
        slf: fractions,
        estimates: run.state.estimates,
        mu2,
        noise_state_trace: run.noise_trace,
        residual_trace: run.residual_trace,
        iterations: run.state.iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amp::denoise;
    use crate::rng::{complex_normal, seeded};
    use proptest::prelude::*;

    fn rows(n: usize, m: usize, var: f64, seed: u64) -> Vec<Vec<Complex64>> {
        let mut rng = seeded(seed);
        (0..n).map(|_| (0..m).map(|_| complex_normal(&mut rng, var)).collect()).collect()
    }

    #[test]
    fn message_encoding() {
        assert_eq!(encode_message(0, 0, 1).unwrap(), 0);
        assert_eq!(encode_message(3, 2, 2).unwrap(), 14);
        assert!(encode_message(3, 4, 2).is_err());
        let mat = Array2::zeros((4, 40));
        let book = PilotBook::from_matrix(mat, 4).unwrap();
        let view = ExtendedBookView::new(&book, 2).unwrap();
        for d in 0..10 {
            for b in 0..4 {
                let c = encode_message(d, b, 2).unwrap();
                assert_eq!((view.device_of_column(c), view.index_of_column(c)), (d, b));
            }
        }
        assert!(ExtendedBookView::new(&book, 1).is_err());
    }

    #[test]
    fn likelihood_values() {
        let (beta, mu2, m) = (1.0, 0.25, 6usize);
        let zero = vec![Complex64::new(0.0, 0.0); m];
        let l0 = sequence_likelihood(&zero, beta, mu2).unwrap();
        assert!((l0 + m as f64 * (1.0f64 + beta / mu2).ln()).abs() < 1e-12);
        // root of log L = 0: solve on a bracket by bisection, then substitute
        let f = |s: f64| {
            let x = vec![Complex64::new((s / m as f64).sqrt(), 0.0); m];
            sequence_likelihood(&x, beta, mu2).unwrap()
        };
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        let closed = m as f64 * (1.0f64 + beta / mu2).ln() / (1.0 / mu2 - 1.0 / (mu2 + beta));
        assert!((root - closed).abs() < 1e-9 * closed);
        assert!(f(closed).abs() < 1e-12);
        assert!(f(2.0) < f(2.1));
    }

    #[test]
    fn slf_cases() {
        assert_eq!(slf(&[3.0, 3.0]), vec![0.5, 0.5]);
        let p = slf(&[60.0, 10.0, 5.0]);
        assert_eq!(p[0], 1.0);
        assert!((p[1] - (-50.0f64).exp()).abs() < 1e-30);
        let p = slf(&[1e6, -1e6]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn sigmoid_values() {
        for c in [0.5, 4.0, 40.0, 400.0] {
            let g = SigmoidGate::new(c).unwrap();
            assert_eq!(g.apply(0.5), 0.5);
            for t in [0.01, 0.2, 0.5, 3.0] {
                assert!((g.apply(0.5 + t) + g.apply(0.5 - t) - 1.0).abs() < 1e-15);
            }
        }
        let f1 = sigmoid_gate(1.0, SigmoidGate::new(40.0).unwrap());
        let want = 1.0 / (1.0 + (-20.0f64).exp());
        assert_eq!(f1, want);
        assert!((1.0 - f1 - 2.061e-9).abs() < 1e-12);
        assert!(SigmoidGate::new(0.0).is_err());
        assert!(SigmoidGate::new(f64::INFINITY).is_err());
    }

    #[test]
    fn single_column_reduces_to_gated_mmse() {
        let x = rows(1, 8, 0.7, 1);
        let (beta, eps, mu2) = (1.0, 0.2, 0.3);
        let plain = denoise(&x[0], beta, eps, mu2).unwrap();
        let gated = mamp_denoise(&x, beta, eps, mu2, Gate::default()).unwrap();
        let f1 = SigmoidGate::default().apply(1.0);
        for (g, p) in gated[0].iter().zip(&plain) {
            assert!((g - p * f1).norm() <= 1e-15 * p.norm());
            assert!((g - p).norm() <= 2.1e-9 * p.norm());
        }
        let bypass = mamp_denoise(&x, beta, eps, mu2, Gate::Bypass).unwrap();
        assert_eq!(bypass[0], plain);
    }

    #[test]
    fn weak_column_is_suppressed() {
        let (beta, eps, mu2) = (1.0, 0.05, 0.1);
        let mut block = rows(1, 16, beta, 2);
        block.push(vec![Complex64::new(0.0, 0.0); 16]);
        let out = mamp_denoise(&block, beta, eps, mu2, Gate::default()).unwrap();
        assert!(out[1].iter().all(|z| z.norm() == 0.0));
        // make column 2 weak but non-zero
        block[1] = rows(1, 16, 1e-4, 3).remove(0);
        let out = mamp_denoise(&block, beta, eps, mu2, Gate::default()).unwrap();
        let plain = denoise(&block[1], beta, eps, mu2).unwrap();
        for (o, p) in out[1].iter().zip(&plain) {
            assert!(o.norm() <= 1e-8 * p.norm());
        }
    }

    #[test]
    fn divergence_matches_finite_differences() {
        let gate = Gate::Sigmoid(SigmoidGate::new(6.0).unwrap());
        let (beta, eps, mu2) = (1.0, 0.1, 0.4);
        for seed in 0..20 {
            let mut block = rows(4, 6, 0.6, 100 + seed);
            block[0].iter_mut().for_each(|z| *z *= 1.3);
            let cf = mamp_divergence(&block, beta, eps, mu2, gate).unwrap();
            let h = 1e-5;
            let mut acc = Complex64::new(0.0, 0.0);
            for l in 0..4 {
                for i in 0..6 {
                    let eval = |dz: Complex64| {
                        let mut b = block.clone();
                        b[l][i] += dz;
                        mamp_denoise(&b, beta, eps, mu2, gate).unwrap()[l][i]
                    };
                    let d_re = (eval(Complex64::new(h, 0.0)) - eval(Complex64::new(-h, 0.0))) / (2.0 * h);
                    let d_im = (eval(Complex64::new(0.0, h)) - eval(Complex64::new(0.0, -h))) / (2.0 * h);
                    acc += 0.5 * (d_re - Complex64::i() * d_im) / 6.0;
                }
            }
            assert!(((cf - acc.re) / cf).abs() < 1e-4, "seed {seed}: {cf} vs {}", acc.re);
        }
    }

    #[test]
    fn lipschitz_on_bounded_domain() {
        let (beta, eps, mu2) = (1.0, 0.05, 0.2);
        let gate = Gate::default();
        let mut slopes = Vec::new();
        for h in [1e-3, 1e-4, 1e-5] {
            let mut worst: f64 = 0.0;
            for s in 0..200 {
                let block = rows(2, 4, 1.0, 1000 + s);
                let dir = rows(2, 4, 1.0, 5000 + s);
                let norm = dir.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                let moved: Vec<Vec<Complex64>> = block
                    .iter()
                    .zip(&dir)
                    .map(|(r, d)| r.iter().zip(d).map(|(a, b)| a + b * (h / norm)).collect())
                    .collect();
                let a = mamp_denoise(&block, beta, eps, mu2, gate).unwrap();
                let b = mamp_denoise(&moved, beta, eps, mu2, gate).unwrap();
                let diff = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
                worst = worst.max(diff / h);
            }
            assert!(worst.is_finite());
            slopes.push(worst);
        }
        let lo = slopes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = slopes.iter().copied().fold(0.0, f64::max);
        assert!(hi / lo < 2.0, "{slopes:?}");
    }

    proptest! {
        #[test]
        fn slf_is_probability_vector(v in prop::collection::vec(-500.0f64..500.0, 1..17)) {
            let p = slf(&v);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn decoded_index_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 2..9), shift in -1e3f64..1e3) {
            let arg = |p: &[f64]| (0..p.len()).max_by(|a, b| p[*a].total_cmp(&p[*b])).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            prop_assert_eq!(arg(&slf(&v)), arg(&v));
            let a = slf(&v);
            let b = slf(&shifted);
            prop_assert_eq!(arg(&a), arg(&b));
        }

        #[test]
        fn swapping_columns_swaps_outputs(seed in 0u64..1000) {
            let block = rows(2, 5, 0.8, seed);
            let swapped = vec![block[1].clone(), block[0].clone()];
            let a = mamp_denoise(&block, 1.0, 0.1, 0.3, Gate::default()).unwrap();
            let b = mamp_denoise(&swapped, 1.0, 0.1, 0.3, Gate::default()).unwrap();
            prop_assert_eq!(&a[0], &b[1]);
            prop_assert_eq!(&a[1], &b[0]);
        }
    }
}
