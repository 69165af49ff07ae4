//! Coherent baseline: channel estimation after detection, MRC combining,
//! ergodic SINR/rate and short coded payloads.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;

use crate::amp::{amp_detect, AmpOptions};
use crate::error::{Error, Result};
use crate::model::{
    generate_geometry, generate_pilots, ActivityModel, ChannelRealization, LargeScaleProfile, PilotBook,
    ReceivedBlock, SystemConfig,
};
use crate::rng::{complex_normal, trial_rng};

/// Where the channel estimates fed to the combiner come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// Rows of the final AMP estimate.
    Amp,
    /// LMMSE re-estimation over the detected set.
    AmpMmse,
    /// Genie: true channels of the truly active devices.
    Perfect,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Perfect, EstimatorKind::AmpMmse, EstimatorKind::Amp];
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Amp => "amp",
            EstimatorKind::AmpMmse => "amp+mmse",
            EstimatorKind::Perfect => "perfect",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "amp" => Ok(EstimatorKind::Amp),
            "amp+mmse" | "mmse" | "amp-mmse" => Ok(EstimatorKind::AmpMmse),
            "perfect" => Ok(EstimatorKind::Perfect),
            _ => Err(Error::Unknown { kind: "estimator", name: s.to_string() }),
        }
    }
}

/// Channel estimates of a set of devices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub devices: Vec<usize>,
    /// One row per entry of `devices`.
    pub ghat: Array2<Complex64>,
    /// Mean square of an entry of each row.
    pub gamma: Vec<f64>,
    pub source: EstimatorKind,
}

impl ChannelEstimate {
    /// MRC combiner `ghat / (gamma sqrt(M))` of the `i`-th device.
    pub fn combiner(&self, i: usize) -> Vec<Complex64> {
        let s = 1.0 / (self.gamma[i] * (self.ghat.ncols() as f64).sqrt());
        self.ghat.row(i).iter().map(|z| z * s).collect()
    }
}

fn single_column(book: &PilotBook) -> Result<()> {
    if book.columns_per_device != 1 {
        return Err(Error::Shape(format!(
            "coherent operations need one pilot per device, book has {}",
            book.columns_per_device
        )));
    }
    Ok(())
}

fn check_devices(set: &[usize], n: usize) -> Result<()> {
    match set.iter().find(|k| **k >= n) {
        Some(k) => Err(Error::OutOfRange(format!("device {k} of {n}"))),
        None => Ok(()),
    }
}

/// `sum_{k' in set} rho_k' tau_p beta_k' |phi_k^H phi_k'|^2 + sigma^2`.
fn mmse_denominator(k: usize, set: &[usize], book: &PilotBook, powers: &[f64], betas: &[f64], noise: f64) -> f64 {
    let tau = book.pilot_len() as f64;
    set.iter()
        .map(|&j| powers[j] * tau * betas[j] * book.inner(k, j).norm_sqr())
        .sum::<f64>()
        + noise
}

/// `(c_k, gamma_k)`: LMMSE coefficient applied to `phi_k^H Y` and the mean
/// square of an estimate entry.
pub fn mmse_coefficients(
    k: usize,
    set: &[usize],
    book: &PilotBook,
    powers: &[f64],
    betas: &[f64],
    noise: f64,
) -> (f64, f64) {
    let tau = book.pilot_len() as f64;
    let d = mmse_denominator(k, set, book, powers, betas, noise);
    ((powers[k] * tau).sqrt() * betas[k] / d, powers[k] * tau * betas[k] * betas[k] / d)
}

/// `phi_k^H Y`, an `M`-vector.
pub fn despread(received: &ReceivedBlock, book: &PilotBook, k: usize) -> Vec<Complex64> {
    let y = &received.pilot_obs;
    let mut out = vec![Complex64::new(0.0, 0.0); y.ncols()];
    for (p, row) in book.column(k).iter().zip(y.outer_iter()) {
        let pc = p.conj();
        for (o, v) in out.iter_mut().zip(row.iter()) {
            *o += pc * v;
        }
    }
    out
}

/// LMMSE estimates of the detected devices' channels, treating the detected
/// set as the active set.
pub fn mmse_estimate(
    received: &ReceivedBlock,
    detected: &[usize],
    book: &PilotBook,
    powers: &[f64],
    profile: &LargeScaleProfile,
    config: &SystemConfig,
) -> Result<ChannelEstimate> {
    single_column(book)?;
    check_devices(detected, book.n_devices())?;
    if received.pilot_obs.nrows() != book.pilot_len() || powers.len() != profile.len() {
        return Err(Error::Shape("observation, book and powers disagree".into()));
    }
    let m = received.pilot_obs.ncols();
    let mut ghat = Array2::zeros((detected.len(), m));
    let mut gamma = Vec::with_capacity(detected.len());
    for (i, &k) in detected.iter().enumerate() {
        let (c, g) = mmse_coefficients(k, detected, book, powers, &profile.betas, config.noise_power);
        for (o, y) in ghat.row_mut(i).iter_mut().zip(despread(received, book, k)) {
            *o = y * c;
        }
        gamma.push(g);
    }
    Ok(ChannelEstimate { devices: detected.to_vec(), ghat, gamma, source: EstimatorKind::AmpMmse })
}

/// The three expectations of the use-and-forget SINR bound for device `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinrTerms {
    /// `|E(v^H g_k)|^2 rho_k`.
    pub signal: f64,
    /// `sum_{k'} E|v^H g_k'|^2 rho_k'` (including `k' = k`).
    pub interference: f64,
    /// `E||v||^2 sigma^2`.
    pub noise: f64,
}

impl SinrTerms {
    pub fn sinr(&self) -> f64 {
        self.signal / (self.interference + self.noise - self.signal)
    }
}

fn check_active(k: usize, active: &[usize], book: &PilotBook, powers: &[f64], profile: &LargeScaleProfile) -> Result<()> {
    single_column(book)?;
    check_devices(active, book.n_devices())?;
    if powers.len() != book.n_devices() || profile.len() != book.n_devices() {
        return Err(Error::Shape("powers and profile must cover every device".into()));
    }
    if !active.contains(&k) {
        return Err(Error::InvalidConfig(format!("device {k} is not in the active set")));
    }
    Ok(())
}

/// Closed forms of the three terms under the LMMSE estimate and the MRC
/// combiner.
pub fn sinr_terms_closed_form(
    k: usize,
    active: &[usize],
    book: &PilotBook,
    powers: &[f64],
    profile: &LargeScaleProfile,
    config: &SystemConfig,
) -> Result<SinrTerms> {
    check_active(k, active, book, powers, profile)?;
    let m = config.n_antennas as f64;
    let betas = &profile.betas;
    let (_, gamma) = mmse_coefficients(k, active, book, powers, betas, config.noise_power);
    let own = powers[k] * betas[k] * betas[k];
    let interference = active
        .iter()
        .map(|&j| {
            let pb = powers[j] * betas[j];
            pb / gamma + m * pb * pb * book.inner(k, j).norm_sqr() / own
        })
        .sum();
    Ok(SinrTerms { signal: m * powers[k], interference, noise: config.noise_power / gamma })
}

/// Effective SINR of device `k` with MRC on LMMSE estimates.
pub fn mrc_sinr_closed_form(
    k: usize,
    active: &[usize],
    book: &PilotBook,
    powers: &[f64],
    profile: &LargeScaleProfile,
    config: &SystemConfig,
) -> Result<f64> {
    check_active(k, active, book, powers, profile)?;
    let m = config.n_antennas as f64;
    let betas = &profile.betas;
    let (_, gamma) = mmse_coefficients(k, active, book, powers, betas, config.noise_power);
    let own = powers[k] * betas[k] * betas[k];
    let coherent: f64 = active
        .iter()
        .filter(|&&j| j != k)
        .map(|&j| book.inner(k, j).norm_sqr() * (powers[j] * betas[j]).powi(2) / own)
        .sum();
    let total: f64 = active.iter().map(|&j| powers[j] * betas[j]).sum();
    Ok(m * powers[k] / (m * coherent + (total + config.noise_power) / gamma))
}

/// `(1 - tau_p/tau) log2(1 + sinr)`; the prelog is clamped at zero.
pub fn achievable_rate(sinr: f64, tau: usize, tau_p: usize) -> f64 {
    let prelog = (1.0 - tau_p as f64 / tau as f64).max(0.0);
    if prelog == 0.0 {
        return 0.0;
    }
    prelog * sinr.ln_1p() / std::f64::consts::LN_2
}

/// Monte-Carlo estimate of the three SINR terms of device `k` over
/// `n_draws` draws of small-scale fading and noise (large-scale gains, powers
/// and pilots fixed).
#[allow(clippy::too_many_arguments)]
pub fn sinr_monte_carlo(
    k: usize,
    active: &[usize],
    book: &PilotBook,
    powers: &[f64],
    profile: &LargeScaleProfile,
    config: &SystemConfig,
    n_draws: usize,
    seed: u64,
) -> Result<SinrTerms> {
    check_active(k, active, book, powers, profile)?;
    if n_draws == 0 {
        return Err(Error::InvalidConfig("n_draws must be positive".into()));
    }
    let m = config.n_antennas;
    let betas = &profile.betas;
    let tau = book.pilot_len() as f64;
    let noise = config.noise_power;
    let (coef, gamma) = mmse_coefficients(k, active, book, powers, betas, noise);
    let despread_noise = noise * book.column(k).iter().map(|p| p.norm_sqr()).sum::<f64>();
    let weights: Vec<Complex64> = active
        .iter()
        .map(|&j| book.inner(k, j) * (powers[j] * tau).sqrt())
        .collect();
    let v_scale = coef / (gamma * (m as f64).sqrt());
    let own = active.iter().position(|&j| j == k).unwrap_or(0);

    let mut rng = trial_rng(seed, k as u64, 0);
    let mut channels = Array2::<Complex64>::zeros((active.len(), m));
    let mut v = vec![Complex64::new(0.0, 0.0); m];
    let (mut sum_a, mut sum_b, mut sum_c) = (Complex64::new(0.0, 0.0), 0.0, 0.0);
    for _ in 0..n_draws {
        for (mut row, &j) in channels.outer_iter_mut().zip(active) {
            row.iter_mut().for_each(|g| *g = complex_normal(&mut rng, betas[j]));
        }
        for (i, vi) in v.iter_mut().enumerate() {
            let y: Complex64 =
                weights.iter().enumerate().map(|(a, w)| w * channels[[a, i]]).sum::<Complex64>()
                    + complex_normal(&mut rng, despread_noise);
            *vi = y * v_scale;
        }
        for (a, &j) in active.iter().enumerate() {
            let p: Complex64 = v.iter().zip(channels.row(a)).map(|(x, g)| x.conj() * g).sum();
            if a == own {
                sum_a += p;
            }
            sum_b += p.norm_sqr() * powers[j];
        }
        sum_c += v.iter().map(|x| x.norm_sqr()).sum::<f64>() * noise;
    }
    let n = n_draws as f64;
    Ok(SinrTerms { signal: (sum_a / n).norm_sqr() * powers[k], interference: sum_b / n, noise: sum_c / n })
}

/// A binary block code with BPSK mapping `+1 <-> 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinearCode {
    Repetition(usize),
    Hamming74,
}

impl LinearCode {
    pub fn repetition(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidConfig("repetition length must be positive".into()));
        }
        Ok(LinearCode::Repetition(len))
    }

    pub fn length(&self) -> usize {
        match self {
            LinearCode::Repetition(l) => *l,
            LinearCode::Hamming74 => 7,
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            LinearCode::Repetition(_) => 1,
            LinearCode::Hamming74 => 4,
        }
    }

    fn check_len(&self, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::Shape(format!("{self} expects {want} values, got {got}")));
        }
        Ok(())
    }

    pub fn encode_bits(&self, bits: &[u8]) -> Result<Vec<u8>> {
        self.check_len(bits.len(), self.dimension())?;
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::OutOfRange("bits must be 0 or 1".into()));
        }
        Ok(match self {
            LinearCode::Repetition(l) => vec![bits[0]; *l],
            LinearCode::Hamming74 => {
                let [d1, d2, d3, d4] = [bits[0], bits[1], bits[2], bits[3]];
                vec![d1, d2, d3, d4, d1 ^ d2 ^ d4, d1 ^ d3 ^ d4, d2 ^ d3 ^ d4]
            }
        })
    }

    /// BPSK symbols of the codeword.
    pub fn encode(&self, bits: &[u8]) -> Result<Vec<f64>> {
        Ok(self.encode_bits(bits)?.into_iter().map(|b| if b == 0 { 1.0 } else { -1.0 }).collect())
    }

    /// Hard-decision decoding of a received codeword.
    pub fn decode_hard(&self, word: &[u8]) -> Result<Vec<u8>> {
        self.check_len(word.len(), self.length())?;
        Ok(match self {
            LinearCode::Repetition(l) => {
                let ones = word.iter().filter(|b| **b != 0).count();
                vec![u8::from(2 * ones > *l)]
            }
            LinearCode::Hamming74 => {
                let mut w: Vec<u8> = word.iter().map(|b| u8::from(*b != 0)).collect();
                let s = [
                    w[4] ^ w[0] ^ w[1] ^ w[3],
                    w[5] ^ w[0] ^ w[2] ^ w[3],
                    w[6] ^ w[1] ^ w[2] ^ w[3],
                ];
                let flip = match s {
                    [1, 1, 0] => Some(0),
                    [1, 0, 1] => Some(1),
                    [0, 1, 1] => Some(2),
                    [1, 1, 1] => Some(3),
                    [1, 0, 0] => Some(4),
                    [0, 1, 0] => Some(5),
                    [0, 0, 1] => Some(6),
                    _ => None,
                };
                if let Some(i) = flip {
                    w[i] ^= 1;
                }
                w.truncate(4);
                w
            }
        })
    }

    /// Decodes per-symbol LLRs (positive favours bit 0). Repetition sums the
    /// LLRs; Hamming takes hard decisions first.
    pub fn decode_llrs(&self, llrs: &[f64]) -> Result<Vec<u8>> {
        self.check_len(llrs.len(), self.length())?;
        match self {
            LinearCode::Repetition(_) => Ok(vec![u8::from(llrs.iter().sum::<f64>() < 0.0)]),
            LinearCode::Hamming74 => {
                let hard: Vec<u8> = llrs.iter().map(|l| u8::from(*l < 0.0)).collect();
                self.decode_hard(&hard)
            }
        }
    }
}

impl fmt::Display for LinearCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinearCode::Repetition(l) => write!(f, "rep{l}"),
            LinearCode::Hamming74 => f.write_str("hamming74"),
        }
    }
}

impl FromStr for LinearCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "hamming74" || lower == "hamming" {
            return Ok(LinearCode::Hamming74);
        }
        lower
            .strip_prefix("rep")
            .and_then(|l| l.parse().ok())
            .map(LinearCode::repetition)
            .unwrap_or_else(|| Err(Error::Unknown { kind: "code", name: s.to_string() }))
    }
}

/// Bits of `message`, least significant first.
pub fn message_bits(message: usize, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((message >> i) & 1) as u8).collect()
}

/// Counts from one or more coherent-payload trials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PayloadCounts {
    pub active: u64,
    pub inactive: u64,
    pub missed: u64,
    pub false_alarms: u64,
    /// Active devices missed or with any payload bit wrong.
    pub message_errors: u64,
    pub bit_errors: u64,
    /// Payload bits of active devices (missed devices count all bits wrong).
    pub bits: u64,
}

impl PayloadCounts {
    pub fn merge(&mut self, o: &PayloadCounts) {
        self.active += o.active;
        self.inactive += o.inactive;
        self.missed += o.missed;
        self.false_alarms += o.false_alarms;
        self.message_errors += o.message_errors;
        self.bit_errors += o.bit_errors;
        self.bits += o.bits;
    }

    pub fn message_error_rate(&self) -> f64 {
        ratio(self.message_errors, self.active)
    }

    pub fn false_alarm_rate(&self) -> f64 {
        ratio(self.false_alarms, self.inactive)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One coherence block: pilot phase of length `tau - n`, AMP detection,
/// channel estimation, then `n` coded BPSK symbols per active device.
/// `config.info_bits` must equal the code dimension.
pub fn coherent_payload_trial<R: Rng + ?Sized>(
    config: &SystemConfig,
    code: LinearCode,
    estimator: EstimatorKind,
    options: &AmpOptions,
    rng: &mut R,
) -> Result<PayloadCounts> {
    let n_sym = code.length();
    if config.coherence_len <= n_sym {
        return Err(Error::InvalidConfig(format!(
            "coherence length {} leaves no pilot symbols for {code}",
            config.coherence_len
        )));
    }
    if config.info_bits as usize != code.dimension() {
        return Err(Error::InvalidConfig(format!(
            "{} information bits do not fit {code}",
            config.info_bits
        )));
    }
    let mut pilot_cfg = config.clone();
    pilot_cfg.pilot_len = config.coherence_len - n_sym;
    pilot_cfg.info_bits = 0;

    let profile = generate_geometry(config, rng);
    let book = generate_pilots(&pilot_cfg, rng);
    let real = ChannelRealization::sample(config, &profile, ActivityModel::Bernoulli, rng);
    let mut sent = real.clone();
    sent.messages.iter_mut().for_each(|m| *m = 0);
    let received = crate::model::synthesize_received(&book, &profile, &sent, &pilot_cfg, rng)?;
    let active = real.active_devices();
    let m = config.n_antennas;

    // data phase: row t is sum_k sqrt(rho_k) g_k x_k[t] + z_t
    let mut data = Array2::<Complex64>::zeros((n_sym, m));
    let mut codewords = Vec::with_capacity(active.len());
    for &k in &active {
        let bits = message_bits(real.messages[k], code.dimension());
        let symbols = code.encode(&bits)?;
        let g = real.channel(&profile, k);
        let s = real.powers[k].sqrt();
        for (t, x) in symbols.iter().enumerate() {
            for (d, gv) in data.row_mut(t).iter_mut().zip(&g) {
                *d += gv * (s * x);
            }
        }
        codewords.push(bits);
    }
    data.mapv_inplace(|v| v + complex_normal(rng, config.noise_power));

    let (detected, combiners): (Vec<usize>, Vec<Vec<Complex64>>) = match estimator {
        EstimatorKind::Perfect => {
            let v = active.iter().map(|&k| real.channel(&profile, k)).collect();
            (active.clone(), v)
        }
        EstimatorKind::Amp => {
            let out = amp_detect(&received, &book, &profile, config.activity_prob, &pilot_cfg, options)?;
            let v = out
                .support
                .iter()
                .map(|&c| out.channel_estimate(c, real.powers[c], &pilot_cfg))
                .collect();
            (out.support, v)
        }
        EstimatorKind::AmpMmse => {
            let out = amp_detect(&received, &book, &profile, config.activity_prob, &pilot_cfg, options)?;
            let est = mmse_estimate(&received, &out.support, &book, &real.powers, &profile, &pilot_cfg)?;
            let v = (0..est.devices.len()).map(|i| est.ghat.row(i).to_vec()).collect();
            (out.support, v)
        }
    };

    let mut counts = PayloadCounts {
        active: active.len() as u64,
        inactive: (config.n_devices - active.len()) as u64,
        bits: (active.len() * code.dimension()) as u64,
        ..Default::default()
    };
    for (&k, v) in detected.iter().zip(&combiners) {
        let Ok(pos) = active.binary_search(&k) else {
            counts.false_alarms += 1;
            continue;
        };
        let llrs: Vec<f64> = data
            .outer_iter()
            .map(|y| v.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum::<Complex64>().re)
            .collect();
        let decoded = code.decode_llrs(&llrs)?;
        let wrong = decoded.iter().zip(&codewords[pos]).filter(|(a, b)| a != b).count() as u64;
        counts.bit_errors += wrong;
        counts.message_errors += u64::from(wrong > 0);
    }
    for &k in &active {
        if detected.binary_search(&k).is_err() {
            counts.missed += 1;
            counts.message_errors += 1;
            counts.bit_errors += code.dimension() as u64;
        }
    }
    Ok(counts)
}

/// Serial loop over [`coherent_payload_trial`] with per-trial streams.
pub fn simulate_coherent_payload(
    config: &SystemConfig,
    code: LinearCode,
    estimator: EstimatorKind,
    options: &AmpOptions,
    n_trials: usize,
    seed: u64,
) -> Result<PayloadCounts> {
    config.validate()?;
    let mut total = PayloadCounts::default();
    for t in 0..n_trials {
        let mut rng = trial_rng(seed, 0, t as u64);
        total.merge(&coherent_payload_trial(config, code, estimator, options, &mut rng)?);
    }
    Ok(total)
}

/// Per-trial sums for the pooled SINR estimator. For every active device
/// `k` and combiner `v = ghat/(gamma sqrt(M))` it accumulates `a = v^H g_k`,
/// `b = sum_k' |v^H g_k'|^2 rho_k'/rho_k` and `c = ||v||^2 sigma^2/rho_k`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RateSums {
    pub count: u64,
    pub a: Complex64,
    pub b: f64,
    pub c: f64,
}

impl RateSums {
    pub fn merge(&mut self, o: &RateSums) {
        self.count += o.count;
        self.a += o.a;
        self.b += o.b;
        self.c += o.c;
    }

    /// `|E a|^2 / (E b + E c - |E a|^2)`; zero when nothing was pooled.
    pub fn sinr(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let n = self.count as f64;
        let s = (self.a / n).norm_sqr();
        s / (self.b / n + self.c / n - s)
    }
}

/// Sums for each estimator from one block with all devices correctly
/// detected. The AMP estimate uses `gamma_k = beta_k`: a common scale on
/// every `gamma_k` cancels in [`RateSums::sinr`], so calibrating it is moot.
pub fn rate_trial<R: Rng + ?Sized>(
    config: &SystemConfig,
    options: &AmpOptions,
    rng: &mut R,
) -> Result<[(EstimatorKind, RateSums); 3]> {
    let profile = generate_geometry(config, rng);
    let book = generate_pilots(config, rng);
    let real = ChannelRealization::sample(config, &profile, ActivityModel::Bernoulli, rng);
    let received = crate::model::synthesize_received(&book, &profile, &real, config, rng)?;
    let active = real.active_devices();
    let m = config.n_antennas;
    let channels: Vec<Vec<Complex64>> = active.iter().map(|&k| real.channel(&profile, k)).collect();

    let amp = if active.is_empty() {
        None
    } else {
        Some(amp_detect(&received, &book, &profile, config.activity_prob, config, options)?)
    };
    let mmse = mmse_estimate(&received, &active, &book, &real.powers, &profile, config)?;

    let mut out = [
        (EstimatorKind::Perfect, RateSums::default()),
        (EstimatorKind::AmpMmse, RateSums::default()),
        (EstimatorKind::Amp, RateSums::default()),
    ];
    let sqrt_m = (m as f64).sqrt();
    for (i, &k) in active.iter().enumerate() {
        let beta = profile.betas[k];
        let rho = real.powers[k];
        let combiners = [
            channels[i].iter().map(|g| g / (beta * sqrt_m)).collect::<Vec<_>>(),
            mmse.combiner(i),
            amp.as_ref()
                .map(|o| o.channel_estimate(k, rho, config))
                .unwrap_or_default()
                .iter()
                .map(|g| g / (beta * sqrt_m))
                .collect(),
        ];
        for ((_, sums), v) in out.iter_mut().zip(&combiners) {
            let inner = |g: &[Complex64]| v.iter().zip(g).map(|(x, y)| x.conj() * y).sum::<Complex64>();
            sums.count += 1;
            sums.a += inner(&channels[i]);
            sums.b += active
                .iter()
                .zip(&channels)
                .map(|(&j, g)| inner(g).norm_sqr() * real.powers[j] / rho)
                .sum::<f64>();
            sums.c += v.iter().map(|x| x.norm_sqr()).sum::<f64>() * config.noise_power / rho;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{apply_power_control, PilotKind};
    use crate::rng::seeded;

    fn orthogonal_book(n: usize) -> PilotBook {
        // DFT columns, unit norm
        let m = Array2::from_shape_fn((n, n), |(t, k)| {
            Complex64::from_polar(1.0 / (n as f64).sqrt(), 2.0 * std::f64::consts::PI * (t * k) as f64 / n as f64)
        });
        PilotBook::from_matrix(m, 1).unwrap()
    }

    fn setup(n: usize, tau: usize, m: usize, seed: u64) -> (SystemConfig, LargeScaleProfile, PilotBook) {
        let cfg = SystemConfig {
            n_devices: n,
            n_antennas: m,
            pilot_len: tau,
            ..SystemConfig::default()
        };
        let mut rng = seeded(seed);
        let profile = generate_geometry(&cfg, &mut rng);
        let book = generate_pilots(&cfg, &mut rng);
        (cfg, profile, book)
    }

    #[test]
    fn rate_examples() {
        assert_eq!(achievable_rate(5.0, 10, 10), 0.0);
        assert_eq!(achievable_rate(0.0, 10, 3), 0.0);
        assert!((achievable_rate(1.0, 10, 5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_device_estimate() {
        let (mut cfg, profile, book) = setup(4, 8, 6, 1);
        cfg.pilot_kind = PilotKind::Bernoulli;
        let powers = apply_power_control(&profile, &cfg);
        let mut rng = seeded(2);
        let y = Array2::from_shape_simple_fn((8, 6), || complex_normal(&mut rng, 1.0));
        let rx = ReceivedBlock { pilot_obs: y, data_obs: None };
        let est = mmse_estimate(&rx, &[2], &book, &powers, &profile, &cfg).unwrap();
        let (rho, beta, tau) = (powers[2], profile.betas[2], 8.0);
        let c = (rho * tau).sqrt() * beta / (rho * tau * beta + cfg.noise_power);
        for (g, y) in est.ghat.row(0).iter().zip(despread(&rx, &book, 2)) {
            assert!((g - y * c).norm() <= 1e-12 * (y * c).norm());
        }
        assert!(mmse_estimate(&rx, &[], &book, &powers, &profile, &cfg).unwrap().devices.is_empty());
    }

    #[test]
    fn noiseless_orthogonal_recovers_channels() {
        let n = 8;
        let book = orthogonal_book(n);
        let cfg = SystemConfig { n_devices: n, n_antennas: 5, pilot_len: n, ..SystemConfig::default() };
        let mut rng = seeded(3);
        let profile = generate_geometry(&cfg, &mut rng);
        let mut real = ChannelRealization::sample(&cfg, &profile, ActivityModel::FixedCount(4), &mut rng);
        real.messages.iter_mut().for_each(|m| *m = 0);
        let signal = profile.betas.iter().copied().fold(f64::INFINITY, f64::min) * cfg.max_ul_power;
        let mut quiet = cfg.clone();
        quiet.noise_power = 1e-12 * signal;
        let rx = crate::model::synthesize_received(&book, &profile, &real, &quiet, &mut rng).unwrap();
        let active = real.active_devices();
        let est = mmse_estimate(&rx, &active, &book, &real.powers, &profile, &quiet).unwrap();
        for (i, &k) in active.iter().enumerate() {
            let g = real.channel(&profile, k);
            let err: f64 = est.ghat.row(i).iter().zip(&g).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            let norm: f64 = g.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!(err < 1e-6 * norm, "{}", err / norm);
        }
    }

    #[test]
    fn gamma_matches_sampled_mean_square() {
        let (cfg, profile, book) = setup(6, 5, 4, 4);
        let powers = apply_power_control(&profile, &cfg);
        let active = [0usize, 2, 3, 5];
        let real_template = ChannelRealization {
            small_scale: Array2::zeros((6, 4)),
            activity: (0..6).map(|k| active.contains(&k)).collect(),
            messages: vec![0; 6],
            powers: powers.clone(),
        };
        let mut rng = seeded(5);
        let draws = 10_000;
        let mut acc = vec![0.0; active.len()];
        let mut gamma = Vec::new();
        for _ in 0..draws {
            let mut real = real_template.clone();
            real.small_scale.mapv_inplace(|_| complex_normal(&mut rng, 1.0));
            let rx = crate::model::synthesize_received(&book, &profile, &real, &cfg, &mut rng).unwrap();
            let est = mmse_estimate(&rx, &active, &book, &powers, &profile, &cfg).unwrap();
            for (i, a) in acc.iter_mut().enumerate() {
                *a += est.ghat.row(i).iter().map(|z| z.norm_sqr()).sum::<f64>() / 4.0;
            }
            gamma = est.gamma;
        }
        for (a, g) in acc.iter().zip(&gamma) {
            let ms = a / draws as f64;
            assert!((ms / g - 1.0).abs() < 0.03, "{ms} vs {g}");
        }
    }

    #[test]
    fn closed_form_agrees_with_term_sum() {
        for seed in 0..10 {
            let (cfg, profile, book) = setup(10, 4, 30, 10 + seed);
            let powers = apply_power_control(&profile, &cfg);
            let active = [1usize, 4, 5, 8];
            for &k in &active {
                let t = sinr_terms_closed_form(k, &active, &book, &powers, &profile, &cfg).unwrap();
                let g = mrc_sinr_closed_form(k, &active, &book, &powers, &profile, &cfg).unwrap();
                assert!((t.sinr() / g - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_device_and_orthogonal_forms() {
        let (cfg, profile, book) = setup(5, 6, 20, 30);
        let powers = apply_power_control(&profile, &cfg);
        let (rho, beta) = (powers[3], profile.betas[3]);
        let (_, gamma) = mmse_coefficients(3, &[3], &book, &powers, &profile.betas, cfg.noise_power);
        let want = 20.0 * rho / ((rho * beta + cfg.noise_power) / gamma);
        let got = mrc_sinr_closed_form(3, &[3], &book, &powers, &profile, &cfg).unwrap();
        assert!((got / want - 1.0).abs() < 1e-12);

        let ob = orthogonal_book(5);
        let mut prev = 0.0;
        for m in [10usize, 20, 40, 80] {
            let c = SystemConfig { n_antennas: m, pilot_len: 5, ..cfg.clone() };
            let g = mrc_sinr_closed_form(0, &[0, 1, 2, 3], &ob, &powers, &profile, &c).unwrap();
            if prev > 0.0 {
                assert!((g / prev - 2.0).abs() < 1e-9);
            }
            prev = g;
        }
    }

    #[test]
    fn closed_form_monotone_in_cross_correlation() {
        let cfg = SystemConfig { n_devices: 3, n_antennas: 16, pilot_len: 2, ..SystemConfig::default() };
        let profile = LargeScaleProfile::from_betas(vec![1e-10, 3e-11, 5e-11]).unwrap();
        let powers = vec![0.1; 3];
        let mut prev = f64::INFINITY;
        for t in 0..=10 {
            let theta = t as f64 * 0.15;
            let mut m = Array2::zeros((2, 3));
            m[[0, 0]] = Complex64::new(1.0, 0.0);
            m[[0, 1]] = Complex64::new(1.0, 0.0);
            m[[0, 2]] = Complex64::new(theta.cos(), 0.0);
            m[[1, 2]] = Complex64::new(theta.sin(), 0.0);
            m[[1, 1]] = Complex64::new(0.0, 0.0);
            let book = PilotBook::from_matrix(m, 1).unwrap();
            let g = mrc_sinr_closed_form(0, &[0, 2], &book, &powers, &profile, &cfg).unwrap();
            assert!(g >= prev * (1.0 - 1e-12) || t == 0, "t={t}");
            prev = g;
        }
    }

    #[test]
    fn monte_carlo_reduces_with_silent_interferers() {
        let (cfg, profile, book) = setup(6, 6, 16, 40);
        let mut powers = apply_power_control(&profile, &cfg);
        powers[1] = 0.0;
        powers[4] = 0.0;
        let full = sinr_monte_carlo(2, &[1, 2, 4], &book, &powers, &profile, &cfg, 10_000, 1).unwrap();
        let solo = mrc_sinr_closed_form(2, &[2], &book, &powers, &profile, &cfg).unwrap();
        let with_silent = mrc_sinr_closed_form(2, &[1, 2, 4], &book, &powers, &profile, &cfg).unwrap();
        assert!((with_silent / solo - 1.0).abs() < 1e-12);
        assert!((full.sinr() / solo - 1.0).abs() < 0.05, "{} vs {solo}", full.sinr());
    }

    #[test]
    fn hamming_corrects_single_errors() {
        let code = LinearCode::Hamming74;
        assert_eq!(code.encode_bits(&[0, 0, 0, 0]).unwrap(), vec![0; 7]);
        for msg in 0..16 {
            let bits = message_bits(msg, 4);
            let word = code.encode_bits(&bits).unwrap();
            assert_eq!(code.decode_hard(&word).unwrap(), bits);
            for pos in 0..7 {
                let mut w = word.clone();
                w[pos] ^= 1;
                assert_eq!(code.decode_hard(&w).unwrap(), bits, "msg {msg} pos {pos}");
            }
        }
    }

    #[test]
    fn repetition_sign_convention() {
        let code = LinearCode::repetition(3).unwrap();
        assert_eq!(code.decode_llrs(&[2.0, -1.0, 0.5]).unwrap(), vec![0]);
        assert_eq!(code.decode_llrs(&[-2.0, 1.0, 0.5]).unwrap(), vec![1]);
        assert_eq!(code.encode(&[0]).unwrap(), vec![1.0; 3]);
        assert_eq!(code.encode(&[1]).unwrap(), vec![-1.0; 3]);
        assert!(code.decode_llrs(&[1.0]).is_err());
        assert!(code.encode(&[0, 1]).is_err());
        assert!(LinearCode::repetition(0).is_err());
        assert_eq!("rep11".parse::<LinearCode>().unwrap(), LinearCode::Repetition(11));
        assert_eq!("Hamming74".parse::<LinearCode>().unwrap(), LinearCode::Hamming74);
        assert!("rep".parse::<LinearCode>().is_err());
    }

    #[test]
    fn perfect_csi_high_snr_single_device() {
        let cfg = SystemConfig {
            n_devices: 1,
            n_antennas: 20,
            coherence_len: 30,
            activity_prob: 1.0,
            noise_power: 2e-15,
            info_bits: 1,
            ..SystemConfig::default()
        };
        let counts = simulate_coherent_payload(
            &cfg,
            LinearCode::Repetition(11),
            EstimatorKind::Perfect,
            &AmpOptions::default(),
            2000,
            7,
        )
        .unwrap();
        assert_eq!(counts.active, 2000);
        assert!(counts.message_error_rate() < 1e-3);
    }
}
