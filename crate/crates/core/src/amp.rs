//! Approximate message passing for row-sparse MMV recovery.
//!
//! The observation is normalised to `y = Y / sqrt(tau_p rho_max)`, so that
//! `y = Phi X + W` with row `n` of `X` distributed as `CN(0, beta_n I)` when
//! the column is active. Per-device powers are folded into the effective gain
//! `beta_n rho_n / rho_max`. The effective noise covariance of the pseudo-data
//! is tracked as `mu2 * I`.

use std::io::Write;

use log::warn;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{apply_power_control, LargeScaleProfile, PilotBook, ReceivedBlock, SystemConfig};
use crate::rng::{complex_normal, trial_rng};

/// Numerically safe logistic function `1 / (1 + exp(-x))`.
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn energy(x: &[Complex64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

/// Bernoulli-Gaussian prior of one row under isotropic effective noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowPrior {
    pub beta: f64,
    pub eps: f64,
    pub mu2: f64,
}

impl RowPrior {
    pub fn new(beta: f64, eps: f64, mu2: f64) -> Result<Self> {
        let p = RowPrior { beta, eps, mu2 };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.mu2.is_finite() && self.eps.is_finite()) {
            return Err(Error::NonFinite("denoiser parameters"));
        }
        if !(self.beta > 0.0 && self.mu2 > 0.0 && (0.0..=1.0).contains(&self.eps)) {
            return Err(Error::OutOfRange(format!(
                "beta={} mu2={} eps={}",
                self.beta, self.mu2, self.eps
            )));
        }
        Ok(())
    }

    /// Linear MMSE gain `beta / (beta + mu2)`.
    pub fn gain(&self) -> f64 {
        self.beta / (self.beta + self.mu2)
    }

    /// Coefficient of `||x||^2` in the log-likelihood ratio,
    /// `1/mu2 - 1/(mu2 + beta)`.
    pub fn energy_weight(&self) -> f64 {
        self.beta / (self.mu2 * (self.mu2 + self.beta))
    }

    /// `log` of prior odds times likelihood ratio, inactive over active.
    /// The posterior activity probability is `1 / (1 + exp(L))`.
    pub fn log_inactive_odds(&self, energy: f64, m: usize) -> f64 {
        let prior = ((1.0 - self.eps) / self.eps).ln();
        prior + m as f64 * (self.beta / self.mu2).ln_1p() - self.energy_weight() * energy
    }

    /// `(v, 1 - v)` where `v` is the posterior probability of activity.
    pub fn posterior_pair(&self, energy: f64, m: usize) -> (f64, f64) {
        let l = self.log_inactive_odds(energy, m);
        if l == f64::NEG_INFINITY {
            return (1.0, 0.0);
        }
        if l == f64::INFINITY {
            return (0.0, 1.0);
        }
        (logistic(-l), logistic(l))
    }
}

fn check_finite(x: &[Complex64]) -> Result<()> {
    if x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("denoiser input"))
    }
}

/// Posterior probability that the row is active, `v(x)`.
pub fn activity_posterior(x: &[Complex64], beta: f64, eps: f64, mu2: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(RowPrior::new(beta, eps, mu2)?.posterior_pair(energy(x), x.len()).0)
}

/// MMSE denoiser `v(x) beta/(beta+mu2) x` for the Bernoulli-Gaussian row prior.
pub fn denoise(x: &[Complex64], beta: f64, eps: f64, mu2: f64) -> Result<Vec<Complex64>> {
    check_finite(x)?;
    let prior = RowPrior::new(beta, eps, mu2)?;
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    denoise_row(x, &prior, &mut out);
    Ok(out)
}

/// Mean Wirtinger derivative `(1/M) sum_m d eta_m / d x_m` of [`denoise`].
pub fn denoiser_divergence(x: &[Complex64], beta: f64, eps: f64, mu2: f64) -> Result<f64> {
    check_finite(x)?;
    let prior = RowPrior::new(beta, eps, mu2)?;
    let stats = row_stats(x, &prior);
    Ok(stats.divergence(&prior, x.len()))
}

/// Quantities shared by the denoiser and its divergence.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RowStats {
    pub energy: f64,
    pub v: f64,
    pub one_minus_v: f64,
}

impl RowStats {
    pub fn divergence(&self, prior: &RowPrior, m: usize) -> f64 {
        let extra = if self.one_minus_v == 0.0 {
            0.0
        } else {
            self.one_minus_v * prior.energy_weight() * self.energy / m as f64
        };
        prior.gain() * self.v * (1.0 + extra)
    }
}

pub(crate) fn row_stats<'a>(x: impl IntoIterator<Item = &'a Complex64>, prior: &RowPrior) -> RowStats {
    let mut e = 0.0;
    let mut m = 0;
    for z in x {
        e += z.norm_sqr();
        m += 1;
    }
    let (v, one_minus_v) = prior.posterior_pair(e, m);
    RowStats { energy: e, v, one_minus_v }
}

pub(crate) fn denoise_row(x: &[Complex64], prior: &RowPrior, out: &mut [Complex64]) -> RowStats {
    let stats = row_stats(x, prior);
    let scale = stats.v * prior.gain();
    for (o, z) in out.iter_mut().zip(x) {
        *o = z * scale;
    }
    stats
}

/// A separable-by-block denoiser used inside the AMP loop.
pub trait BlockDenoiser: Sync {
    /// Consecutive columns that are denoised jointly.
    fn block_len(&self) -> usize;

    /// Denoises one block of pseudo-data rows (`block_len x M`) into `out` and
    /// returns the sum of the per-row mean Wirtinger derivatives.
    fn denoise_block(
        &self,
        pseudo: ArrayView2<'_, Complex64>,
        beta: f64,
        mu2: f64,
        out: ArrayViewMut2<'_, Complex64>,
    ) -> f64;
}

/// Row-wise MMSE denoiser with column activity prior `eps`.
#[derive(Debug, Clone, Copy)]
pub struct MmseDenoiser {
    pub eps: f64,
}

impl BlockDenoiser for MmseDenoiser {
    fn block_len(&self) -> usize {
        1
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
        let mut div = 0.0;
        for (x, mut o) in pseudo.outer_iter().zip(out.outer_iter_mut()) {
            let stats = row_stats(x.iter(), &prior);
            let scale = stats.v * prior.gain();
            Zip::from(&mut o).and(&x).for_each(|o, z| *o = z * scale);
            div += stats.divergence(&prior, m);
        }
        div
    }
}

/// How the Onsager divergence is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnsagerMode {
    /// Closed-form divergence returned by the denoiser.
    ClosedForm,
    /// Randomised probe `Re p^H (eta(x + d p) - eta(x)) / d` (cross-check).
    Probe { seed: u64 },
    /// No correction term (plain iterative thresholding).
    Off,
}

/// How the effective noise level `mu2` is updated between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// `||R||_F^2 / (tau_p M)`.
    Empirical,
    /// Monte-Carlo state evolution with `samples` draws per step.
    StateEvolution { samples: usize, seed: u64 },
}

/// Activity decision rule applied to the final pseudo-data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    /// Active iff the posterior `v >= 1/2`.
    Posterior,
    /// Active iff `||x||^2 > zeta`; `None` uses `M sqrt(mu2 (beta + mu2))`.
    Energy { zeta: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmpOptions {
    pub max_iters: usize,
    /// Stop once `||R_{t+1} - R_t|| / ||R_t||` falls below this.
    pub tol: f64,
    pub noise_mode: NoiseMode,
    pub onsager: OnsagerMode,
    pub decision: Decision,
    /// Weight `d` of the previous iterate in `X <- d X_old + (1 - d) X_new`
    /// (and likewise for `R`) from the second step on. `0` is the undamped
    /// recursion.
    pub damping: f64,
}

impl Default for AmpOptions {
    fn default() -> Self {
        AmpOptions {
            max_iters: 500,
            tol: 1e-6,
            noise_mode: NoiseMode::Empirical,
            onsager: OnsagerMode::ClosedForm,
            decision: Decision::Posterior,
            damping: DEFAULT_DAMPING,
        }
    }
}

/// Undamped AMP oscillates at small `N` when the gains span several orders
/// of magnitude; blending each step with the previous iterate keeps it on track.
pub const DEFAULT_DAMPING: f64 = 0.7;

/// Iterate of the AMP recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpState {
    /// `n_columns x M` estimate of the normalised effective channels.
    pub estimates: Array2<Complex64>,
    /// `tau_p x M` residual.
    pub residual: Array2<Complex64>,
    /// Effective noise level for the next denoising step.
    pub noise_state: f64,
    pub iteration: usize,
    /// Pseudo-data that produced `estimates` (zeros before the first step).
    pub pseudo: Array2<Complex64>,
    /// Noise level that produced `estimates`.
    pub pseudo_mu2: f64,
}

/// Context for [`update_noise_state`].
#[derive(Debug, Clone, Copy)]
pub struct NoiseContext<'a> {
    /// `sigma^2 / (rho_max tau_p)`.
    pub base_noise: f64,
    /// `n_columns / tau_p`.
    pub ratio: f64,
    pub eps: f64,
    pub antennas: usize,
    /// Effective gains the state-evolution expectation averages over.
    pub betas: &'a [f64],
    pub floor: f64,
    /// Noise level of the previous step (state evolution input).
    pub previous: f64,
    pub iteration: usize,
}

/// New effective noise level from the residual or from state evolution.
pub fn update_noise_state(residual: &Array2<Complex64>, mode: NoiseMode, ctx: &NoiseContext<'_>) -> f64 {
    let mu2 = match mode {
        NoiseMode::Empirical => {
            let fro2: f64 = residual.iter().map(|z| z.norm_sqr()).sum();
            fro2 / residual.len().max(1) as f64
        }
        NoiseMode::StateEvolution { samples, seed } => {
            let mut rng = trial_rng(seed, 0x5e, ctx.iteration as u64);
            ctx.base_noise
                + ctx.ratio
                    * se_error_energy(ctx.betas, ctx.eps, ctx.previous.max(ctx.floor), ctx.antennas, samples, &mut rng)
        }
    };
    mu2.max(ctx.floor)
}

/// Monte-Carlo estimate of `E ||eta(x + mu w) - x||^2 / M` under the
/// Bernoulli-Gaussian prior, with `beta` drawn uniformly from `betas`.
pub fn se_error_energy(
    betas: &[f64],
    eps: f64,
    mu2: f64,
    m: usize,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut x = vec![Complex64::new(0.0, 0.0); m];
    let mut noisy = vec![Complex64::new(0.0, 0.0); m];
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let mut acc = 0.0;
    for _ in 0..samples {
        let beta = betas[rng.random_range(0..betas.len())];
        let active = rng.random_bool(eps.clamp(0.0, 1.0));
        for (xi, ni) in x.iter_mut().zip(noisy.iter_mut()) {
            *xi = if active { complex_normal(rng, beta) } else { Complex64::new(0.0, 0.0) };
            *ni = *xi + complex_normal(rng, mu2);
        }
        denoise_row(&noisy, &RowPrior { beta, eps, mu2 }, &mut out);
        acc += out.iter().zip(&x).map(|(o, xi)| (o - xi).norm_sqr()).sum::<f64>();
    }
    acc / (samples as f64 * m as f64)
}

/// State-evolution trajectory `mu2_0, mu2_1, ...` for `iters` steps.
pub fn state_evolution_trace(
    betas: &[f64],
    eps: f64,
    base_noise: f64,
    ratio: f64,
    m: usize,
    iters: usize,
    samples: usize,
    seed: u64,
) -> Vec<f64> {
    let mean_beta = betas.iter().sum::<f64>() / betas.len() as f64;
    let mut mu2 = base_noise + ratio * eps * mean_beta;
    let mut trace = vec![mu2];
    for t in 0..iters {
        let mut rng = trial_rng(seed, 0x5e, t as u64);
        mu2 = base_noise + ratio * se_error_energy(betas, eps, mu2, m, samples, &mut rng);
        trace.push(mu2);
    }
    trace
}

/// Growth of the residual norm that aborts the recursion.
pub const DIVERGENCE_GROWTH: f64 = 1e6;

/// The fixed parts of one AMP recovery problem.
#[derive(Debug, Clone)]
pub struct AmpProblem<'a> {
    pub book: &'a PilotBook,
    phi_h: Array2<Complex64>,
    /// Normalised observation `Y / sqrt(tau_p rho_max)`.
    pub y: Array2<Complex64>,
    /// Effective gain per device.
    pub device_betas: Vec<f64>,
    /// Effective gain per column.
    pub column_betas: Vec<f64>,
    /// Activity prior of a single column.
    pub eps: f64,
    pub base_noise: f64,
    pub floor: f64,
    y_norm: f64,
}

impl<'a> AmpProblem<'a> {
    /// Builds the problem from a received block. `eps` is the per-column
    /// activity prior.
    pub fn new(
        received: &ReceivedBlock,
        book: &'a PilotBook,
        profile: &LargeScaleProfile,
        eps: f64,
        config: &SystemConfig,
    ) -> Result<Self> {
        let powers = apply_power_control(profile, config);
        let device_betas: Vec<f64> = profile
            .betas
            .iter()
            .zip(&powers)
            .map(|(b, p)| b * p / config.max_ul_power)
            .collect();
        Self::with_effective_gains(received, book, device_betas, eps, config)
    }

    pub fn with_effective_gains(
        received: &ReceivedBlock,
        book: &'a PilotBook,
        device_betas: Vec<f64>,
        eps: f64,
        config: &SystemConfig,
    ) -> Result<Self> {
        let tau = book.pilot_len();
        if received.pilot_obs.nrows() != tau || device_betas.len() != book.n_devices() {
            return Err(Error::Shape(format!(
                "observation has {} rows, book {}x{} for {} devices, {} gains",
                received.pilot_obs.nrows(),
                tau,
                book.n_columns(),
                book.n_devices(),
                device_betas.len()
            )));
        }
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::OutOfRange(format!("activity prior {eps}")));
        }
        let scale = (tau as f64 * config.max_ul_power).sqrt().recip();
        let y = received.pilot_obs.mapv(|z| z * scale);
        let y_norm = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let phi_h = book.matrix.t().mapv(|z| z.conj());
        let column_betas = (0..book.n_columns())
            .map(|c| device_betas[c / book.columns_per_device])
            .collect();
        let base_noise = config.noise_power / (config.max_ul_power * tau as f64);
        Ok(AmpProblem {
            book,
            phi_h,
            y,
            device_betas,
            column_betas,
            eps,
            base_noise,
            floor: 1e-15 * base_noise,
            y_norm,
        })
    }

    pub fn n_columns(&self) -> usize {
        self.book.n_columns()
    }

    pub fn antennas(&self) -> usize {
        self.y.ncols()
    }

    /// `n_columns / tau_p`.
    pub fn ratio(&self) -> f64 {
        self.n_columns() as f64 / self.book.pilot_len() as f64
    }

    /// `X = 0`, `R = y`, `mu2_0 = sigma^2/(rho tau_p) + (n_cols/tau_p) eps E[beta]`.
    pub fn initial_state(&self) -> AmpState {
        let cols = self.n_columns();
        let m = self.antennas();
        let mean_beta = self.column_betas.iter().sum::<f64>() / cols as f64;
        AmpState {
            estimates: Array2::zeros((cols, m)),
            residual: self.y.clone(),
            noise_state: (self.base_noise + self.ratio() * self.eps * mean_beta).max(self.floor),
            iteration: 0,
            pseudo: Array2::zeros((cols, m)),
            pseudo_mu2: f64::NAN,
        }
    }

    fn noise_context(&self, previous: f64, iteration: usize) -> NoiseContext<'_> {
        NoiseContext {
            base_noise: self.base_noise,
            ratio: self.ratio(),
            eps: self.eps,
            antennas: self.antennas(),
            betas: &self.column_betas,
            floor: self.floor,
            previous,
            iteration,
        }
    }

    /// One AMP step: denoise the pseudo-data, then form the Onsager-corrected
    /// residual and the new noise level.
    pub fn iterate<D: BlockDenoiser + ?Sized>(
        &self,
        state: &AmpState,
        denoiser: &D,
        options: &AmpOptions,
    ) -> Result<AmpState> {
        let cols = self.n_columns();
        let block = denoiser.block_len();
        if state.estimates.dim() != (cols, self.antennas()) || state.residual.dim() != self.y.dim() {
            return Err(Error::Shape("AMP state does not match the problem".into()));
        }
        if !(0.0..1.0).contains(&options.damping) {
            return Err(Error::OutOfRange(format!("damping {}", options.damping)));
        }
        if !cols.is_multiple_of(block) || block != self.book.columns_per_device && block != 1 {
            return Err(Error::Shape(format!(
                "denoiser block {block} incompatible with {} columns per device",
                self.book.columns_per_device
            )));
        }
        let mu2 = state.noise_state;
        let mut pseudo = self.phi_h.dot(&state.residual);
        pseudo += &state.estimates;

        let mut estimates = Array2::<Complex64>::zeros(pseudo.dim());
        let mut div_sum = 0.0;
        for (b, (p, o)) in pseudo
            .axis_chunks_iter(Axis(0), block)
            .zip(estimates.axis_chunks_iter_mut(Axis(0), block))
            .enumerate()
        {
            let beta = self.column_betas[b * block];
            div_sum += denoiser.denoise_block(p, beta, mu2, o);
        }
        let div_mean = match options.onsager {
            OnsagerMode::ClosedForm => div_sum / cols as f64,
            OnsagerMode::Off => 0.0,
            OnsagerMode::Probe { seed } => {
                self.probe_divergence(&pseudo, &estimates, denoiser, mu2, seed, state.iteration)
            }
        };

        let mut residual = self.y.clone();
        ndarray::linalg::general_mat_mul(
            Complex64::new(-1.0, 0.0),
            &self.book.matrix,
            &estimates,
            Complex64::new(1.0, 0.0),
            &mut residual,
        );
        let onsager = Complex64::new(self.ratio() * div_mean, 0.0);
        if onsager.re != 0.0 {
            residual.scaled_add(onsager, &state.residual);
        }
        let d = options.damping;
        if d > 0.0 && state.iteration > 0 {
            let keep = Complex64::new(d, 0.0);
            let take = Complex64::new(1.0 - d, 0.0);
            Zip::from(&mut estimates).and(&state.estimates).for_each(|n, o| *n = keep * o + take * *n);
            Zip::from(&mut residual).and(&state.residual).for_each(|n, o| *n = keep * o + take * *n);
        }

        let fro = residual.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !fro.is_finite() || (self.y_norm > 0.0 && fro > DIVERGENCE_GROWTH * self.y_norm) {
            return Err(Error::Diverged {
                iteration: state.iteration + 1,
                growth: fro / self.y_norm,
            });
        }
        let noise_state = update_noise_state(
            &residual,
            options.noise_mode,
            &self.noise_context(mu2, state.iteration),
        );
        Ok(AmpState {
            estimates,
            residual,
            noise_state,
            iteration: state.iteration + 1,
            pseudo,
            pseudo_mu2: mu2,
        })
    }

    fn probe_divergence<D: BlockDenoiser + ?Sized>(
        &self,
        pseudo: &Array2<Complex64>,
        estimates: &Array2<Complex64>,
        denoiser: &D,
        mu2: f64,
        seed: u64,
        iteration: usize,
    ) -> f64 {
        let mut rng = trial_rng(seed, 0x0b5e, iteration as u64);
        let block = denoiser.block_len();
        let m = self.antennas();
        let step = 1e-6 * mu2.sqrt();
        let mut total = 0.0;
        let mut out = Array2::<Complex64>::zeros((block, m));
        for b in 0..self.n_columns() / block {
            let rows = s![b * block..(b + 1) * block, ..];
            let probe = Array2::from_shape_simple_fn((block, m), || complex_normal(&mut rng, 1.0));
            let shifted = &pseudo.slice(rows) + &probe.mapv(|z| z * step);
            denoiser.denoise_block(shifted.view(), self.column_betas[b * block], mu2, out.view_mut());
            let base = estimates.slice(rows);
            let proj: Complex64 = Zip::from(&probe)
                .and(&out)
                .and(&base)
                .fold(Complex64::new(0.0, 0.0), |acc, p, o, e| acc + p.conj() * (o - e));
            total += proj.re / (step * m as f64);
        }
        total / self.n_columns() as f64
    }

    /// Runs from the initial state until convergence or `max_iters`.
    pub fn run<D: BlockDenoiser + ?Sized>(&self, denoiser: &D, options: &AmpOptions) -> Result<AmpRun> {
        let mut state = self.initial_state();
        let mut noise_trace = vec![state.noise_state];
        let mut residual_trace = vec![self.y_norm];
        for _ in 0..options.max_iters {
            let next = self.iterate(&state, denoiser, options)?;
            let prev_norm = residual_trace.last().copied().unwrap_or(0.0);
            let change = (&next.residual - &state.residual)
                .iter()
                .map(|z| z.norm_sqr())
                .sum::<f64>()
                .sqrt();
            let fro = next.residual.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            noise_trace.push(next.noise_state);
            residual_trace.push(fro);
            state = next;
            if prev_norm == 0.0 || change <= options.tol * prev_norm {
                break;
            }
        }
        Ok(AmpRun { state, noise_trace, residual_trace })
    }
}

/// Final state of an AMP run plus per-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct AmpRun {
    pub state: AmpState,
    /// `mu2` before each step (index 0 is the initial level).
    pub noise_trace: Vec<f64>,
    /// `||R_t||_F` (index 0 is `||y||_F`).
    pub residual_trace: Vec<f64>,
}

impl AmpRun {
    /// Writes `(iteration, residual_fro, mu2)` rows.
    pub fn write_diagnostics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Parse(e.to_string());
        wr.write_record(["iteration", "residual_fro", "mu2"]).map_err(io)?;
        for (t, (r, mu2)) in self.residual_trace.iter().zip(&self.noise_trace).enumerate() {
            wr.write_record([t.to_string(), format!("{r:e}"), format!("{mu2:e}")]).map_err(io)?;
        }
        wr.flush().map_err(|source| Error::Io { path: "<diagnostics>".into(), source })?;
        Ok(())
    }
}

/// Energy threshold `M sqrt(mu2 (beta + mu2))`, the geometric midpoint of the
/// admissible interval `(M mu2, M (beta + mu2))`.
pub fn default_energy_threshold(m: usize, beta: f64, mu2: f64) -> f64 {
    m as f64 * (mu2 * (beta + mu2)).sqrt()
}

/// Activity decision for one pseudo-data row.
pub fn decide_activity(x: &[Complex64], beta: f64, eps: f64, mu2: f64, decision: Decision) -> Result<bool> {
    check_finite(x)?;
    let prior = RowPrior::new(beta, eps, mu2)?;
    Ok(decide_row(energy(x), x.len(), &prior, decision))
}

pub(crate) fn decide_row(energy: f64, m: usize, prior: &RowPrior, decision: Decision) -> bool {
    match decision {
        Decision::Posterior => prior.log_inactive_odds(energy, m) <= 0.0,
        Decision::Energy { zeta } => {
            let lo = m as f64 * prior.mu2;
            let hi = m as f64 * (prior.beta + prior.mu2);
            let zeta = zeta.unwrap_or_else(|| default_energy_threshold(m, prior.beta, prior.mu2));
            if !(zeta > lo && zeta < hi) {
                warn!("energy threshold {zeta:e} outside ({lo:e}, {hi:e})");
            }
            energy > zeta
        }
    }
}

/// Result of [`amp_detect`].
#[derive(Debug, Clone)]
pub struct AmpOutput {
    /// Final `X` estimate (normalised domain, `n_columns x M`).
    pub estimates: Array2<Complex64>,
    /// Pseudo-data of the last step, on which decisions are taken.
    pub pseudo: Array2<Complex64>,
    /// Noise level of the last step.
    pub mu2: f64,
    /// Posterior activity `v` of every column.
    pub activity_stats: Vec<f64>,
    /// Columns declared active, ascending.
    pub support: Vec<usize>,
    pub noise_state_trace: Vec<f64>,
    pub residual_trace: Vec<f64>,
    pub iterations: usize,
    pub column_betas: Vec<f64>,
}

impl AmpOutput {
    /// Estimate of `g` for the device owning `column`, undoing the power
    /// normalisation.
    pub fn channel_estimate(&self, column: usize, power: f64, config: &SystemConfig) -> Vec<Complex64> {
        let s = (config.max_ul_power / power).sqrt();
        self.estimates.row(column).iter().map(|z| z * s).collect()
    }
}

/// Runs AMP from `X = 0` and declares each column active per `options.decision`.
/// Each column is treated as its own device with activity prior `eps`.
pub fn amp_detect(
    received: &ReceivedBlock,
    book: &PilotBook,
    profile: &LargeScaleProfile,
    eps: f64,
    config: &SystemConfig,
    options: &AmpOptions,
) -> Result<AmpOutput> {
    let problem = AmpProblem::new(received, book, profile, eps, config)?;
    let run = problem.run(&MmseDenoiser { eps }, options)?;
    Ok(finish(&problem, run, eps, options.decision))
}

pub(crate) fn finish(problem: &AmpProblem<'_>, run: AmpRun, eps: f64, decision: Decision) -> AmpOutput {
    let AmpRun { state, noise_trace, residual_trace } = run;
    let mu2 = if state.pseudo_mu2.is_nan() { state.noise_state } else { state.pseudo_mu2 };
    let m = problem.antennas();
    let mut activity_stats = Vec::with_capacity(problem.n_columns());
    let mut support = Vec::new();
    for (c, row) in state.pseudo.outer_iter().enumerate() {
        let prior = RowPrior { beta: problem.column_betas[c], eps, mu2 };
        let e: f64 = row.iter().map(|z| z.norm_sqr()).sum();
        activity_stats.push(prior.posterior_pair(e, m).0);
        if decide_row(e, m, &prior, decision) {
            support.push(c);
        }
    }
    AmpOutput {
        estimates: state.estimates,
        pseudo: state.pseudo,
        mu2,
        activity_stats,
        support,
        noise_state_trace: noise_trace,
        residual_trace,
        iterations: state.iteration,
        column_betas: problem.column_betas.clone(),
    }
}
