//! Physical scenario: cell geometry, pilot books, power control, device
//! activity and the received pilot-phase signal.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::complex_normal;

/// Pilot alphabet used to draw the pilot book.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PilotKind {
    /// i.i.d. QPSK entries `(±1±j)/sqrt(2 tau_p)`.
    Bernoulli,
    /// i.i.d. CN(0, 1/tau_p) entries.
    Gaussian,
}

/// Uplink power policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerPolicy {
    /// Every device transmits at the maximum power.
    Npc,
    /// Statistical channel inversion: `rho_k = rho_max * beta_min / beta_k`.
    Sci,
}

impl FromStr for PilotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" => Ok(PilotKind::Bernoulli),
            "gaussian" => Ok(PilotKind::Gaussian),
            _ => Err(Error::Unknown { kind: "pilot kind", name: s.to_string() }),
        }
    }
}

impl FromStr for PowerPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "npc" => Ok(PowerPolicy::Npc),
            "sci" => Ok(PowerPolicy::Sci),
            _ => Err(Error::Unknown { kind: "power policy", name: s.to_string() }),
        }
    }
}

impl fmt::Display for PilotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PilotKind::Bernoulli => "bernoulli",
            PilotKind::Gaussian => "gaussian",
        })
    }
}

impl fmt::Display for PowerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PowerPolicy::Npc => "npc",
            PowerPolicy::Sci => "sci",
        })
    }
}

/// All scalar parameters of one scenario. Powers in W, distances in km.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_devices: usize,
    pub n_antennas: usize,
    pub pilot_len: usize,
    pub coherence_len: usize,
    pub activity_prob: f64,
    pub max_ul_power: f64,
    pub noise_power: f64,
    pub info_bits: u32,
    pub cell_edge: f64,
    pub min_distance: f64,
    pub pilot_kind: PilotKind,
    pub power_policy: PowerPolicy,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_devices: 200,
            n_antennas: 20,
            pilot_len: 10,
            coherence_len: 200,
            activity_prob: 0.05,
            max_ul_power: 0.1,
            noise_power: 2e-13,
            info_bits: 0,
            cell_edge: 0.25,
            min_distance: 0.025,
            pilot_kind: PilotKind::Bernoulli,
            power_policy: PowerPolicy::Npc,
        }
    }
}

/// Field names accepted by the key-value format and by sweeps.
pub const CONFIG_KEYS: [&str; 12] = [
    "n_devices",
    "n_antennas",
    "pilot_len",
    "coherence_len",
    "activity_prob",
    "max_ul_power",
    "noise_power",
    "info_bits",
    "cell_edge",
    "min_distance",
    "pilot_kind",
    "power_policy",
];

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_devices == 0 || self.n_antennas == 0 || self.pilot_len == 0 {
            return bad("n_devices, n_antennas and pilot_len must be positive".into());
        }
        if self.pilot_len > self.coherence_len {
            return bad(format!(
                "pilot_len {} exceeds coherence_len {}",
                self.pilot_len, self.coherence_len
            ));
        }
        if !(self.activity_prob > 0.0 && self.activity_prob <= 1.0) {
            return bad(format!("activity_prob {} not in (0, 1]", self.activity_prob));
        }
        if !(self.max_ul_power > 0.0 && self.max_ul_power.is_finite()) {
            return bad("max_ul_power must be positive".into());
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return bad("noise_power must be positive".into());
        }
        if !(self.min_distance >= 0.0 && self.min_distance < 0.5 * self.cell_edge) {
            return bad(format!(
                "min_distance {} must be below half the cell edge {}",
                self.min_distance, self.cell_edge
            ));
        }
        if self.info_bits > 16 {
            return bad(format!("info_bits {} too large", self.info_bits));
        }
        Ok(())
    }

    /// Pilot columns owned by each device (`2^r`).
    pub fn columns_per_device(&self) -> usize {
        1usize << self.info_bits
    }

    /// Receiver-side scale: noise variance of the normalised observation,
    /// `sigma^2 / (rho_max tau_p)`.
    pub fn normalized_noise(&self) -> f64 {
        self.noise_power / (self.max_ul_power * self.pilot_len as f64)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| Error::Parse(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "n_devices" => self.n_devices = num(key, value)?,
            "n_antennas" => self.n_antennas = num(key, value)?,
            "pilot_len" => self.pilot_len = num(key, value)?,
            "coherence_len" => self.coherence_len = num(key, value)?,
            "activity_prob" => self.activity_prob = num(key, value)?,
            "max_ul_power" => self.max_ul_power = num(key, value)?,
            "noise_power" => self.noise_power = num(key, value)?,
            "info_bits" => self.info_bits = num(key, value)?,
            "cell_edge" => self.cell_edge = num(key, value)?,
            "min_distance" => self.min_distance = num(key, value)?,
            "pilot_kind" => self.pilot_kind = value.parse()?,
            "power_policy" => self.power_policy = value.parse()?,
            _ => return Err(Error::Unknown { kind: "config key", name: key.to_string() }),
        }
        Ok(())
    }

    /// Sets a numeric field from a sweep value. Integer fields must receive
    /// integral values.
    pub fn set_numeric(&mut self, key: &str, value: f64) -> Result<()> {
        match key {
            "pilot_kind" | "power_policy" => Err(Error::InvalidConfig(format!(
                "`{key}` is not a numeric field"
            ))),
            "n_devices" | "n_antennas" | "pilot_len" | "coherence_len" | "info_bits" => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "`{key}` needs a non-negative integer, got {value}"
                    )));
                }
                self.set(key, &format!("{}", value as u64))
            }
            _ => self.set(key, &format!("{value:e}")),
        }
    }

    /// Parses the flat `key = value` format. Blank lines and `#` comments are
    /// ignored; missing keys keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = SystemConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_kv_str(&text)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "n_devices = {}\nn_antennas = {}\npilot_len = {}\ncoherence_len = {}\n\
             activity_prob = {}\nmax_ul_power = {:e}\nnoise_power = {:e}\ninfo_bits = {}\n\
             cell_edge = {}\nmin_distance = {}\npilot_kind = {}\npower_policy = {}\n",
            self.n_devices,
            self.n_antennas,
            self.pilot_len,
            self.coherence_len,
            self.activity_prob,
            self.max_ul_power,
            self.noise_power,
            self.info_bits,
            self.cell_edge,
            self.min_distance,
            self.pilot_kind,
            self.power_policy,
        )
    }
}

/// Path and penetration loss in dB at distance `d_km`.
pub fn path_loss_db(d_km: f64) -> f64 {
    130.0 + 37.6 * d_km.log10()
}

/// Linear large-scale gain at distance `d_km`.
pub fn large_scale_gain(d_km: f64) -> f64 {
    10f64.powf(-path_loss_db(d_km) / 10.0)
}

/// Large-scale fading of every device.
#[derive(Debug, Clone, PartialEq)]
pub struct LargeScaleProfile {
    pub betas: Vec<f64>,
    pub positions: Vec<(f64, f64)>,
    pub beta_min: f64,
}

impl LargeScaleProfile {
    /// Profile from explicit gains (no geometry).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidConfig("large-scale gains must be positive".into()));
        }
        let beta_min = betas.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(LargeScaleProfile { positions: vec![(0.0, 0.0); betas.len()], betas, beta_min })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// Drops devices uniformly over a square cell of side `cell_edge` centred on
/// the base station, rejecting points closer than `min_distance`.
pub fn generate_geometry<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> LargeScaleProfile {
    let half = 0.5 * config.cell_edge;
    let mut positions = Vec::with_capacity(config.n_devices);
    let mut betas = Vec::with_capacity(config.n_devices);
    while positions.len() < config.n_devices {
        let x = rng.random_range(-half..half);
        let y = rng.random_range(-half..half);
        let d = x.hypot(y);
        if d < config.min_distance || d == 0.0 {
            continue;
        }
        positions.push((x, y));
        betas.push(large_scale_gain(d));
    }
    let beta_min = betas.iter().copied().fold(f64::INFINITY, f64::min);
    LargeScaleProfile { betas, positions, beta_min }
}

/// Pilot matrix with `columns_per_device` contiguous columns per device.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotBook {
    pub matrix: Array2<Complex64>,
    pub columns_per_device: usize,
    /// `None` for books built from an explicit matrix.
    pub kind: Option<PilotKind>,
}

impl PilotBook {
    pub fn from_matrix(matrix: Array2<Complex64>, columns_per_device: usize) -> Result<Self> {
        if columns_per_device == 0 || !matrix.ncols().is_multiple_of(columns_per_device) {
            return Err(Error::Shape(format!(
                "{} columns do not split into blocks of {}",
                matrix.ncols(),
                columns_per_device
            )));
        }
        Ok(PilotBook { matrix, columns_per_device, kind: None })
    }

    pub fn pilot_len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn n_devices(&self) -> usize {
        self.matrix.ncols() / self.columns_per_device
    }

    pub fn column(&self, c: usize) -> ArrayView1<'_, Complex64> {
        self.matrix.column(c)
    }

    /// Columns owned by `device`.
    pub fn device_columns(&self, device: usize) -> Range<usize> {
        device * self.columns_per_device..(device + 1) * self.columns_per_device
    }

    /// `phi_a^H phi_b`.
    pub fn inner(&self, a: usize, b: usize) -> Complex64 {
        self.matrix
            .column(a)
            .iter()
            .zip(self.matrix.column(b).iter())
            .map(|(x, y)| x.conj() * y)
            .sum()
    }
}

/// Draws the pilot book for `config` (`N * 2^r` columns of length `pilot_len`).
pub fn generate_pilots<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> PilotBook {
    let tau = config.pilot_len;
    let per_device = config.columns_per_device();
    let cols = config.n_devices * per_device;
    let matrix = match config.pilot_kind {
        PilotKind::Bernoulli => {
            let a = (2.0 * tau as f64).sqrt().recip();
            Array2::from_shape_simple_fn((tau, cols), || {
                let re = if rng.random::<bool>() { a } else { -a };
                let im = if rng.random::<bool>() { a } else { -a };
                Complex64::new(re, im)
            })
        }
        PilotKind::Gaussian => {
            let var = 1.0 / tau as f64;
            Array2::from_shape_simple_fn((tau, cols), || complex_normal(rng, var))
        }
    };
    PilotBook { matrix, columns_per_device: per_device, kind: Some(config.pilot_kind) }
}

/// Per-device transmit powers in W.
pub fn apply_power_control(profile: &LargeScaleProfile, config: &SystemConfig) -> Vec<f64> {
    match config.power_policy {
        PowerPolicy::Npc => vec![config.max_ul_power; profile.len()],
        PowerPolicy::Sci => profile
            .betas
            .iter()
            .map(|b| config.max_ul_power * profile.beta_min / b)
            .collect(),
    }
}

/// How the set of active devices is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivityModel {
    /// Each device active independently with probability `activity_prob`.
    #[default]
    Bernoulli,
    /// Exactly `k` devices active, chosen uniformly (variance-reduced tests).
    FixedCount(usize),
}

/// Activity flags and embedded message indices (meaningful only when active).
pub fn sample_activity<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> (Vec<bool>, Vec<usize>) {
    sample_activity_with(config, ActivityModel::Bernoulli, rng)
}

pub fn sample_activity_with<R: Rng + ?Sized>(
    config: &SystemConfig,
    model: ActivityModel,
    rng: &mut R,
) -> (Vec<bool>, Vec<usize>) {
    let n = config.n_devices;
    let per_device = config.columns_per_device();
    let activity = match model {
        ActivityModel::Bernoulli => {
            let p = config.activity_prob.clamp(0.0, 1.0);
            (0..n).map(|_| rng.random_bool(p)).collect()
        }
        ActivityModel::FixedCount(k) => {
            let mut flags = vec![false; n];
            for idx in rand::seq::index::sample(rng, n, k.min(n)) {
                flags[idx] = true;
            }
            flags
        }
    };
    let messages = (0..n).map(|_| rng.random_range(0..per_device)).collect();
    (activity, messages)
}

/// Small-scale fading, activity, messages and powers of one coherence block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `N x M`, row `n` is `h_n` with CN(0, 1) entries.
    pub small_scale: Array2<Complex64>,
    pub activity: Vec<bool>,
    pub messages: Vec<usize>,
    pub powers: Vec<f64>,
}

impl ChannelRealization {
    pub fn sample<R: Rng + ?Sized>(
        config: &SystemConfig,
        profile: &LargeScaleProfile,
        model: ActivityModel,
        rng: &mut R,
    ) -> Self {
        let (activity, messages) = sample_activity_with(config, model, rng);
        let small_scale = Array2::from_shape_simple_fn((config.n_devices, config.n_antennas), || {
            complex_normal(rng, 1.0)
        });
        ChannelRealization {
            small_scale,
            activity,
            messages,
            powers: apply_power_control(profile, config),
        }
    }

    pub fn active_devices(&self) -> Vec<usize> {
        self.activity
            .iter()
            .enumerate()
            .filter_map(|(k, a)| a.then_some(k))
            .collect()
    }

    /// `g_k = sqrt(beta_k) h_k`.
    pub fn channel(&self, profile: &LargeScaleProfile, k: usize) -> Vec<Complex64> {
        let s = profile.betas[k].sqrt();
        self.small_scale.row(k).iter().map(|h| h * s).collect()
    }

    /// Column of the book that device `k` transmits.
    pub fn selected_column(&self, book: &PilotBook, k: usize) -> usize {
        k * book.columns_per_device + self.messages[k]
    }
}

/// Noisy observations of one coherence block.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedBlock {
    /// `tau_p x M`.
    pub pilot_obs: Array2<Complex64>,
    /// `(tau - tau_p) x M`, present for coherent payloads.
    pub data_obs: Option<Array2<Complex64>>,
}

/// `Y = sum_k sqrt(tau_p rho_k) phi_{c(k)} g_k^T + Z` over active devices.
pub fn synthesize_received<R: Rng + ?Sized>(
    book: &PilotBook,
    profile: &LargeScaleProfile,
    real: &ChannelRealization,
    config: &SystemConfig,
    rng: &mut R,
) -> Result<ReceivedBlock> {
    synthesize_received_with_noise(book, profile, real, config, config.noise_power, rng)
}

/// As [`synthesize_received`] with an explicit noise variance (0 allowed).
pub fn synthesize_received_with_noise<R: Rng + ?Sized>(
    book: &PilotBook,
    profile: &LargeScaleProfile,
    real: &ChannelRealization,
    config: &SystemConfig,
    noise_power: f64,
    rng: &mut R,
) -> Result<ReceivedBlock> {
    let tau = book.pilot_len();
    let m = real.small_scale.ncols();
    let n = real.small_scale.nrows();
    if book.n_devices() != n
        || profile.len() != n
        || real.activity.len() != n
        || real.powers.len() != n
        || tau != config.pilot_len
        || m != config.n_antennas
    {
        return Err(Error::Shape(format!(
            "book {}x{} ({} per device), {} gains, channels {}x{}, config tau_p={} M={}",
            tau,
            book.n_columns(),
            book.columns_per_device,
            profile.len(),
            n,
            m,
            config.pilot_len,
            config.n_antennas
        )));
    }
    let mut y = Array2::<Complex64>::zeros((tau, m));
    for k in real.active_devices() {
        let col = real.selected_column(book, k);
        if real.messages[k] >= book.columns_per_device {
            return Err(Error::OutOfRange(format!("message {} of device {k}", real.messages[k])));
        }
        let amp = (tau as f64 * real.powers[k] * profile.betas[k]).sqrt();
        let phi = book.column(col);
        let h = real.small_scale.row(k);
        for (i, p) in phi.iter().enumerate() {
            let scaled = p * amp;
            for (yv, hv) in y.row_mut(i).iter_mut().zip(h.iter()) {
                *yv += scaled * hv;
            }
        }
    }
    if noise_power > 0.0 {
        y.mapv_inplace(|v| v + complex_normal(rng, noise_power));
    }
    Ok(ReceivedBlock { pilot_obs: y, data_obs: None })
}
