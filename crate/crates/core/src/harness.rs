//! Monte-Carlo runner: figure presets, per-trial seeded streams, metric
//! aggregation and CSV/JSON export.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amp::{amp_detect, AmpOptions};
use crate::coherent::{coherent_payload_trial, rate_trial, EstimatorKind, LinearCode, PayloadCounts, RateSums};
use crate::error::{Error, Result};
use crate::model::{
    generate_geometry, generate_pilots, synthesize_received, ActivityModel, ChannelRealization, PowerPolicy,
    SystemConfig, CONFIG_KEYS,
};
use crate::noncoh::{noncoherent_detect, ExtendedBookView, Gate, NoncoherentDetector, SigmoidGate};
use crate::rng::trial_rng;

/// Detector or transmission scheme evaluated by one variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    /// AMP with one pilot per device (activity only).
    Amp,
    /// AMP on the extended book, every pilot a fictitious device.
    AmpEib,
    /// Modified AMP with the given sigmoid sharpness.
    Mamp { sharpness: f64 },
    /// Pilot phase plus a coded BPSK payload.
    Coherent { code: LinearCode, estimator: EstimatorKind },
    /// Pooled ergodic rate of every estimator, device detection assumed.
    Rate,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::Amp => f.write_str("amp"),
            Algorithm::AmpEib => f.write_str("amp-eib"),
            Algorithm::Mamp { .. } => f.write_str("mamp"),
            Algorithm::Coherent { code, estimator } => write!(f, "coherent-{code}-{estimator}"),
            Algorithm::Rate => f.write_str("rate"),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    /// `amp`, `amp-eib`, `mamp`, `mamp:<c>`, `rate`, or
    /// `coherent:<code>[:<estimator>]` (estimator defaults to `amp`).
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let head = parts.next().unwrap_or("").to_ascii_lowercase();
        let alg = match head.as_str() {
            "amp" => Algorithm::Amp,
            "amp-eib" | "ampeib" | "eib" => Algorithm::AmpEib,
            "mamp" | "m-amp" => {
                let sharpness = match parts.next() {
                    Some(c) => c.parse().map_err(|_| Error::Parse(format!("bad sharpness `{c}`")))?,
                    None => crate::noncoh::DEFAULT_SHARPNESS,
                };
                SigmoidGate::new(sharpness)?;
                Algorithm::Mamp { sharpness }
            }
            "rate" => Algorithm::Rate,
            "coherent" => {
                let code = parts
                    .next()
                    .ok_or_else(|| Error::Parse("coherent needs a code, e.g. coherent:rep11".into()))?
                    .parse()?;
                let estimator = match parts.next() {
                    Some(e) => e.parse()?,
                    None => EstimatorKind::Amp,
                };
                Algorithm::Coherent { code, estimator }
            }
            _ => return Err(Error::Unknown { kind: "algorithm", name: s.to_string() }),
        };
        if parts.next().is_some() {
            return Err(Error::Parse(format!("trailing fields in `{s}`")));
        }
        Ok(alg)
    }
}

/// One curve of a figure: an algorithm plus configuration overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub algorithm: Algorithm,
    /// `(key, value)` pairs applied on top of the scenario config.
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(label: &str, algorithm: Algorithm) -> Self {
        Variant { label: label.to_string(), algorithm, overrides: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.overrides.push((key.to_string(), value.to_string()));
        self
    }
}

/// How many symbols the pilot phase gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotBudget {
    /// Every algorithm uses `pilot_len`.
    PilotLen,
    /// Non-coherent schemes use the whole `coherence_len`; coherent ones
    /// leave room for the payload.
    CoherenceInterval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub config: SystemConfig,
    pub sweep_param: String,
    pub sweep_values: Vec<f64>,
    pub variants: Vec<Variant>,
    pub budget: PilotBudget,
    pub options: AmpOptions,
    pub n_trials: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
        }
        if !CONFIG_KEYS.contains(&self.sweep_param.as_str()) {
            return Err(Error::Unknown { kind: "sweep parameter", name: self.sweep_param.clone() });
        }
        if self.variants.is_empty() {
            return Err(Error::InvalidConfig("scenario has no variants".into()));
        }
        for value in &self.sweep_values {
            for v in &self.variants {
                self.point_config(*value, v)?;
            }
        }
        Ok(())
    }

    /// Configuration seen by variant `v` at sweep value `value`.
    pub fn point_config(&self, value: f64, v: &Variant) -> Result<SystemConfig> {
        let mut cfg = self.config.clone();
        cfg.set_numeric(&self.sweep_param, value)?;
        for (k, val) in &v.overrides {
            cfg.set(k, val)?;
        }
        if self.budget == PilotBudget::CoherenceInterval {
            cfg.pilot_len = match v.algorithm {
                Algorithm::Coherent { code, .. } => cfg
                    .coherence_len
                    .checked_sub(code.length())
                    .filter(|t| *t > 0)
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!("coherence_len {} too short for {code}", cfg.coherence_len))
                    })?,
                _ => cfg.coherence_len,
            };
        }
        if matches!(v.algorithm, Algorithm::Amp | Algorithm::Rate) && cfg.info_bits != 0 {
            return Err(Error::InvalidConfig(format!("variant `{}` needs info_bits = 0", v.label)));
        }
        if let Algorithm::Coherent { code, .. } = v.algorithm {
            if cfg.info_bits as usize != code.dimension() {
                return Err(Error::InvalidConfig(format!(
                    "variant `{}`: info_bits {} but {code} carries {}",
                    v.label,
                    cfg.info_bits,
                    code.dimension()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Figure presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FigureId {
    Fig2,
    Fig3,
    Fig4,
    Fig5,
    Fig6,
    Fig7,
    Fig8,
    Fig9,
    Fig11,
    Fig12,
}

impl FigureId {
    pub const ALL: [FigureId; 10] = [
        FigureId::Fig2,
        FigureId::Fig3,
        FigureId::Fig4,
        FigureId::Fig5,
        FigureId::Fig6,
        FigureId::Fig7,
        FigureId::Fig8,
        FigureId::Fig9,
        FigureId::Fig11,
        FigureId::Fig12,
    ];
}

impl fmt::Display for FigureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            FigureId::Fig2 => 2,
            FigureId::Fig3 => 3,
            FigureId::Fig4 => 4,
            FigureId::Fig5 => 5,
            FigureId::Fig6 => 6,
            FigureId::Fig7 => 7,
            FigureId::Fig8 => 8,
            FigureId::Fig9 => 9,
            FigureId::Fig11 => 11,
            FigureId::Fig12 => 12,
        };
        write!(f, "fig{n}")
    }
}

impl FromStr for FigureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let bare = lower.strip_prefix("fig").unwrap_or(&lower);
        FigureId::ALL
            .into_iter()
            .find(|f| f.to_string().strip_prefix("fig") == Some(bare))
            .ok_or_else(|| Error::Unknown { kind: "figure", name: s.to_string() })
    }
}

/// Default trial counts: detection curves and error-probability curves.
pub const DETECTION_TRIALS: usize = 2000;
pub const ERROR_TRIALS: usize = 5000;

/// Parameterisation of a figure.
pub fn preset(id: FigureId) -> Scenario {
    let base = SystemConfig::default();
    let mamp = Algorithm::Mamp { sharpness: crate::noncoh::DEFAULT_SHARPNESS };
    let sweep = |name: &str, config: SystemConfig, param: &str, values: &[f64], variants: Vec<Variant>| Scenario {
        name: name.to_string(),
        config,
        sweep_param: param.to_string(),
        sweep_values: values.to_vec(),
        variants,
        budget: PilotBudget::PilotLen,
        options: AmpOptions::default(),
        n_trials: DETECTION_TRIALS,
        seed: 2018,
    };
    match id {
        FigureId::Fig2 => sweep(
            "fig2",
            SystemConfig { n_devices: 200, activity_prob: 0.05, n_antennas: 20, ..base },
            "pilot_len",
            &[5.0, 10.0, 15.0, 20.0, 25.0],
            vec![Variant::new("amp", Algorithm::Amp)],
        ),
        FigureId::Fig3 => sweep(
            "fig3",
            SystemConfig { n_devices: 200, activity_prob: 0.05, pilot_len: 10, ..base },
            "n_antennas",
            &[10.0, 20.0, 40.0, 80.0],
            vec![Variant::new("amp", Algorithm::Amp)],
        ),
        FigureId::Fig4 => sweep(
            "fig4",
            SystemConfig { n_devices: 200, activity_prob: 0.05, n_antennas: 20, ..base },
            "pilot_len",
            &[10.0, 15.0, 20.0, 25.0],
            vec![
                Variant::new("bernoulli", Algorithm::Amp).with("pilot_kind", "bernoulli"),
                Variant::new("gaussian", Algorithm::Amp).with("pilot_kind", "gaussian"),
            ],
        ),
        FigureId::Fig5 => sweep(
            "fig5",
            SystemConfig { n_devices: 2000, activity_prob: 0.05, pilot_len: 150, ..base },
            "n_antennas",
            &[20.0, 50.0, 100.0, 200.0],
            vec![Variant::new("amp", Algorithm::Amp)],
        ),
        FigureId::Fig6 => sweep(
            "fig6",
            SystemConfig { n_devices: 200, activity_prob: 0.05, pilot_len: 15, ..base },
            "n_antennas",
            &[10.0, 20.0, 50.0, 100.0],
            vec![
                Variant::new("npc", Algorithm::Amp).with("power_policy", "npc"),
                Variant::new("sci", Algorithm::Amp).with("power_policy", "sci"),
            ],
        ),
        FigureId::Fig7 => sweep(
            "fig7",
            SystemConfig {
                n_devices: 100,
                n_antennas: 50,
                activity_prob: 0.05,
                coherence_len: 500,
                power_policy: PowerPolicy::Sci,
                ..base
            },
            "pilot_len",
            &[10.0, 20.0, 30.0, 40.0, 60.0],
            vec![Variant::new("rate", Algorithm::Rate)],
        ),
        FigureId::Fig8 | FigureId::Fig9 => {
            let n = if id == FigureId::Fig8 { 100 } else { 200 };
            sweep(
                &id.to_string(),
                SystemConfig {
                    n_devices: n,
                    n_antennas: 50,
                    activity_prob: 0.1,
                    info_bits: 1,
                    power_policy: PowerPolicy::Sci,
                    ..base
                },
                "pilot_len",
                &[10.0, 15.0, 20.0, 25.0],
                vec![
                    Variant::new("amp", Algorithm::Amp).with("info_bits", "0"),
                    Variant::new("amp-eib", Algorithm::AmpEib),
                    Variant::new("mamp", mamp),
                ],
            )
        }
        FigureId::Fig11 | FigureId::Fig12 => {
            let (bits, codes): (u32, Vec<LinearCode>) = if id == FigureId::Fig12 {
                (1, vec![LinearCode::Repetition(11), LinearCode::Repetition(15), LinearCode::Repetition(19)])
            } else {
                (4, vec![LinearCode::Hamming74])
            };
            let mut variants = vec![Variant::new("mamp", mamp), Variant::new("amp-eib", Algorithm::AmpEib)];
            variants.extend(codes.into_iter().map(|code| {
                Variant::new(&code.to_string(), Algorithm::Coherent { code, estimator: EstimatorKind::Amp })
            }));
            Scenario {
                budget: PilotBudget::CoherenceInterval,
                n_trials: ERROR_TRIALS,
                ..sweep(
                    &id.to_string(),
                    SystemConfig {
                        n_devices: 100,
                        n_antennas: 20,
                        activity_prob: 0.1,
                        info_bits: bits,
                        power_policy: PowerPolicy::Sci,
                        ..base
                    },
                    "coherence_len",
                    &[24.0, 30.0, 36.0, 42.0],
                    variants,
                )
            }
        }
    }
}

/// One exported record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sweep_param: String,
    pub sweep_value: f64,
    /// `<variant>/<metric>`.
    pub metric: String,
    pub estimate: f64,
    pub stderr: f64,
    pub n_trials: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            _ => Err(Error::Unknown { kind: "format", name: s.to_string() }),
        }
    }
}

impl MetricsReport {
    /// The row for `metric` at `value`, if present.
    pub fn get(&self, value: f64, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.sweep_value == value && r.metric == metric)
    }

    /// Estimates of `metric` along the sweep, in sweep order.
    pub fn series(&self, metric: &str) -> Vec<&MetricRow> {
        self.rows.iter().filter(|r| r.metric == metric).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        wr.write_record(["sweep_param", "sweep_value", "metric", "estimate", "stderr", "n_trials"])
            .map_err(err)?;
        for r in &self.rows {
            // Display of f64 is the shortest string that parses back exactly
            wr.write_record([
                r.sweep_param.clone(),
                r.sweep_value.to_string(),
                r.metric.clone(),
                r.estimate.to_string(),
                r.stderr.to_string(),
                r.n_trials.to_string(),
            ])
            .map_err(err)?;
        }
        wr.flush().map_err(|source| Error::Io { path: "<csv>".into(), source })
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(|e| Error::Parse(e.to_string()))?;
        Ok(MetricsReport { rows })
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, &self.rows).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w).map_err(|source| Error::Io { path: "<json>".into(), source })
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let rows = serde_json::from_reader(r).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(MetricsReport { rows })
    }

    pub fn export(&self, path: impl AsRef<Path>, format: ExportFormat) -> Result<()> {
        let path = path.as_ref();
        let io = |source| Error::Io { path: path.to_path_buf(), source };
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        match format {
            ExportFormat::Csv => self.write_csv(&mut w),
            ExportFormat::Json => self.write_json(&mut w),
        }
        .map_err(|e| match e {
            Error::Io { source, .. } => io(source),
            other => other,
        })?;
        w.flush().map_err(io)
    }
}

/// Binomial standard error of `k` successes out of `n`.
pub fn binomial_stderr(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = k as f64 / n as f64;
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Number of batches used for the batch-means error of pooled rates.
pub const RATE_BATCHES: usize = 20;

enum TrialOutcome {
    Counts(PayloadCounts),
    Rates([(EstimatorKind, RateSums); 3]),
}

fn detection_trial<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    algorithm: Algorithm,
    options: &AmpOptions,
    rng: &mut R,
) -> Result<PayloadCounts> {
    let profile = generate_geometry(cfg, rng);
    let book = generate_pilots(cfg, rng);
    let real = ChannelRealization::sample(cfg, &profile, ActivityModel::Bernoulli, rng);
    let rx = synthesize_received(&book, &profile, &real, cfg, rng)?;
    let (declared, decoded): (Vec<bool>, Vec<Option<usize>>) = match algorithm {
        Algorithm::Amp => {
            let out = amp_detect(&rx, &book, &profile, cfg.activity_prob, cfg, options)?;
            let mut flags = vec![false; cfg.n_devices];
            out.support.iter().for_each(|c| flags[*c] = true);
            let decoded = flags.iter().map(|f| f.then_some(0)).collect();
            (flags, decoded)
        }
        Algorithm::AmpEib | Algorithm::Mamp { .. } => {
            let detector = match algorithm {
                Algorithm::Mamp { sharpness } => NoncoherentDetector::Mamp(Gate::Sigmoid(SigmoidGate::new(sharpness)?)),
                _ => NoncoherentDetector::AmpEib,
            };
            let view = ExtendedBookView::new(&book, cfg.info_bits)?;
            let out = noncoherent_detect(&rx, &view, &profile, cfg.activity_prob, cfg, options, detector)?;
            (out.active, out.messages)
        }
        _ => unreachable!("not a detection algorithm"),
    };
    let r = cfg.info_bits as u64;
    let mut c = PayloadCounts::default();
    for k in 0..cfg.n_devices {
        if real.activity[k] {
            c.active += 1;
            c.bits += r;
            match decoded[k] {
                None => {
                    c.missed += 1;
                    c.message_errors += 1;
                    c.bit_errors += r;
                }
                Some(m) => {
                    let wrong = (m ^ real.messages[k]).count_ones() as u64;
                    c.bit_errors += wrong;
                    c.message_errors += u64::from(wrong > 0);
                }
            }
        } else {
            c.inactive += 1;
            c.false_alarms += u64::from(declared[k]);
        }
    }
    Ok(c)
}

fn run_trial(cfg: &SystemConfig, algorithm: Algorithm, options: &AmpOptions, seed: u64, point: u64, t: u64) -> Result<TrialOutcome> {
    let mut rng = trial_rng(seed, point, t);
    match algorithm {
        Algorithm::Coherent { code, estimator } => {
            coherent_payload_trial(cfg, code, estimator, options, &mut rng).map(TrialOutcome::Counts)
        }
        Algorithm::Rate => rate_trial(cfg, options, &mut rng).map(TrialOutcome::Rates),
        _ => detection_trial(cfg, algorithm, options, &mut rng).map(TrialOutcome::Counts),
    }
}

/// Runs every sweep point and variant. Trials run on a pool of
/// `parallelism` workers; outcomes are reduced in trial order, so the report
/// does not depend on the number of workers.
pub fn run(scenario: &Scenario, parallelism: usize) -> Result<MetricsReport> {
    scenario.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut report = MetricsReport::default();
    for (point, &value) in scenario.sweep_values.iter().enumerate() {
        for variant in &scenario.variants {
            let cfg = scenario.point_config(value, variant)?;
            let outcomes: Vec<Result<TrialOutcome>> = pool.install(|| {
                (0..scenario.n_trials as u64)
                    .into_par_iter()
                    .map(|t| run_trial(&cfg, variant.algorithm, &scenario.options, scenario.seed, point as u64, t))
                    .collect()
            });
            let failures = outcomes.iter().filter(|o| o.is_err()).count();
            if let Some(Err(e)) = outcomes.iter().find(|o| o.is_err()) {
                warn!("{} {}={value}: {failures} failed trials, first: {e}", variant.label, scenario.sweep_param);
            }
            let ok: Vec<TrialOutcome> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
            emit(&mut report, scenario, value, variant, &cfg, &ok);
            if failures > 0 {
                report.rows.push(MetricRow {
                    sweep_param: scenario.sweep_param.clone(),
                    sweep_value: value,
                    metric: format!("{}/failed_trials", variant.label),
                    estimate: failures as f64,
                    stderr: 0.0,
                    n_trials: scenario.n_trials as u64,
                });
            }
            info!("{} {} {}={value}: {} trials", scenario.name, variant.label, scenario.sweep_param, ok.len());
        }
    }
    Ok(report)
}

fn emit(
    report: &mut MetricsReport,
    scenario: &Scenario,
    value: f64,
    variant: &Variant,
    cfg: &SystemConfig,
    outcomes: &[TrialOutcome],
) {
    let n_trials = outcomes.len() as u64;
    let mut push = |metric: String, estimate: f64, stderr: f64| {
        report.rows.push(MetricRow {
            sweep_param: scenario.sweep_param.clone(),
            sweep_value: value,
            metric,
            estimate,
            stderr,
            n_trials,
        })
    };
    match variant.algorithm {
        Algorithm::Rate => {
            let batches = RATE_BATCHES.min(outcomes.len()).max(1);
            for (e, kind) in EstimatorKind::ALL.iter().enumerate() {
                let mut total = RateSums::default();
                let mut per_batch = vec![RateSums::default(); batches];
                for (t, o) in outcomes.iter().enumerate() {
                    if let TrialOutcome::Rates(r) = o {
                        total.merge(&r[e].1);
                        per_batch[t * batches / outcomes.len()].merge(&r[e].1);
                    }
                }
                let rate = |s: &RateSums| crate::coherent::achievable_rate(s.sinr(), cfg.coherence_len, cfg.pilot_len);
                let rates: Vec<f64> = per_batch.iter().map(rate).collect();
                let mean = rates.iter().sum::<f64>() / batches as f64;
                let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (batches.max(2) - 1) as f64;
                push(format!("{kind}/rate_bits_per_s_per_hz"), rate(&total), (var / batches as f64).sqrt());
            }
        }
        _ => {
            let mut c = PayloadCounts::default();
            for o in outcomes {
                if let TrialOutcome::Counts(x) = o {
                    c.merge(x);
                }
            }
            let label = &variant.label;
            let rate = |k: u64, n: u64| if n == 0 { 0.0 } else { k as f64 / n as f64 };
            push(format!("{label}/miss_rate"), rate(c.missed, c.active), binomial_stderr(c.missed, c.active));
            push(
                format!("{label}/false_alarm_rate"),
                rate(c.false_alarms, c.inactive),
                binomial_stderr(c.false_alarms, c.inactive),
            );
            if variant.algorithm != Algorithm::Amp {
                push(
                    format!("{label}/message_error_rate"),
                    rate(c.message_errors, c.active),
                    binomial_stderr(c.message_errors, c.active),
                );
                push(format!("{label}/bit_error_rate"), rate(c.bit_errors, c.bits), binomial_stderr(c.bit_errors, c.bits));
            }
        }
    }
}
