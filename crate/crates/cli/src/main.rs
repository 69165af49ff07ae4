use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use grantfree::amp::{amp_detect, AmpOptions};
use grantfree::harness::{self, Algorithm, ExportFormat, FigureId, MetricsReport, PilotBudget, Scenario, Variant};
use grantfree::model::{generate_geometry, generate_pilots, synthesize_received, ActivityModel, ChannelRealization, SystemConfig};
use grantfree::noncoh::{noncoherent_detect, ExtendedBookView, Gate, NoncoherentDetector, SigmoidGate};
use grantfree::rng::trial_rng;

#[derive(Parser)]
#[command(name = "grantfree", version, about = "Grant-free massive MIMO access simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ExportFormat::Csv,
            Format::Json => ExportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Budget {
    /// Every algorithm uses `pilot_len`.
    Pilot,
    /// Non-coherent schemes use the whole coherence interval.
    Coherence,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Worker threads (defaults to the available cores).
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a figure preset.
    Figure {
        /// fig2 ... fig12
        id: String,
        /// Comma-separated sweep grid replacing the preset's.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sweep one configuration field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// amp, amp-eib, mamp[:c], rate, coherent:<code>[:<estimator>]
        #[arg(long, value_delimiter = ',', default_value = "amp")]
        algorithms: Vec<String>,
        #[arg(long, value_enum, default_value = "pilot")]
        budget: Budget,
        #[command(flatten)]
        run: RunArgs,
    },
    /// One verbose trial.
    Detect {
        #[arg(long)]
        config: PathBuf,
        /// amp, amp-eib or mamp[:c]
        #[arg(long, default_value = "amp")]
        algorithm: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Per-iteration residual and noise level as CSV.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
}

fn parallelism(p: Option<usize>) -> usize {
    p.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn execute(mut scenario: Scenario, run: RunArgs) -> Result<()> {
    if let Some(t) = run.trials {
        scenario.n_trials = t;
    }
    if let Some(s) = run.seed {
        scenario.seed = s;
    }
    let report = harness::run(&scenario, parallelism(run.parallelism))?;
    write_report(&report, run.out, run.format.into())
}

fn write_report(report: &MetricsReport, out: Option<PathBuf>, format: ExportFormat) -> Result<()> {
    match out {
        Some(path) => report.export(&path, format)?,
        None => {
            let stdout = io::stdout().lock();
            match format {
                ExportFormat::Csv => report.write_csv(stdout)?,
                ExportFormat::Json => report.write_json(stdout)?,
            }
        }
    }
    Ok(())
}

fn detect(config: PathBuf, algorithm: &str, seed: u64, diagnostics: Option<PathBuf>) -> Result<()> {
    let cfg = SystemConfig::load(&config)?;
    let algorithm: Algorithm = algorithm.parse()?;
    let mut rng = trial_rng(seed, 0, 0);
    let profile = generate_geometry(&cfg, &mut rng);
    let book = generate_pilots(&cfg, &mut rng);
    let real = ChannelRealization::sample(&cfg, &profile, ActivityModel::Bernoulli, &mut rng);
    let rx = synthesize_received(&book, &profile, &real, &cfg, &mut rng)?;
    let options = AmpOptions::default();
    let active = real.active_devices();
    let mut out = io::stdout().lock();
    writeln!(out, "active devices ({}): {:?}", active.len(), active)?;
    if cfg.info_bits > 0 {
        let msgs: Vec<usize> = active.iter().map(|&k| real.messages[k]).collect();
        writeln!(out, "sent indices: {msgs:?}")?;
    }
    let (declared, residuals, trace): (Vec<(usize, Option<usize>)>, Vec<f64>, Vec<f64>) = match algorithm {
        Algorithm::Amp => {
            if cfg.info_bits != 0 {
                bail!("plain AMP needs info_bits = 0");
            }
            let o = amp_detect(&rx, &book, &profile, cfg.activity_prob, &cfg, &options)?;
            writeln!(out, "iterations: {}", o.iterations)?;
            (o.support.iter().map(|&c| (c, None)).collect(), o.residual_trace, o.noise_state_trace)
        }
        Algorithm::AmpEib | Algorithm::Mamp { .. } => {
            let detector = match algorithm {
                Algorithm::Mamp { sharpness } => NoncoherentDetector::Mamp(Gate::Sigmoid(SigmoidGate::new(sharpness)?)),
                _ => NoncoherentDetector::AmpEib,
            };
            let view = ExtendedBookView::new(&book, cfg.info_bits)?;
            let o = noncoherent_detect(&rx, &view, &profile, cfg.activity_prob, &cfg, &options, detector)?;
            writeln!(out, "iterations: {}", o.iterations)?;
            let d = (0..cfg.n_devices).filter(|&k| o.active[k]).map(|k| (k, o.messages[k])).collect();
            (d, o.residual_trace, o.noise_state_trace)
        }
        _ => bail!("detect supports amp, amp-eib and mamp"),
    };
    let found: Vec<usize> = declared.iter().map(|d| d.0).collect();
    writeln!(out, "declared active ({}): {:?}", found.len(), found)?;
    if cfg.info_bits > 0 {
        let idx: Vec<Option<usize>> = declared.iter().map(|d| d.1).collect();
        writeln!(out, "decoded indices: {idx:?}")?;
    }
    let missed: Vec<usize> = active.iter().copied().filter(|k| !found.contains(k)).collect();
    let false_alarms: Vec<usize> = found.iter().copied().filter(|k| !real.activity[*k]).collect();
    writeln!(out, "missed: {missed:?}\nfalse alarms: {false_alarms:?}")?;
    if let Some(path) = diagnostics {
        let mut w = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        writeln!(w, "iteration,residual_fro,mu2")?;
        for (t, (r, mu2)) in residuals.iter().zip(&trace).enumerate() {
            writeln!(w, "{t},{r:e},{mu2:e}")?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Figure { id, values, run } => {
            let id: FigureId = id.parse()?;
            let mut scenario = harness::preset(id);
            if let Some(v) = values {
                scenario.sweep_values = v;
            }
            execute(scenario, run)
        }
        Command::Sweep { config, param, values, algorithms, budget, run } => {
            let cfg = SystemConfig::load(&config)?;
            let variants = algorithms
                .iter()
                .map(|a| Ok(Variant::new(a, a.parse()?)))
                .collect::<Result<Vec<_>>>()?;
            let scenario = Scenario {
                name: "sweep".into(),
                config: cfg,
                sweep_param: param,
                sweep_values: values,
                variants,
                budget: match budget {
                    Budget::Pilot => PilotBudget::PilotLen,
                    Budget::Coherence => PilotBudget::CoherenceInterval,
                },
                options: AmpOptions::default(),
                n_trials: harness::DETECTION_TRIALS,
                seed: 1,
            };
            execute(scenario, run)
        }
        Command::Detect { config, algorithm, seed, diagnostics } => detect(config, &algorithm, seed, diagnostics),
    }
}
