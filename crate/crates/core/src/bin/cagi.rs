use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cagi_jscc::generator::GeneratorModel;
use cagi_jscc::harness::{self, gradient_suite, CacheStats, ExperimentConfig, ReportFormat, SequenceReport};
use cagi_jscc::inversion::{plain_invert_outcome, ReconstructionMetrics};
use cagi_jscc::numerics::RngStream;
use cagi_jscc::{Error, Result};

#[derive(Parser)]
#[command(name = "cagi", version, about = "Channel-aware GAN-inversion JSCC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for report files; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Transmit without the semantic cache.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Threshold table: gamma_A, gamma_B, uniform:<v> or a file of slot=value lines.
    #[arg(long, global = true)]
    thresholds: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Invert the first source image without a channel.
    Invert,
    /// One channel-aware transmission without a cache.
    Transmit,
    /// Multi-round transmission of the source stream.
    Sequence,
    /// Run a sequence and dump both codebooks.
    CacheStats,
    /// Finite-difference check of all objective gradients.
    Gradcheck,
}

#[derive(Serialize)]
struct InvertReport {
    seed: u64,
    iterations: usize,
    initial_mse: f64,
    final_mse: f64,
    metrics: ReconstructionMetrics,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.no_cache {
        cfg.use_cache = false;
    }
    if let Some(t) = &common.thresholds {
        cfg.cache.thresholds = t.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Contract(format!("serialization failed: {e}")))
}

/// Writes `<out>/<stem>.<ext>` or prints to stdout.
fn output(common: &Common, stem: &str, text: &str) -> Result<()> {
    let Some(dir) = &common.out else {
        print!("{text}");
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join(format!("{stem}.{}", ReportFormat::from(common.format).extension()));
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

fn emit_sequence(common: &Common, report: &SequenceReport) -> Result<()> {
    for e in &report.errors {
        eprintln!("round {} failed: {}", e.round, e.message);
    }
    let text = match common.format {
        Format::Csv => harness::report_csv(report),
        Format::Json => harness::report_json(report)?,
    };
    output(common, "report", &text)
}

fn invert(common: &Common, cfg: &ExperimentConfig) -> Result<()> {
    let model = GeneratorModel::new(cfg.generator.clone())?;
    let master = RngStream::new(cfg.seed, 0);
    let source = harness::generate_source_stream(
        &model,
        &harness::SourceSpec {
            count: 1,
            ..cfg.source.clone()
        },
        &mut master.fork(1),
    )?;
    let target = &source[0].image;
    let out = plain_invert_outcome(&model, target, &cfg.inversion.stage1, &mut master.fork(2))?;
    let recon = model.generate(&out.latent)?;
    let report = InvertReport {
        seed: cfg.seed,
        iterations: out.trajectory.len().saturating_sub(1),
        initial_mse: out.initial_objective,
        final_mse: recon.mse(target)?,
        metrics: ReconstructionMetrics::evaluate(&recon, target)?,
    };
    let text = match common.format {
        Format::Json => to_json(&report)?,
        Format::Csv => format!(
            "seed,iterations,initial_mse,final_mse,psnr_db,ms_ssim,l1\n{},{},{},{},{},{},{}\n",
            report.seed,
            report.iterations,
            report.initial_mse,
            report.final_mse,
            report.metrics.psnr_db,
            report.metrics.ms_ssim,
            report.metrics.l1
        ),
    };
    output(common, "invert", &text)
}

fn cache_stats(common: &Common, cfg: &ExperimentConfig) -> Result<()> {
    if !cfg.use_cache {
        return Err(Error::Config("cache-stats needs the cache enabled".into()));
    }
    let run = harness::run_sequence_with_caches(cfg)?;
    for e in &run.report.errors {
        eprintln!("round {} failed: {}", e.round, e.message);
    }
    let tx = CacheStats::of(run.tx_cache.as_ref().expect("cache enabled"));
    let rx = CacheStats::of(run.rx_cache.as_ref().expect("cache enabled"));
    let text = match common.format {
        Format::Json => to_json(&serde_json::json!({ "transmitter": tx, "receiver": rx }))?,
        Format::Csv => {
            let mut s = String::new();
            for (side, stats) in [("tx", &tx), ("rx", &rx)] {
                for (k, line) in stats.to_csv().lines().enumerate() {
                    if k == 0 {
                        if side == "tx" {
                            s.push_str(&format!("side,{line}\n"));
                        }
                    } else {
                        s.push_str(&format!("{side},{line}\n"));
                    }
                }
            }
            s
        }
    };
    output(common, "cache_stats", &text)
}

fn gradcheck(common: &Common, cfg: &ExperimentConfig) -> Result<bool> {
    let seeds: Vec<u64> = (0..5).map(|k| cfg.seed.wrapping_add(k)).collect();
    let rows = gradient_suite(&seeds)?;
    let text = match common.format {
        Format::Json => to_json(&rows)?,
        Format::Csv => {
            let mut s = String::from("objective,seed,max_relative_error,passed\n");
            for r in &rows {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    r.objective, r.seed, r.max_relative_error, r.passed
                ));
            }
            s
        }
    };
    output(common, "gradcheck", &text)?;
    for r in rows.iter().filter(|r| !r.passed) {
        eprintln!(
            "gradient check failed: {} seed {} error {}",
            r.objective, r.seed, r.max_relative_error
        );
    }
    Ok(rows.iter().all(|r| r.passed))
}

/// `Ok(false)` when the run finished but a check failed.
fn run(cli: &Cli) -> Result<bool> {
    let common = &cli.common;
    let cfg = load_config(common)?;
    match cli.command {
        Command::Invert => invert(common, &cfg)?,
        Command::Transmit => {
            let mut one = cfg.clone();
            one.source.count = 1;
            one.use_cache = false;
            emit_sequence(common, &harness::run_sequence(&one)?)?
        }
        Command::Sequence => emit_sequence(common, &harness::run_sequence(&cfg)?)?,
        Command::CacheStats => cache_stats(common, &cfg)?,
        Command::Gradcheck => return gradcheck(common, &cfg),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
