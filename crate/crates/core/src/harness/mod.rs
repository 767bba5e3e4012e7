//! Experiment orchestration and report emission.

mod config;
mod gradcheck;
mod source;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{ChannelSpec, ExperimentConfig, ReportFormat, SnrMode, SourceSpec};
pub use gradcheck::{gradient_suite, GradCheckRow};
pub use source::{generate_source_stream, SourceSample};

use crate::cdc::SemanticCache;
use crate::cdc_pipeline::cdc_transmit;
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::inversion::{transmit_cagi, TransmissionRecord};
use crate::numerics::RngStream;

/// Quality metrics that need pretrained networks and are not computed.
pub const UNSUPPORTED_METRICS: [&str; 4] = ["LPIPS", "PieAPP", "DISTS", "FID"];

const SOURCE_STREAM: u64 = 1;
const SNR_STREAM: u64 = 2;
const ROUND_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub record: TransmissionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundError {
    pub round: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub rounds: usize,
    pub mean_bcr: f64,
    pub mean_psnr_db: f64,
    pub mean_ms_ssim: f64,
    /// Hits per round divided by `N_S`; empty without a cache.
    pub hit_rate: Vec<f64>,
    pub total_upgrades: usize,
    pub total_fallbacks: usize,
}

impl Aggregates {
    pub fn from_records(records: &[RoundRecord]) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&TransmissionRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(|r| f(&r.record)).sum::<f64>() / n as f64
            }
        };
        let hit_rate = records
            .iter()
            .filter(|r| !r.record.hit_mask.is_empty())
            .map(|r| r.record.hits() as f64 / r.record.hit_mask.len() as f64)
            .collect();
        Self {
            rounds: n,
            mean_bcr: mean(&|r| r.bcr_f64()),
            mean_psnr_db: mean(&|r| r.metrics.psnr_db),
            mean_ms_ssim: mean(&|r| r.metrics.ms_ssim),
            hit_rate,
            total_upgrades: records.iter().map(|r| r.record.upgrade_slots.len()).sum(),
            total_fallbacks: records.iter().map(|r| r.record.fallback_slots.len()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub errors: Vec<RoundError>,
    pub aggregates: Aggregates,
    pub unsupported_metrics: Vec<String>,
}

impl SequenceReport {
    pub fn new(config: ExperimentConfig, records: Vec<RoundRecord>, errors: Vec<RoundError>) -> Self {
        Self {
            seed: config.seed,
            aggregates: Aggregates::from_records(&records),
            config,
            records,
            errors,
            unsupported_metrics: UNSUPPORTED_METRICS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Report plus the caches left behind by the run.
#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub report: SequenceReport,
    pub tx_cache: Option<SemanticCache>,
    pub rx_cache: Option<SemanticCache>,
}

/// Runs the whole stream. Non-contract errors in a round are recorded and the
/// run moves on; contract violations abort.
pub fn run_sequence(config: &ExperimentConfig) -> Result<SequenceReport> {
    Ok(run_sequence_with_caches(config)?.report)
}

pub fn run_sequence_with_caches(config: &ExperimentConfig) -> Result<SequenceOutcome> {
    config.validate()?;
    let model = GeneratorModel::new(config.generator.clone())?;
    let master = RngStream::new(config.seed, 0);
    let stream = generate_source_stream(&model, &config.source, &mut master.fork(SOURCE_STREAM))?;
    let mut snr_rng = master.fork(SNR_STREAM);
    let mut caches = if config.use_cache {
        Some((config.build_cache()?, config.build_cache()?))
    } else {
        None
    };

    let mut records = Vec::with_capacity(stream.len());
    let mut errors = Vec::new();
    for (k, sample) in stream.iter().enumerate() {
        let round = k + 1;
        let (channel, sigma2_hat) = config.channel.draw(&mut snr_rng);
        let mut rng = master.fork(ROUND_STREAM_BASE + round as u64);
        let outcome = match caches.as_mut() {
            Some((tx, rx)) => cdc_transmit(
                &model,
                &sample.image,
                tx,
                rx,
                &channel,
                sigma2_hat,
                &config.link,
                &config.inversion,
                &mut rng,
            ),
            None => transmit_cagi(
                &model,
                &sample.image,
                &channel,
                sigma2_hat,
                &config.inversion.stage1,
                &mut rng,
            ),
        };
        match outcome {
            Ok((_, record)) => records.push(RoundRecord { round, record }),
            Err(e @ Error::Contract(_)) => return Err(e),
            Err(e) => errors.push(RoundError {
                round,
                message: e.to_string(),
            }),
        }
    }
    let (tx_cache, rx_cache) = match caches {
        Some((tx, rx)) => (Some(tx), Some(rx)),
        None => (None, None),
    };
    Ok(SequenceOutcome {
        report: SequenceReport::new(config.clone(), records, errors),
        tx_cache,
        rx_cache,
    })
}

pub const CSV_HEADER: &str =
    "round,snr_db,n_s,hits,analog_symbols,digital_symbols,bcr_num,bcr_den,psnr_db,ms_ssim,l1,upgrades,fallbacks";

/// One CSV row per successful round. `n_s` counts analog slots; without a
/// cache every slot is analog.
pub fn report_csv(report: &SequenceReport) -> String {
    let ns = report.config.generator.num_slots;
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for RoundRecord { round, record: r } in &report.records {
        let snr = r.snr_db_actual.map(|s| s.to_string()).unwrap_or_default();
        let n_s = if r.hit_mask.is_empty() { ns } else { r.kept_slots() };
        out.push_str(&format!(
            "{round},{snr},{n_s},{},{},{},{},{},{},{},{},{},{}\n",
            r.hits(),
            r.analog_complex_symbols,
            r.digital_symbols,
            r.bcr_num,
            r.bcr_den,
            r.metrics.psnr_db,
            r.metrics.ms_ssim,
            r.metrics.l1,
            r.upgrade_slots.len(),
            r.fallback_slots.len(),
        ));
    }
    out
}

pub fn report_json(report: &SequenceReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::contract(format!("report serialization failed: {e}")))
}

pub fn parse_report_json(text: &str) -> Result<SequenceReport> {
    serde_json::from_str(text).map_err(|e| Error::config(format!("bad report: {e}")))
}

pub fn emit_report(report: &SequenceReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => report_json(report)?,
    };
    write_file(path, &text)
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-slot summary of a codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotStats {
    pub slot: usize,
    pub entries: usize,
    pub min_snr_tag: Option<f64>,
    pub max_snr_tag: Option<f64>,
    pub mean_snr_tag: Option<f64>,
    pub last_access_max: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub capacity: usize,
    pub alpha: f64,
    pub clock: u64,
    pub slots: Vec<SlotStats>,
}

impl CacheStats {
    pub fn of(cache: &SemanticCache) -> Self {
        let slots = (0..cache.num_slots())
            .map(|i| {
                let entries = cache.slot(i);
                let tags: Vec<f64> = entries.iter().map(|e| e.snr_tag).collect();
                let fold = |f: fn(f64, f64) -> f64| tags.iter().copied().reduce(f);
                SlotStats {
                    slot: i,
                    entries: entries.len(),
                    min_snr_tag: fold(f64::min),
                    max_snr_tag: fold(f64::max),
                    mean_snr_tag: (!tags.is_empty()).then(|| tags.iter().sum::<f64>() / tags.len() as f64),
                    last_access_max: entries.iter().map(|e| e.last_access).max(),
                }
            })
            .collect();
        Self {
            capacity: cache.capacity(),
            alpha: cache.alpha(),
            clock: cache.clock(),
            slots,
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("slot,entries,min_snr_tag,max_snr_tag,mean_snr_tag,last_access_max\n");
        for s in &self.slots {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.slot,
                s.entries,
                opt(s.min_snr_tag),
                opt(s.max_snr_tag),
                opt(s.mean_snr_tag),
                s.last_access_max.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        out
    }
}
