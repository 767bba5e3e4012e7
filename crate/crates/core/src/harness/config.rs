use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cdc::{CacheConfig, SemanticCache};
use crate::cdc_pipeline::TwoStageConfig;
use crate::channel::{snr_to_sigma2, ChannelConfig, IndexLinkConfig};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::numerics::RngStream;

/// How each round's channel SNR is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SnrMode {
    Fixed {
        snr_db: f64,
    },
    /// Drawn uniformly per round.
    Uniform {
        min_db: f64,
        max_db: f64,
    },
    Noiseless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSpec {
    pub snr: SnrMode,
    pub power_constraint: f64,
    /// SNR assumed by the transmitter; the actual SNR when absent.
    pub estimated_snr_db: Option<f64>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            snr: SnrMode::Uniform {
                min_db: 0.0,
                max_db: 5.0,
            },
            power_constraint: 1.0,
            estimated_snr_db: None,
        }
    }
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        let probe = |snr_db: f64| {
            ChannelConfig {
                snr_db,
                power_constraint: self.power_constraint,
                noiseless: false,
            }
            .validate()
        };
        match self.snr {
            SnrMode::Fixed { snr_db } => probe(snr_db)?,
            SnrMode::Uniform { min_db, max_db } => {
                if !(min_db <= max_db) {
                    return Err(Error::config("uniform SNR range needs min <= max"));
                }
                probe(min_db)?;
                probe(max_db)?;
            }
            SnrMode::Noiseless => ChannelConfig {
                power_constraint: self.power_constraint,
                ..ChannelConfig::noiseless()
            }
            .validate()?,
        }
        if let Some(s) = self.estimated_snr_db {
            probe(s)?;
        }
        Ok(())
    }

    /// This round's channel and the transmitter's noise estimate.
    pub fn draw(&self, rng: &mut RngStream) -> (ChannelConfig, f64) {
        let channel = match self.snr {
            SnrMode::Fixed { snr_db } => ChannelConfig {
                snr_db,
                power_constraint: self.power_constraint,
                noiseless: false,
            },
            SnrMode::Uniform { min_db, max_db } => ChannelConfig {
                snr_db: rng.uniform_range(min_db, max_db),
                power_constraint: self.power_constraint,
                noiseless: false,
            },
            SnrMode::Noiseless => ChannelConfig {
                power_constraint: self.power_constraint,
                ..ChannelConfig::noiseless()
            },
        };
        let sigma2_hat = match (self.estimated_snr_db, channel.noiseless) {
            (Some(est), _) => snr_to_sigma2(est, self.power_constraint),
            (None, true) => 0.0,
            (None, false) => snr_to_sigma2(channel.snr_db, self.power_constraint),
        };
        (channel, sigma2_hat)
    }
}

/// Correlated source: slot vectors reused from per-slot pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceSpec {
    pub count: usize,
    pub pool_size: usize,
    pub reuse_prob: f64,
    /// Standard deviation of slot-vector entries.
    pub latent_scale: f64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            count: 100,
            pool_size: 10,
            reuse_prob: 0.7,
            latent_scale: std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::config("pool size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.reuse_prob) {
            return Err(Error::config("reuse probability must lie in [0, 1]"));
        }
        if !(self.latent_scale > 0.0) || !self.latent_scale.is_finite() {
            return Err(Error::config("latent scale must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub channel: ChannelSpec,
    pub inversion: TwoStageConfig,
    pub cache: CacheConfig,
    pub use_cache: bool,
    pub link: IndexLinkConfig,
    pub source: SourceSpec,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            channel: ChannelSpec::default(),
            inversion: TwoStageConfig::default(),
            cache: CacheConfig::default(),
            use_cache: true,
            link: IndexLinkConfig::default(),
            source: SourceSpec::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks everything a run needs, including named threshold tables.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.channel.validate()?;
        self.inversion.stage1.validate()?;
        self.link.validate()?;
        self.source.validate()?;
        if self.use_cache {
            self.build_cache()?;
        }
        Ok(())
    }

    pub fn build_cache(&self) -> Result<SemanticCache> {
        self.cache.build(self.generator.num_slots, self.generator.latent_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    #[test]
    fn json_defaults_fill_missing_fields() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 5, "source": {"count": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.source.count, 3);
        assert_eq!(cfg.source.pool_size, 10);
        assert_eq!(cfg.inversion.stage1.max_iters, 300);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_fail_fast() {
        assert!(matches!(ExperimentConfig::from_json("{nope"), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.cache.thresholds = "gamma_A".into();
        // 28-entry table against an 8-slot generator.
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.use_cache = false;
        assert!(cfg.validate().is_ok());
        cfg.source.reuse_prob = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn snr_draws() {
        let spec = ChannelSpec::default();
        let mut rng = seeded_rng(1, 0);
        for _ in 0..100 {
            let (ch, s2) = spec.draw(&mut rng);
            assert!((0.0..=5.0).contains(&ch.snr_db));
            assert_eq!(s2, snr_to_sigma2(ch.snr_db, 1.0));
        }
        let fixed = ChannelSpec {
            snr: SnrMode::Fixed { snr_db: 5.0 },
            estimated_snr_db: Some(0.0),
            ..ChannelSpec::default()
        };
        let (ch, s2) = fixed.draw(&mut rng);
        assert_eq!(ch.snr_db, 5.0);
        assert_eq!(s2, 1.0);
        let (ch, s2) = ChannelSpec {
            snr: SnrMode::Noiseless,
            ..ChannelSpec::default()
        }
        .draw(&mut rng);
        assert!(ch.noiseless);
        assert_eq!(s2, 0.0);
    }
}
