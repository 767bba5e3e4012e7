use serde::{Deserialize, Serialize};

use crate::cdc::{CacheConfig, SemanticCache};
use crate::cdc_pipeline::{CachedForward, StraightThroughObjective};
use crate::channel::{snr_to_sigma2, ChannelForward};
use crate::error::Result;
use crate::generator::{build_toy_generator, GeneratorModel, LatentCode};
use crate::inversion::{ChannelAwareObjective, MseObjective};
use crate::numerics::{gradient_check, Objective, RngStream};
use crate::objective::{CombinedLoss, LossConfig};

/// Acceptance bound on the worst relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub objective: String,
    pub seed: u64,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Straight-through objective seen as an ordinary function: substituted
/// slots become `y + (c - y_anchor)`, so its true gradient at the anchor is
/// the straight-through gradient.
struct Surrogate<'a> {
    inner: StraightThroughObjective<'a>,
    model: &'a GeneratorModel,
    loss: &'a CombinedLoss,
    forward: &'a CachedForward,
    channel: ChannelForward,
    anchor: Vec<f64>,
}

impl Objective for Surrogate<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        let mut a = self.forward.apply(y, &self.channel)?;
        let nl = self.model.latent_len();
        for (i, frozen) in self.forward.plan().frozen_mask().into_iter().enumerate() {
            if frozen {
                for k in i * nl..(i + 1) * nl {
                    a[k] += y[k] - self.anchor[k];
                }
            }
        }
        self.loss.value(self.model.forward_flat(&a)?.image())
    }

    fn value_and_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.inner.value_and_grad(y)
    }
}

/// Half the slots hit the cache at the check point, the rest miss.
fn seeded_cache(y: &LatentCode, rng: &mut RngStream) -> Result<SemanticCache> {
    let cfg = CacheConfig {
        thresholds: "uniform:0.9".into(),
        ..CacheConfig::default()
    };
    let mut cache = cfg.build(y.num_slots(), y.latent_len())?;
    for i in 0..y.num_slots() {
        let v: Vec<f64> = if i % 2 == 0 {
            y.slot(i).iter().map(|v| v + 0.05 * rng.normal()).collect()
        } else {
            rng.normal_vec(y.latent_len())
        };
        cache.insert(i, &v, 0.0)?;
    }
    Ok(cache)
}

/// Finite-difference checks of the MSE, channel-aware and straight-through
/// objectives on `N_S=4, N_L=8, 3x16x16` instances at 0 dB.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut rng = RngStream::new(seed, 0);
        let model = build_toy_generator(4, 8, 16, 16, seed)?;
        let truth = LatentCode::sample_prior(4, 8, &mut rng)?;
        let target = model.generate(&truth)?;
        let y = LatentCode::sample_prior(4, 8, &mut rng)?;
        let loss = CombinedLoss::new(&LossConfig::default(), &target)?;
        let sigma2 = snr_to_sigma2(0.0, 1.0);
        let mut row = |name: &str, obj: &dyn Objective| -> Result<()> {
            let check = gradient_check(obj, y.flat())?;
            rows.push(GradCheckRow {
                objective: name.into(),
                seed,
                max_relative_error: check.max_relative_error,
                passed: check.max_relative_error < GRADCHECK_TOLERANCE,
            });
            Ok(())
        };

        row("mse", &MseObjective::new(&model, &target)?)?;
        let fwd = ChannelForward::sample(model.latent_dim(), sigma2, 1.0, &mut rng);
        row("channel_aware", &ChannelAwareObjective::new(&model, &loss, fwd)?)?;

        let cache = seeded_cache(&y, &mut rng)?;
        let cached = CachedForward::new(&cache, cache.plan_reduction(&y, None)?)?;
        let ch = cached.sample_channel(sigma2, 1.0, &mut rng);
        let surrogate = Surrogate {
            inner: StraightThroughObjective::new(&model, &loss, &cached, ch.clone())?,
            model: &model,
            loss: &loss,
            forward: &cached,
            channel: ch,
            anchor: y.flat().to_vec(),
        };
        row("straight_through", &surrogate)?;
    }
    Ok(rows)
}
