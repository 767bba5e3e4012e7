//! Inversion and transmission with the semantic cache in the loop.

use serde::{Deserialize, Serialize};

use crate::cdc::{ReductionResult, SemanticCache};
use crate::channel::{
    index_bits, index_link_transmit, index_symbol_cost, ChannelConfig, ChannelForward, IndexLinkConfig,
};
use crate::error::{ensure_len, Error, Result};
use crate::generator::{GeneratorModel, LatentCode};
use crate::image::Image;
use crate::inversion::{
    adam_loop, channel_aware_invert_outcome, check_target, plain_invert, transmit_analog, InversionConfig,
    InversionOutcome, ReconstructionMetrics, TransmissionRecord,
};
use crate::numerics::{Objective, RngStream};
use crate::objective::CombinedLoss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStageConfig {
    /// Channel-aware inversion run before the cache is consulted.
    pub stage1: InversionConfig,
    pub stage2_iters: usize,
    /// Keep cache-substituted slots fixed during stage 2.
    pub freeze_hits: bool,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            stage1: InversionConfig::default(),
            stage2_iters: 100,
            freeze_hits: true,
        }
    }
}

/// The cached forward map `Ã` for a fixed reduction plan: analog slots are
/// power-normalized together and see channel noise, cache-substituted slots
/// are replaced by their stored vectors.
#[derive(Debug, Clone)]
pub struct CachedForward {
    plan: ReductionResult,
    /// Stored vector for each substituted slot.
    substitutes: Vec<Option<Vec<f64>>>,
    analog: Vec<usize>,
}

impl CachedForward {
    pub fn new(cache: &SemanticCache, plan: ReductionResult) -> Result<Self> {
        if plan.num_slots != cache.num_slots() || plan.latent_len != cache.latent_len() {
            return Err(Error::contract("reduction plan does not match the cache"));
        }
        let frozen = plan.frozen_mask();
        let substitutes = (0..plan.num_slots)
            .map(|i| {
                if !frozen[i] {
                    return Ok(None);
                }
                let j = plan.hit_positions[i].ok_or_else(|| Error::contract("hit without a cache position"))?;
                let e = cache
                    .slot(i)
                    .get(j)
                    .ok_or_else(|| Error::contract(format!("plan refers to missing entry {j} of slot {i}")))?;
                Ok(Some(e.vector.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let analog = plan.analog_slots();
        Ok(Self {
            plan,
            substitutes,
            analog,
        })
    }

    pub fn plan(&self) -> &ReductionResult {
        &self.plan
    }

    /// Reals carried by the analog signal.
    pub fn payload_len(&self) -> usize {
        self.analog.len() * self.plan.latent_len
    }

    /// Draws channel noise for the analog payload.
    pub fn sample_channel(&self, sigma2_hat: f64, power_constraint: f64, rng: &mut RngStream) -> ChannelForward {
        ChannelForward::sample(self.payload_len(), sigma2_hat, power_constraint, rng)
    }

    fn gather(&self, y: &[f64]) -> Vec<f64> {
        let nl = self.plan.latent_len;
        self.analog
            .iter()
            .flat_map(|&i| &y[i * nl..(i + 1) * nl])
            .copied()
            .collect()
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        ensure_len("latent", y.len(), self.plan.num_slots * self.plan.latent_len)
    }

    pub fn apply(&self, y: &[f64], channel: &ChannelForward) -> Result<Vec<f64>> {
        self.check(y)?;
        let nl = self.plan.latent_len;
        let mut out = y.to_vec();
        if !self.analog.is_empty() {
            let sent = channel.apply(&self.gather(y))?;
            for (k, &i) in self.analog.iter().enumerate() {
                out[i * nl..(i + 1) * nl].copy_from_slice(&sent[k * nl..(k + 1) * nl]);
            }
        }
        for (i, s) in self.substitutes.iter().enumerate() {
            if let Some(v) = s {
                out[i * nl..(i + 1) * nl].copy_from_slice(v);
            }
        }
        Ok(out)
    }

    /// Straight-through vector-Jacobian product: the substitution is treated
    /// as a constant offset, so substituted slots pass `cotangent` unchanged
    /// while analog slots go through the normalization Jacobian.
    pub fn straight_through_vjp(&self, y: &[f64], channel: &ChannelForward, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        ensure_len("cotangent", cotangent.len(), y.len())?;
        let nl = self.plan.latent_len;
        let mut grad = cotangent.to_vec();
        if !self.analog.is_empty() {
            let g = channel.vjp(&self.gather(y), &self.gather(cotangent))?;
            for (k, &i) in self.analog.iter().enumerate() {
                grad[i * nl..(i + 1) * nl].copy_from_slice(&g[k * nl..(k + 1) * nl]);
            }
        }
        Ok(grad)
    }
}

/// Dry-run reduction followed by one draw of `Ã`. Returns the restored
/// latent and the plan; the cache is not modified.
pub fn cached_forward(
    latent: &LatentCode,
    cache: &SemanticCache,
    sigma2_hat: f64,
    power_constraint: f64,
    rng: &mut RngStream,
) -> Result<(LatentCode, ReductionResult)> {
    if !(sigma2_hat >= 0.0) {
        return Err(Error::contract("estimated noise variance must be non-negative"));
    }
    let plan = cache.plan_reduction(latent, None)?;
    let fwd = CachedForward::new(cache, plan)?;
    let ch = fwd.sample_channel(sigma2_hat, power_constraint, rng);
    let out = latent.with_flat(fwd.apply(latent.flat(), &ch)?)?;
    Ok((out, fwd.plan))
}

/// `L(G(Ã(y)), x)` with straight-through gradients, for one noise draw.
pub struct StraightThroughObjective<'a> {
    model: &'a GeneratorModel,
    loss: &'a CombinedLoss,
    forward: &'a CachedForward,
    channel: ChannelForward,
}

impl<'a> StraightThroughObjective<'a> {
    pub fn new(
        model: &'a GeneratorModel,
        loss: &'a CombinedLoss,
        forward: &'a CachedForward,
        channel: ChannelForward,
    ) -> Result<Self> {
        check_target(model, loss.target())?;
        Ok(Self {
            model,
            loss,
            forward,
            channel,
        })
    }
}

impl Objective for StraightThroughObjective<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        let a = self.forward.apply(y, &self.channel)?;
        self.loss.value(self.model.forward_flat(&a)?.image())
    }

    fn value_and_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let a = self.forward.apply(y, &self.channel)?;
        let pass = self.model.forward_flat(&a)?;
        let (value, g_img) = self.loss.value_and_grad(pass.image())?;
        let g_a = self.model.backward(&pass, &g_img)?;
        Ok((value, self.forward.straight_through_vjp(y, &self.channel, &g_a)?))
    }
}

/// One straight-through evaluation at `latent`, with a fresh noise draw.
pub fn straight_through_objective(
    model: &GeneratorModel,
    loss: &CombinedLoss,
    latent: &LatentCode,
    cache: &SemanticCache,
    sigma2_hat: f64,
    power_constraint: f64,
    rng: &mut RngStream,
) -> Result<(f64, Vec<f64>)> {
    let fwd = CachedForward::new(cache, cache.plan_reduction(latent, None)?)?;
    let ch = fwd.sample_channel(sigma2_hat, power_constraint, rng);
    StraightThroughObjective::new(model, loss, &fwd, ch)?.value_and_grad(latent.flat())
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub latent: LatentCode,
    /// Plan fixed after stage 1; `reduced_vectors` reflect the final latent.
    pub reduction: ReductionResult,
    pub stage1: InversionOutcome,
    /// Objective at stage-2 iterates; empty when stage 2 was skipped.
    pub stage2_trajectory: Vec<f64>,
}

/// Stage 1: channel-aware inversion without the cache. Then one dry-run
/// match fixes the plan, and stage 2 refines the analog slots through the
/// straight-through objective while substituted slots stay put.
/// `current_snr` enables upgrade planning.
pub fn two_stage_invert(
    model: &GeneratorModel,
    target: &Image,
    cache: &SemanticCache,
    sigma2_hat: f64,
    cfg: &TwoStageConfig,
    current_snr: Option<f64>,
    rng: &mut RngStream,
) -> Result<TwoStageOutcome> {
    let stage1 = channel_aware_invert_outcome(model, target, sigma2_hat, &cfg.stage1, &mut rng.fork(1))?;
    let plan = cache.plan_reduction(&stage1.latent, current_snr)?;
    let fwd = CachedForward::new(cache, plan)?;
    let frozen = fwd.plan.frozen_mask();
    let nl = model.latent_len();

    let mut latent = stage1.latent.clone();
    let mut stage2_trajectory = Vec::new();
    let all_frozen = cfg.freeze_hits && frozen.iter().all(|&f| f);
    if cfg.stage2_iters > 0 && !all_frozen {
        let loss = CombinedLoss::new(&cfg.stage1.loss, target)?;
        let p = cfg.stage1.power_constraint;
        let mask: Vec<bool> = frozen.iter().flat_map(|&f| std::iter::repeat_n(f, nl)).collect();
        let mut noise_rng = rng.fork(2);
        let fixed = (!cfg.stage1.resample_noise_each_iter).then(|| fwd.sample_channel(sigma2_hat, p, &mut noise_rng));
        let (x, _, traj) = adam_loop(
            latent.flat().to_vec(),
            cfg.stage2_iters,
            cfg.stage1.adam(),
            cfg.freeze_hits.then_some(mask.as_slice()),
            |_, y| {
                let ch = match &fixed {
                    Some(c) => c.clone(),
                    None => fwd.sample_channel(sigma2_hat, p, &mut noise_rng),
                };
                StraightThroughObjective::new(model, &loss, &fwd, ch)?.value_and_grad(y)
            },
        )?;
        latent = latent.with_flat(x)?;
        stage2_trajectory = traj;
    }
    let mut reduction = fwd.plan;
    reduction.reduced_vectors = reduction
        .kept_slots
        .iter()
        .flat_map(|&i| latent.slot(i).to_vec())
        .collect();
    Ok(TwoStageOutcome {
        latent,
        reduction,
        stage1,
        stage2_trajectory,
    })
}

/// SNR tag for this round's cache writes. A noiseless round is tagged with
/// the top of the cache's SNR range.
pub fn storage_snr(channel: &ChannelConfig, cache: &SemanticCache) -> f64 {
    if channel.noiseless {
        cache.snr_range().1
    } else {
        channel.snr_db
    }
}

/// One transmission round with caches at both ends.
///
/// The transmitter inverts against `tx_cache`, sends analog slots (misses
/// and upgrades) over `channel` and hit indices over `link`, then commits
/// its cache updates. The receiver restores from `rx_cache` before replaying
/// the same updates with its received vectors.
#[allow(clippy::too_many_arguments)]
pub fn cdc_transmit(
    model: &GeneratorModel,
    target: &Image,
    tx_cache: &mut SemanticCache,
    rx_cache: &mut SemanticCache,
    channel: &ChannelConfig,
    sigma2_hat: f64,
    link: &IndexLinkConfig,
    cfg: &TwoStageConfig,
    rng: &mut RngStream,
) -> Result<(Image, TransmissionRecord)> {
    channel.validate()?;
    link.validate()?;
    let (ns, nl, cap) = (model.num_slots(), model.latent_len(), tx_cache.capacity());
    for c in [&*tx_cache, &*rx_cache] {
        if c.num_slots() != ns || c.latent_len() != nl {
            return Err(Error::contract("cache dimensions do not match the generator"));
        }
    }
    if rx_cache.capacity() != cap {
        return Err(Error::contract("transmitter and receiver caches differ in capacity"));
    }
    let cfg = TwoStageConfig {
        stage1: InversionConfig {
            power_constraint: channel.power_constraint,
            ..cfg.stage1.clone()
        },
        ..cfg.clone()
    };
    let tag = storage_snr(channel, tx_cache);

    let plain = plain_invert(model, target, &cfg.stage1, &mut rng.fork(1))?;
    let two = two_stage_invert(
        model,
        target,
        tx_cache,
        sigma2_hat,
        &TwoStageConfig {
            stage1: cfg.stage1.with_init(&plain),
            ..cfg.clone()
        },
        Some(tag),
        &mut rng.fork(2),
    )?;
    let (latent, plan) = (two.latent, two.reduction);

    // Analog link.
    let analog = plan.analog_slots();
    let payload: Vec<f64> = analog.iter().flat_map(|&i| latent.slot(i).to_vec()).collect();
    let (sent, received, energy) = if payload.is_empty() {
        (Vec::new(), Vec::new(), 0.0)
    } else {
        let t = transmit_analog(&payload, channel, &mut rng.fork(3))?;
        (t.sent, t.received, t.energy)
    };

    // Digital link.
    let bits = index_bits(cap, ns);
    let rx_indices = index_link_transmit(&plan.indices_sent, bits, ns * cap, link, &mut rng.fork(4));

    let restored = rx_cache.cache_restore(&plan, &received, &rx_indices, &mut rng.fork(5))?;
    let reconstruction = model.generate(&restored.latent)?;

    // Transmitter commit, then the receiver replays it slot by slot.
    let index_of: Vec<Option<usize>> = {
        let mut v = vec![None; ns];
        for (k, &i) in plan.index_slots().iter().enumerate() {
            v[i] = Some(k);
        }
        v
    };
    let analog_pos = |i: usize| analog.iter().position(|&a| a == i).map(|k| k * nl..(k + 1) * nl);
    for i in 0..ns {
        match (plan.hit_positions[i], plan.is_upgrade(i)) {
            (Some(j), false) => {
                tx_cache.touch(i, j)?;
                let idx = &rx_indices[index_of[i].expect("hit slot has an index")];
                if let Some(jr) = rx_cache.decode_index(i, idx) {
                    rx_cache.touch(i, jr)?;
                }
            }
            (Some(j), true) => {
                let r = analog_pos(i).expect("upgrade slot is analog");
                tx_cache.upgrade_at(i, j, &sent[r.clone()], tag)?;
                let idx = &rx_indices[index_of[i].expect("hit slot has an index")];
                match rx_cache.decode_index(i, idx) {
                    Some(jr) => rx_cache.upgrade_at(i, jr, &received[r], tag)?,
                    None => {
                        rx_cache.insert(i, &received[r], tag)?;
                    }
                }
            }
            (None, _) => {
                let r = analog_pos(i).expect("missed slot is analog");
                tx_cache.insert(i, &sent[r.clone()], tag)?;
                rx_cache.insert(i, &received[r], tag)?;
            }
        }
    }

    let analog_symbols = (payload.len() / 2) as u64;
    let digital_symbols = index_symbol_cost(plan.indices_sent.len(), link, cap, ns);
    let metrics = ReconstructionMetrics::evaluate(&reconstruction, target)?;
    let mut record = TransmissionRecord::new(
        analog_symbols,
        digital_symbols,
        model.source_bandwidth() as u64,
        metrics,
    )?;
    record.snr_db_actual = (!channel.noiseless).then_some(channel.snr_db);
    record.sigma2_hat = sigma2_hat;
    record.tx_signal_energy = energy;
    record.hit_mask = plan.hit_mask.clone();
    record.indices_sent = plan.indices_sent.clone();
    record.upgrade_slots = plan.upgrade_slots.clone();
    record.fallback_slots = restored.fallback_slots;
    record.empty_fallback_slots = restored.empty_fallback_slots;
    Ok((reconstruction, record))
}
