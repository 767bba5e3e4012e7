//! GAN inversion: plain (MSE), channel-aware, and the cache-free transmit round.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::channel::{awgn, from_complex, power_normalize, to_complex, ChannelConfig, ChannelForward};
use crate::error::{ensure_len, Error, Result};
use crate::generator::{GeneratorModel, LatentCode};
use crate::image::Image;
use crate::numerics::{AdamConfig, Objective, OptimizerState, RngStream};
use crate::objective::{l1_loss, ms_ssim_with, psnr, CombinedLoss, LossConfig, MsSsimConfig};

/// Losses above this multiple of the initial value count toward divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive iterations above the threshold before giving up.
pub const DIVERGENCE_PATIENCE: usize = 50;

/// Where the optimizer starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    /// Standard normal per entry.
    #[default]
    Prior,
    /// Flat latent of length `N_S·N_L`.
    Provided(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub max_iters: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub resample_noise_each_iter: bool,
    pub init: LatentInit,
    /// Average power per complex symbol used inside the channel-aware loop.
    pub power_constraint: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            learning_rate: 0.01,
            loss: LossConfig::default(),
            resample_noise_each_iter: true,
            init: LatentInit::Prior,
            power_constraint: 1.0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if !(self.power_constraint > 0.0) || !self.power_constraint.is_finite() {
            return Err(Error::config("power constraint must be positive and finite"));
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn with_init(&self, latent: &LatentCode) -> Self {
        Self {
            init: LatentInit::Provided(latent.flat().to_vec()),
            ..self.clone()
        }
    }

    pub(crate) fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    fn initial_latent(&self, model: &GeneratorModel, rng: &mut RngStream) -> Result<LatentCode> {
        match &self.init {
            LatentInit::Prior => LatentCode::sample_prior(model.num_slots(), model.latent_len(), rng),
            LatentInit::Provided(v) => {
                ensure_len("initial latent", v.len(), model.latent_dim())?;
                LatentCode::new(model.num_slots(), model.latent_len(), v.clone())
            }
        }
    }
}

/// Result of one optimizer run.
#[derive(Debug, Clone)]
pub struct InversionOutcome {
    /// Best iterate seen, unnormalized.
    pub latent: LatentCode,
    pub best_objective: f64,
    pub initial_objective: f64,
    /// Objective at iterates `0..=max_iters`.
    pub trajectory: Vec<f64>,
}

/// Adam on `eval`, returning the best iterate. `eval(t, x)` gives the
/// objective and gradient at iterate `t`; coordinates with `frozen[i]` set
/// are never touched.
pub(crate) fn adam_loop(
    x0: Vec<f64>,
    iters: usize,
    adam: AdamConfig,
    frozen: Option<&[bool]>,
    mut eval: impl FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let mut x = x0;
    let mut state = OptimizerState::new(x.len(), adam);
    let mut trajectory = Vec::with_capacity(iters + 1);
    let mut best_x = x.clone();
    let mut best = f64::INFINITY;
    let mut above = 0usize;
    for t in 0..=iters {
        let (value, mut grad) = eval(t, &x)?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                reason: format!("objective evaluated to {value}"),
            });
        }
        trajectory.push(value);
        if value < best {
            best = value;
            best_x.copy_from_slice(&x);
        }
        if value > DIVERGENCE_FACTOR * trajectory[0] {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    iteration: t,
                    reason: format!(
                        "objective above {DIVERGENCE_FACTOR}x its initial value for {DIVERGENCE_PATIENCE} iterations"
                    ),
                });
            }
        } else {
            above = 0;
        }
        if t == iters {
            break;
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: t,
                reason: format!("non-finite gradient at coordinate {i}"),
            });
        }
        if let Some(mask) = frozen {
            for (g, &f) in grad.iter_mut().zip(mask) {
                if f {
                    *g = 0.0;
                }
            }
        }
        state.step(&mut x, &grad)?;
    }
    Ok((best_x, best, trajectory))
}

/// `‖G(y) − x‖² / N`, the plain inversion objective.
pub struct MseObjective<'a> {
    model: &'a GeneratorModel,
    target: &'a Image,
}

impl<'a> MseObjective<'a> {
    pub fn new(model: &'a GeneratorModel, target: &'a Image) -> Result<Self> {
        check_target(model, target)?;
        Ok(Self { model, target })
    }
}

impl Objective for MseObjective<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        self.model.forward_flat(y)?.image().mse(self.target)
    }

    fn value_and_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let pass = self.model.forward_flat(y)?;
        let img = pass.image();
        let n = img.len() as f64;
        let data = img
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(g, x)| 2.0 * (g - x) / n)
            .collect();
        let cot = Image::new(img.channels(), img.height(), img.width(), data)?;
        let value = img.mse(self.target)?;
        Ok((value, self.model.backward(&pass, &cot)?))
    }
}

/// `L(G(A(y)), x)` for one fixed noise realization inside `A`.
pub struct ChannelAwareObjective<'a> {
    model: &'a GeneratorModel,
    loss: &'a CombinedLoss,
    forward: ChannelForward,
}

impl<'a> ChannelAwareObjective<'a> {
    pub fn new(model: &'a GeneratorModel, loss: &'a CombinedLoss, forward: ChannelForward) -> Result<Self> {
        check_target(model, loss.target())?;
        Ok(Self { model, loss, forward })
    }

    pub fn forward(&self) -> &ChannelForward {
        &self.forward
    }
}

impl Objective for ChannelAwareObjective<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn value(&self, y: &[f64]) -> Result<f64> {
        let a = self.forward.apply(y)?;
        self.loss.value(self.model.forward_flat(&a)?.image())
    }

    fn value_and_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let a = self.forward.apply(y)?;
        let pass = self.model.forward_flat(&a)?;
        let (value, g_img) = self.loss.value_and_grad(pass.image())?;
        let g_a = self.model.backward(&pass, &g_img)?;
        Ok((value, self.forward.vjp(y, &g_a)?))
    }
}

pub(crate) fn check_target(model: &GeneratorModel, target: &Image) -> Result<()> {
    if target.channels() != 3 || target.height() != model.height() || target.width() != model.width() {
        return Err(Error::contract(format!(
            "target is {}x{}x{}, generator produces 3x{}x{}",
            target.channels(),
            target.height(),
            target.width(),
            model.height(),
            model.width()
        )));
    }
    Ok(())
}

/// Adam on the MSE objective; no channel in the loop.
pub fn plain_invert_outcome(
    model: &GeneratorModel,
    target: &Image,
    cfg: &InversionConfig,
    rng: &mut RngStream,
) -> Result<InversionOutcome> {
    cfg.validate()?;
    let obj = MseObjective::new(model, target)?;
    let init = cfg.initial_latent(model, rng)?;
    let (x, best, trajectory) = adam_loop(init.into_flat(), cfg.max_iters, cfg.adam(), None, |_, y| {
        obj.value_and_grad(y)
    })?;
    Ok(InversionOutcome {
        latent: LatentCode::new(model.num_slots(), model.latent_len(), x)?,
        best_objective: best,
        initial_objective: trajectory[0],
        trajectory,
    })
}

pub fn plain_invert(
    model: &GeneratorModel,
    target: &Image,
    cfg: &InversionConfig,
    rng: &mut RngStream,
) -> Result<LatentCode> {
    Ok(plain_invert_outcome(model, target, cfg, rng)?.latent)
}

/// Adam on the channel-aware objective with the improved loss. Noise is drawn
/// from `rng`, once per iteration when `resample_noise_each_iter` is set.
pub fn channel_aware_invert_outcome(
    model: &GeneratorModel,
    target: &Image,
    sigma2_hat: f64,
    cfg: &InversionConfig,
    rng: &mut RngStream,
) -> Result<InversionOutcome> {
    cfg.validate()?;
    if !(sigma2_hat >= 0.0) || !sigma2_hat.is_finite() {
        return Err(Error::contract(
            "estimated noise variance must be finite and non-negative",
        ));
    }
    check_target(model, target)?;
    let loss = CombinedLoss::new(&cfg.loss, target)?;
    let init = cfg.initial_latent(model, rng)?;
    let dim = model.latent_dim();
    let p = cfg.power_constraint;
    let mut fixed = None;
    if !cfg.resample_noise_each_iter {
        fixed = Some(ChannelForward::sample(dim, sigma2_hat, p, rng));
    }
    let (x, best, trajectory) = adam_loop(init.into_flat(), cfg.max_iters, cfg.adam(), None, |_, y| {
        let forward = match &fixed {
            Some(f) => f.clone(),
            None => ChannelForward::sample(dim, sigma2_hat, p, rng),
        };
        ChannelAwareObjective::new(model, &loss, forward)?.value_and_grad(y)
    })?;
    Ok(InversionOutcome {
        latent: LatentCode::new(model.num_slots(), model.latent_len(), x)?,
        best_objective: best,
        initial_objective: trajectory[0],
        trajectory,
    })
}

pub fn channel_aware_invert(
    model: &GeneratorModel,
    target: &Image,
    sigma2_hat: f64,
    cfg: &InversionConfig,
    rng: &mut RngStream,
) -> Result<LatentCode> {
    Ok(channel_aware_invert_outcome(model, target, sigma2_hat, cfg, rng)?.latent)
}

/// Reconstruction quality against the source image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub l1: f64,
}

impl ReconstructionMetrics {
    pub fn evaluate(reconstruction: &Image, target: &Image) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(reconstruction, target, 1.0)?,
            ms_ssim: ms_ssim_with(
                reconstruction,
                target,
                &MsSsimConfig::fitting(target.height(), target.width()),
            )?,
            l1: l1_loss(reconstruction, target)?,
        })
    }
}

/// Accounting and quality of one transmission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRecord {
    pub analog_complex_symbols: u64,
    pub digital_symbols: u64,
    /// `N = 3·H·W`.
    pub source_bandwidth: u64,
    /// BCR in lowest terms.
    pub bcr_num: u64,
    pub bcr_den: u64,
    /// `None` on a noiseless channel.
    pub snr_db_actual: Option<f64>,
    pub sigma2_hat: f64,
    /// Energy of the power-normalized analog signal.
    pub tx_signal_energy: f64,
    pub metrics: ReconstructionMetrics,
    /// Per-slot hit flags; empty without a cache.
    pub hit_mask: Vec<bool>,
    /// Flat indices `slot·N_C + position`, hits first then upgrades.
    pub indices_sent: Vec<usize>,
    pub upgrade_slots: Vec<usize>,
    /// Slots the receiver filled by the random-entry fallback.
    pub fallback_slots: Vec<usize>,
    /// Fallback slots whose receiver codebook was empty (zero vector used).
    pub empty_fallback_slots: Vec<usize>,
}

impl TransmissionRecord {
    pub fn new(analog: u64, digital: u64, source_bandwidth: u64, metrics: ReconstructionMetrics) -> Result<Self> {
        if source_bandwidth == 0 {
            return Err(Error::contract("source bandwidth must be positive"));
        }
        let bcr = Ratio::new(analog + digital, source_bandwidth);
        Ok(Self {
            analog_complex_symbols: analog,
            digital_symbols: digital,
            source_bandwidth,
            bcr_num: *bcr.numer(),
            bcr_den: *bcr.denom(),
            snr_db_actual: None,
            sigma2_hat: 0.0,
            tx_signal_energy: 0.0,
            metrics,
            hit_mask: Vec::new(),
            indices_sent: Vec::new(),
            upgrade_slots: Vec::new(),
            fallback_slots: Vec::new(),
            empty_fallback_slots: Vec::new(),
        })
    }

    pub fn bcr(&self) -> Ratio<u64> {
        Ratio::new(self.bcr_num, self.bcr_den)
    }

    pub fn bcr_f64(&self) -> f64 {
        self.bcr_num as f64 / self.bcr_den as f64
    }

    pub fn hits(&self) -> usize {
        self.hit_mask.iter().filter(|&&h| h).count()
    }

    /// Slots carried analog (`n_s`), counting upgrades as well.
    pub fn kept_slots(&self) -> usize {
        if self.hit_mask.is_empty() {
            0
        } else {
            self.hit_mask.len() - self.hits()
        }
    }
}

/// Analog part of one channel use: `PN(C(v))` through AWGN at the actual
/// SNR.
pub(crate) struct AnalogTransmission {
    /// Power-normalized reals as sent.
    pub sent: Vec<f64>,
    pub received: Vec<f64>,
    pub energy: f64,
}

pub(crate) fn transmit_analog(v: &[f64], channel: &ChannelConfig, rng: &mut RngStream) -> Result<AnalogTransmission> {
    let z = power_normalize(&to_complex(v)?, channel.power_constraint)?;
    let energy = z.energy();
    let received = match channel.sigma2() {
        Some(s2) => awgn(&z, s2, rng)?,
        None => z.clone(),
    };
    Ok(AnalogTransmission {
        sent: from_complex(&z),
        received: from_complex(&received),
        energy,
    })
}

/// Optimize for `sigma2_hat`, then send through the actual channel and
/// reconstruct. Returns the reconstruction and its record.
pub fn transmit_cagi(
    model: &GeneratorModel,
    target: &Image,
    channel: &ChannelConfig,
    sigma2_hat: f64,
    cfg: &InversionConfig,
    rng: &mut RngStream,
) -> Result<(Image, TransmissionRecord)> {
    channel.validate()?;
    let cfg = InversionConfig {
        power_constraint: channel.power_constraint,
        ..cfg.clone()
    };
    let plain = plain_invert(model, target, &cfg, &mut rng.fork(1))?;
    let refined = channel_aware_invert(model, target, sigma2_hat, &cfg.with_init(&plain), &mut rng.fork(2))?;
    let tx = transmit_analog(refined.flat(), channel, &mut rng.fork(3))?;
    let reconstruction = model.generate(&refined.with_flat(tx.received)?)?;

    let analog = (model.latent_dim() / 2) as u64;
    let metrics = ReconstructionMetrics::evaluate(&reconstruction, target)?;
    let mut record = TransmissionRecord::new(analog, 0, model.source_bandwidth() as u64, metrics)?;
    record.snr_db_actual = (!channel.noiseless).then_some(channel.snr_db);
    record.sigma2_hat = sigma2_hat;
    record.tx_signal_energy = tx.energy;
    Ok((reconstruction, record))
}
