//! Reconstruction losses and evaluation metrics.
//!
//! The improved inversion objective is
//! `λ1·L1 + λ2·perceptual + λ3·task`, evaluated on generated images. The
//! perceptual term uses [`PerceptualExtractor`] in place of LPIPS and the
//! default task term is one minus the cosine similarity of globally pooled
//! extractor features.

pub mod metrics;
pub mod perceptual;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use metrics::{cosine_similarity, ms_ssim, ms_ssim_with, psnr, MsSsimConfig};
pub use perceptual::{Features, PerceptualExtractor};

/// Task loss selected by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskPlugin {
    /// `1 − cos` of pooled extractor features.
    PooledCosine,
    None,
}

impl TaskPlugin {
    pub const NAMES: [&'static str; 2] = ["pooled_cosine", "none"];

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pooled_cosine" => Ok(TaskPlugin::PooledCosine),
            "none" => Ok(TaskPlugin::None),
            other => Err(Error::config(format!(
                "unknown task loss {other:?}; known: {:?}",
                Self::NAMES
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskPlugin::PooledCosine => "pooled_cosine",
            TaskPlugin::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub perceptual_seed: u64,
    pub task_plugin: String,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1.0,
            lambda3: 0.1,
            perceptual_seed: 0,
            task_plugin: "pooled_cosine".into(),
        }
    }
}

impl LossConfig {
    /// Pure L1 objective (`λ2 = λ3 = 0`).
    pub fn l1_only() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<TaskPlugin> {
        let ls = [self.lambda1, self.lambda2, self.lambda3];
        if ls.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if ls.iter().all(|&l| l == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        TaskPlugin::from_name(&self.task_plugin)
    }
}

/// Mean absolute pixel difference.
pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Gradient of [`l1_loss`] w.r.t. `a`; ties get subgradient 0.
pub fn l1_loss_grad(a: &Image, b: &Image) -> Result<Image> {
    a.ensure_same_shape(b)?;
    let n = a.len() as f64;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            if x > y {
                1.0 / n
            } else if x < y {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Image::new(a.channels(), a.height(), a.width(), data)
}

pub fn perceptual_proxy(a: &Image, b: &Image, extractor: &PerceptualExtractor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    Ok(extractor.distance(&fa, &fb))
}

/// Gradient of [`perceptual_proxy`] w.r.t. `a`, with its value.
pub fn perceptual_proxy_grad(a: &Image, b: &Image, extractor: &PerceptualExtractor) -> Result<(f64, Image)> {
    a.ensure_same_shape(b)?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    Ok((extractor.distance(&fa, &fb), extractor.gradient(a, &fa, &fb, 1.0, 0.0)))
}

pub fn task_loss(a: &Image, b: &Image, plugin: TaskPlugin, extractor: &PerceptualExtractor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    match plugin {
        TaskPlugin::None => Ok(0.0),
        TaskPlugin::PooledCosine => {
            let fa = extractor.features(a)?;
            let fb = extractor.features(b)?;
            Ok(task_loss_from_features(&fa, &fb))
        }
    }
}

/// Pooled-cosine task loss between precomputed features; in `[0, 2]`.
pub fn task_loss_from_features(a: &Features, b: &Features) -> f64 {
    perceptual::pooled_cosine_loss(a.pooled(), b.pooled())
}

/// The three weighted terms of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub perceptual: f64,
    pub task: f64,
    pub total: f64,
}

/// Combined loss bound to one target image; target features are computed
/// once.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    cfg: LossConfig,
    plugin: TaskPlugin,
    extractor: Arc<PerceptualExtractor>,
    target: Image,
    target_features: Option<Features>,
}

impl CombinedLoss {
    pub fn new(cfg: &LossConfig, target: &Image) -> Result<Self> {
        let extractor = Arc::new(PerceptualExtractor::new(cfg.perceptual_seed));
        Self::with_extractor(cfg, target, extractor)
    }

    /// Uses a caller-supplied extractor instead of one built from
    /// `cfg.perceptual_seed`.
    pub fn with_extractor(cfg: &LossConfig, target: &Image, extractor: Arc<PerceptualExtractor>) -> Result<Self> {
        let plugin = cfg.validate()?;
        let needs_features = cfg.lambda2 > 0.0 || (cfg.lambda3 > 0.0 && plugin == TaskPlugin::PooledCosine);
        let target_features = if needs_features {
            Some(extractor.features(target)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            plugin,
            extractor,
            target: target.clone(),
            target_features,
        })
    }

    pub fn target(&self) -> &Image {
        &self.target
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    fn task_active(&self) -> bool {
        self.cfg.lambda3 > 0.0 && self.plugin == TaskPlugin::PooledCosine
    }

    pub fn terms(&self, img: &Image) -> Result<LossTerms> {
        img.ensure_same_shape(&self.target)?;
        let l1 = l1_loss(img, &self.target)?;
        let (perceptual, task) = match &self.target_features {
            Some(tf) => {
                let f = self.extractor.features(img)?;
                let p = if self.cfg.lambda2 > 0.0 {
                    self.extractor.distance(&f, tf)
                } else {
                    0.0
                };
                let t = if self.task_active() {
                    task_loss_from_features(&f, tf)
                } else {
                    0.0
                };
                (p, t)
            }
            None => (0.0, 0.0),
        };
        let total = self.cfg.lambda1 * l1 + self.cfg.lambda2 * perceptual + self.cfg.lambda3 * task;
        Ok(LossTerms {
            l1,
            perceptual,
            task,
            total,
        })
    }

    pub fn value(&self, img: &Image) -> Result<f64> {
        Ok(self.terms(img)?.total)
    }

    /// Value and image-space gradient.
    pub fn value_and_grad(&self, img: &Image) -> Result<(f64, Image)> {
        let mut grad = l1_loss_grad(img, &self.target)?;
        grad.data_mut().iter_mut().for_each(|g| *g *= self.cfg.lambda1);
        let l1 = l1_loss(img, &self.target)?;
        let mut total = self.cfg.lambda1 * l1;
        if let Some(tf) = &self.target_features {
            let f = self.extractor.features(img)?;
            let w_dist = self.cfg.lambda2;
            let w_task = if self.task_active() { self.cfg.lambda3 } else { 0.0 };
            if w_dist > 0.0 {
                total += w_dist * self.extractor.distance(&f, tf);
            }
            if w_task > 0.0 {
                total += w_task * task_loss_from_features(&f, tf);
            }
            let g = self.extractor.gradient(img, &f, tf, w_dist, w_task);
            for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok((total, grad))
    }
}

/// `λ1·l1 + λ2·perceptual + λ3·task` for one pair.
pub fn combined_loss(generated: &Image, target: &Image, cfg: &LossConfig) -> Result<f64> {
    CombinedLoss::new(cfg, target)?.value(generated)
}
