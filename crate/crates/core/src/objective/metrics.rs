//! Evaluation metrics: PSNR, MS-SSIM and cosine similarity.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_IDENTICAL_DB: f64 = 100.0;

/// Norms below this make cosine similarity 0.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// `10·log10(peak²/MSE)`, or [`PSNR_IDENTICAL_DB`] when the images are equal.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::contract("PSNR peak must be positive"));
    }
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < COSINE_NORM_FLOOR || nv < COSINE_NORM_FLOOR {
        return 0.0;
    }
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (d / (nu * nv)).clamp(-1.0, 1.0)
}

/// `u·v / (‖u‖‖v‖)`, defined as 0 when either vector is (numerically) zero.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    ensure_len("cosine similarity operand", v.len(), u.len())?;
    Ok(cosine_unchecked(u, v))
}

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Multi-scale SSIM settings. Scale weights are the usual five-scale weights
/// truncated to `scales` and renormalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            window: 7,
            sigma: 1.5,
            data_range: 1.0,
        }
    }
}

impl MsSsimConfig {
    /// Largest configuration not exceeding the defaults that fits `h × w`.
    pub fn fitting(h: usize, w: usize) -> Self {
        let mut cfg = Self::default();
        let min_dim = h.min(w);
        while cfg.scales > 1 && (min_dim >> (cfg.scales - 1)) < cfg.window {
            cfg.scales -= 1;
        }
        let coarsest = min_dim >> (cfg.scales - 1);
        if coarsest < cfg.window {
            cfg.window = if coarsest % 2 == 1 {
                coarsest
            } else {
                coarsest.saturating_sub(1)
            }
            .max(1);
        }
        cfg
    }

    fn weights(&self) -> Vec<f64> {
        let w = &MS_SSIM_WEIGHTS[..self.scales.min(MS_SSIM_WEIGHTS.len())];
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let k: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

/// Separable Gaussian filtering without padding ("valid").
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for j in 0..ow {
            rows[y * ow + j] = (0..n).map(|t| k[t] * x[y * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

fn downsample2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = 0.25
                * (x[2 * i * w + 2 * j]
                    + x[2 * i * w + 2 * j + 1]
                    + x[(2 * i + 1) * w + 2 * j]
                    + x[(2 * i + 1) * w + 2 * j + 1]);
        }
    }
    (out, oh, ow)
}

/// Mean luminance term and mean contrast-structure term for one plane.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &MsSsimConfig, k: &[f64]) -> (f64, f64) {
    let c1 = (SSIM_K1 * cfg.data_range).powi(2);
    let c2 = (SSIM_K2 * cfg.data_range).powi(2);
    let (mu_a, _, _) = filter_valid(a, h, w, k);
    let (mu_b, _, _) = filter_valid(b, h, w, k);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (e_aa, _, _) = filter_valid(&aa, h, w, k);
    let (e_bb, _, _) = filter_valid(&bb, h, w, k);
    let (e_ab, _, _) = filter_valid(&ab, h, w, k);
    let n = mu_a.len() as f64;
    let mut lum = 0.0;
    let mut cs = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let c = (2.0 * cov + c2) / (va + vb + c2);
        lum += l * c;
        cs += c;
    }
    (lum / n, cs / n)
}

/// Multi-scale structural similarity, averaged over channels. Per-scale terms
/// are clipped at zero so the result lies in `[0, 1]`.
pub fn ms_ssim_with(a: &Image, b: &Image, cfg: &MsSsimConfig) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if cfg.scales == 0 || cfg.window == 0 || !(cfg.sigma > 0.0) || !(cfg.data_range > 0.0) {
        return Err(Error::config("invalid MS-SSIM settings"));
    }
    let min_dim = a.height().min(a.width());
    if (min_dim >> (cfg.scales - 1)) < cfg.window {
        return Err(Error::config(format!(
            "{}x{} image is too small for {} MS-SSIM scales with a {}-pixel window",
            a.height(),
            a.width(),
            cfg.scales,
            cfg.window
        )));
    }
    let weights = cfg.weights();
    let k = cfg.kernel();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (mut pa, mut pb) = (a.plane(c).to_vec(), b.plane(c).to_vec());
        let (mut h, mut w) = (a.height(), a.width());
        let mut value = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_terms(&pa, &pb, h, w, cfg, &k);
            let term = if s + 1 == weights.len() { ssim } else { cs };
            value *= term.max(0.0).powf(wt);
            if s + 1 < weights.len() {
                let (na, nh, nw) = downsample2(&pa, h, w);
                let (nb, _, _) = downsample2(&pb, h, w);
                pa = na;
                pb = nb;
                h = nh;
                w = nw;
            }
        }
        total += value;
    }
    Ok((total / a.channels() as f64).clamp(0.0, 1.0))
}

/// MS-SSIM with the default three-scale settings.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    ms_ssim_with(a, b, &MsSsimConfig::default())
}
