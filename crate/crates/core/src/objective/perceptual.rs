//! Seeded random convolutional feature stack used as a perceptual distance.
//!
//! Three scales; each scale average-pools the previous input by 2, applies a
//! fixed 3×3 convolution (zero padding) and `tanh`. Feature vectors are
//! normalized to unit length across channels at every position before
//! distances are taken, like LPIPS does with VGG activations. The weights are
//! random, not learned; this stands in for LPIPS, it does not reproduce it.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::RngStream;

pub const DEFAULT_SCALES: usize = 3;
pub const DEFAULT_FEATURE_CHANNELS: usize = 8;
const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Planes {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Planes {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    fn positions(&self) -> usize {
        self.h * self.w
    }
}

fn avg_pool2(x: &Planes) -> Planes {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Planes::zeros(x.c, h, w);
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                let at = |y: usize, z: usize| x.data[(c * x.h + y) * x.w + z];
                out.data[(c * h + i) * w + j] =
                    0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]; odd trailing rows/columns receive nothing.
fn avg_pool2_backward(d_out: &Planes, in_h: usize, in_w: usize) -> Planes {
    let mut d_in = Planes::zeros(d_out.c, in_h, in_w);
    for c in 0..d_out.c {
        for i in 0..d_out.h {
            for j in 0..d_out.w {
                let g = 0.25 * d_out.data[(c * d_out.h + i) * d_out.w + j];
                for (y, z) in [
                    (2 * i, 2 * j),
                    (2 * i, 2 * j + 1),
                    (2 * i + 1, 2 * j),
                    (2 * i + 1, 2 * j + 1),
                ] {
                    d_in.data[(c * in_h + y) * in_w + z] += g;
                }
            }
        }
    }
    d_in
}

#[derive(Debug, Clone)]
struct Conv3x3 {
    out_c: usize,
    in_c: usize,
    /// out_c × in_c × 3 × 3
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv3x3 {
    fn random(out_c: usize, in_c: usize, rng: &mut RngStream) -> Self {
        let scale = 1.0 / ((9 * in_c) as f64).sqrt();
        Self {
            out_c,
            in_c,
            weights: (0..out_c * in_c * 9).map(|_| scale * rng.normal()).collect(),
            bias: (0..out_c).map(|_| 0.1 * rng.normal()).collect(),
        }
    }

    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_c + i) * 3 + ky) * 3 + kx]
    }

    fn forward(&self, x: &Planes) -> Planes {
        let (h, w) = (x.h, x.w);
        let mut out = Planes::zeros(self.out_c, h, w);
        for o in 0..self.out_c {
            let plane = &mut out.data[o * h * w..(o + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_c {
                let src = &x.data[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.w(o, i, ky, kx);
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                            let drow = &mut plane[y * w..(y + 1) * w];
                            let (x0, x1) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                            for xx in x0..x1 {
                                drow[xx] += k * srow[xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_input(&self, d_out: &Planes) -> Planes {
        let (h, w) = (d_out.h, d_out.w);
        let mut d_in = Planes::zeros(self.in_c, h, w);
        for o in 0..self.out_c {
            let dplane = &d_out.data[o * h * w..(o + 1) * h * w];
            for i in 0..self.in_c {
                let dst = &mut d_in.data[i * h * w..(i + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.w(o, i, ky, kx);
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let drow = &dplane[y * w..(y + 1) * w];
                            let srow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                            let (x0, x1) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                            for xx in x0..x1 {
                                srow[xx + kx - 1] += k * drow[xx];
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Per-scale activations of one image.
#[derive(Debug, Clone)]
pub struct Features {
    input_dims: Vec<(usize, usize)>,
    raw: Vec<Planes>,
    normalized: Vec<Planes>,
    norms: Vec<Vec<f64>>,
    pooled: Vec<f64>,
}

impl Features {
    /// Globally average-pooled raw features of all scales, concatenated.
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Copy with pooled features negated; used to build antipodal pairs.
    pub fn negated(&self) -> Features {
        let mut f = self.clone();
        f.pooled.iter_mut().for_each(|v| *v = -*v);
        f
    }
}

/// Frozen multi-scale feature extractor.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    seed: u64,
    layers: Vec<Conv3x3>,
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        Self::with_shape(seed, DEFAULT_SCALES, DEFAULT_FEATURE_CHANNELS)
    }

    pub fn with_shape(seed: u64, scales: usize, channels: usize) -> Self {
        let mut rng = RngStream::new(seed, 0x7065_7263);
        let layers = (0..scales.max(1))
            .map(|_| Conv3x3::random(channels.max(1), 3, &mut rng))
            .collect();
        Self { seed, layers }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scales(&self) -> usize {
        self.layers.len()
    }

    pub fn check_input(&self, img: &Image) -> Result<()> {
        let need = 1usize << (self.scales() - 1);
        if img.channels() != 3 || img.height() < need || img.width() < need {
            return Err(Error::contract(format!(
                "feature extractor needs 3-channel images of at least {need}x{need}, got {}x{}x{}",
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    pub fn features(&self, img: &Image) -> Result<Features> {
        self.check_input(img)?;
        let mut input = Planes {
            c: 3,
            h: img.height(),
            w: img.width(),
            data: img.data().iter().map(|v| v - 0.5).collect(),
        };
        let mut feats = Features {
            input_dims: Vec::new(),
            raw: Vec::new(),
            normalized: Vec::new(),
            norms: Vec::new(),
            pooled: Vec::new(),
        };
        for (s, layer) in self.layers.iter().enumerate() {
            if s > 0 {
                input = avg_pool2(&input);
            }
            feats.input_dims.push((input.h, input.w));
            let mut f = layer.forward(&input);
            f.data.iter_mut().for_each(|v| *v = v.tanh());
            let p = f.positions();
            let mut norms = vec![0.0; p];
            for c in 0..f.c {
                for (n, v) in norms.iter_mut().zip(&f.data[c * p..(c + 1) * p]) {
                    *n += v * v;
                }
            }
            norms.iter_mut().for_each(|n| *n = (*n + NORM_EPS).sqrt());
            let mut nf = f.clone();
            for c in 0..f.c {
                for (v, n) in nf.data[c * p..(c + 1) * p].iter_mut().zip(&norms) {
                    *v /= n;
                }
            }
            for c in 0..f.c {
                feats
                    .pooled
                    .push(f.data[c * p..(c + 1) * p].iter().sum::<f64>() / p as f64);
            }
            feats.raw.push(f);
            feats.normalized.push(nf);
            feats.norms.push(norms);
        }
        Ok(feats)
    }

    /// Mean L1 distance between normalized features, averaged over scales.
    pub fn distance(&self, a: &Features, b: &Features) -> f64 {
        let s = a.normalized.len() as f64;
        a.normalized
            .iter()
            .zip(&b.normalized)
            .map(|(x, y)| x.data.iter().zip(&y.data).map(|(u, v)| (u - v).abs()).sum::<f64>() / x.data.len() as f64)
            .sum::<f64>()
            / s
    }

    /// Gradient of [`Self::distance`] w.r.t. the features of `a`, expressed as
    /// cotangents on the raw activations.
    fn distance_cotangent(&self, a: &Features, b: &Features, weight: f64, d_raw: &mut [Planes]) {
        let s = a.normalized.len() as f64;
        for (scale, (x, y)) in a.normalized.iter().zip(&b.normalized).enumerate() {
            let p = x.positions();
            let coeff = weight / (s * x.data.len() as f64);
            let dn: Vec<f64> = x
                .data
                .iter()
                .zip(&y.data)
                .map(|(u, v)| {
                    let d = u - v;
                    if d > 0.0 {
                        coeff
                    } else if d < 0.0 {
                        -coeff
                    } else {
                        0.0
                    }
                })
                .collect();
            // nf = f / n with n = sqrt(Σ f² + ε):  df_c = (dnf_c − nf_c Σ_k dnf_k nf_k) / n
            let mut radial = vec![0.0; p];
            for c in 0..x.c {
                for ((r, d), v) in radial
                    .iter_mut()
                    .zip(&dn[c * p..(c + 1) * p])
                    .zip(&x.data[c * p..(c + 1) * p])
                {
                    *r += d * v;
                }
            }
            let norms = &a.norms[scale];
            let dst = &mut d_raw[scale].data;
            for c in 0..x.c {
                for pos in 0..p {
                    let i = c * p + pos;
                    dst[i] += (dn[i] - x.data[i] * radial[pos]) / norms[pos];
                }
            }
        }
    }

    /// Back-propagates raw-activation cotangents to the input image.
    fn backward(&self, a: &Features, mut d_raw: Vec<Planes>, img: &Image) -> Image {
        let mut d_input: Option<Planes> = None;
        for scale in (0..self.layers.len()).rev() {
            let f = &a.raw[scale];
            let d = &mut d_raw[scale];
            for (g, v) in d.data.iter_mut().zip(&f.data) {
                *g *= 1.0 - v * v;
            }
            let mut d_in = self.layers[scale].backward_input(d);
            if let Some(prev) = d_input.take() {
                for (x, y) in d_in.data.iter_mut().zip(&prev.data) {
                    *x += y;
                }
            }
            if scale > 0 {
                let (h, w) = a.input_dims[scale - 1];
                d_input = Some(avg_pool2_backward(&d_in, h, w));
            } else {
                d_input = Some(d_in);
            }
        }
        let d = d_input.expect("at least one scale");
        Image::new(3, img.height(), img.width(), d.data).expect("shape preserved")
    }

    fn zero_cotangents(&self, a: &Features) -> Vec<Planes> {
        a.raw.iter().map(|f| Planes::zeros(f.c, f.h, f.w)).collect()
    }

    /// Image-space gradient of `w_dist · distance(a, b) + w_task · task(a, b)`
    /// w.r.t. `a`, where `task` is `1 − cos(pooled_a, pooled_b)`.
    pub(crate) fn gradient(&self, img: &Image, a: &Features, b: &Features, w_dist: f64, w_task: f64) -> Image {
        let mut d_raw = self.zero_cotangents(a);
        if w_dist != 0.0 {
            self.distance_cotangent(a, b, w_dist, &mut d_raw);
        }
        if w_task != 0.0 {
            let dp = pooled_cosine_loss_grad(&a.pooled, &b.pooled);
            let mut k = 0;
            for d in d_raw.iter_mut() {
                let p = d.positions();
                for c in 0..d.c {
                    let g = w_task * dp[k] / p as f64;
                    d.data[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += g);
                    k += 1;
                }
            }
        }
        self.backward(a, d_raw, img)
    }
}

pub(crate) fn pooled_cosine_loss(a: &[f64], b: &[f64]) -> f64 {
    1.0 - super::metrics::cosine_unchecked(a, b)
}

/// Gradient of `1 − cos(a, b)` w.r.t. `a`; zero when either norm vanishes.
fn pooled_cosine_loss_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < super::metrics::COSINE_NORM_FLOOR || nb < super::metrics::COSINE_NORM_FLOOR {
        return vec![0.0; a.len()];
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    a.iter()
        .zip(b)
        .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
        .collect()
}
