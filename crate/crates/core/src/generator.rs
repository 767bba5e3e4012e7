//! Structured latent codes and a compositional toy generator.
//!
//! The toy generator keeps the one property the codebook depends on:
//! semantic vectors control disjoint image regions. Slot 0 drives a
//! low-amplitude field over the whole image; slots `1..N_S` each own one cell
//! of a rectangular grid. Every slot goes through its own two-layer map
//!
//! ```text
//! h_i = tanh(W1_i y_i + b1_i),   r_i = W2_i h_i + b2_i
//! x   = sigmoid(r_region(p) + a · r_0)
//! ```
//!
//! so pixels outside region `i` never depend on `y_i`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::image::Image;
use crate::numerics::RngStream;

/// `N_S` semantic vectors of length `N_L`, stored slot-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    num_slots: usize,
    latent_len: usize,
    data: Vec<f64>,
}

impl LatentCode {
    pub fn new(num_slots: usize, latent_len: usize, data: Vec<f64>) -> Result<Self> {
        if num_slots == 0 || latent_len == 0 {
            return Err(Error::contract("latent needs at least one slot of positive length"));
        }
        ensure_len("latent data", data.len(), num_slots * latent_len)?;
        if !data.len().is_multiple_of(2) {
            return Err(Error::contract(format!(
                "flattened latent length {} must be even to map onto complex channel uses",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("latent has non-finite entries"));
        }
        Ok(Self {
            num_slots,
            latent_len,
            data,
        })
    }

    pub fn zeros(num_slots: usize, latent_len: usize) -> Result<Self> {
        Self::new(num_slots, latent_len, vec![0.0; num_slots * latent_len])
    }

    pub fn from_slots(slots: &[Vec<f64>]) -> Result<Self> {
        let latent_len = slots.first().map(Vec::len).unwrap_or(0);
        if slots.iter().any(|s| s.len() != latent_len) {
            return Err(Error::contract("semantic vectors must share one length"));
        }
        Self::new(slots.len(), latent_len, slots.concat())
    }

    /// Standard normal prior sample.
    pub fn sample_prior(num_slots: usize, latent_len: usize, rng: &mut RngStream) -> Result<Self> {
        Self::new(num_slots, latent_len, rng.normal_vec(num_slots * latent_len))
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn latent_len(&self) -> usize {
        self.latent_len
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.data[i * self.latent_len..(i + 1) * self.latent_len]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.latent_len..(i + 1) * self.latent_len]
    }

    pub fn slots(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.latent_len)
    }

    pub fn with_flat(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.num_slots, self.latent_len, data)
    }
}

/// Serializable description of a toy generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_slots: usize,
    pub latent_len: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Hidden width of each slot's map; defaults to `latent_len`, which keeps
    /// every slot map injective.
    pub hidden_width: Option<usize>,
    /// Slot-0 field amplitude relative to the regional maps.
    pub global_amplitude: f64,
    /// Columns of the region grid; chosen near `sqrt(N_S - 1)` when absent.
    pub grid_cols: Option<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_slots: 8,
            latent_len: 16,
            height: 32,
            width: 32,
            seed: 0,
            hidden_width: None,
            global_amplitude: 0.1,
            grid_cols: None,
        }
    }
}

impl GeneratorConfig {
    pub fn new(num_slots: usize, latent_len: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            num_slots,
            latent_len,
            height,
            width,
            seed,
            ..Self::default()
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_width.unwrap_or(self.latent_len)
    }

    /// Source bandwidth `3·H·W`.
    pub fn source_bandwidth(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_slots < 2 {
            return Err(Error::config("generator needs at least 2 slots"));
        }
        if self.latent_len == 0 || self.height == 0 || self.width == 0 || self.hidden() == 0 {
            return Err(Error::config("generator dimensions must be positive"));
        }
        if !(self.num_slots * self.latent_len).is_multiple_of(2) {
            return Err(Error::config("N_S * N_L must be even"));
        }
        if self.num_slots - 1 > self.height * self.width {
            return Err(Error::config(format!(
                "{} regions do not fit in a {}x{} image",
                self.num_slots - 1,
                self.height,
                self.width
            )));
        }
        if !(self.global_amplitude >= 0.0) {
            return Err(Error::config("global amplitude must be non-negative"));
        }
        Ok(())
    }
}

// Weight scales. Small gains keep tanh away from saturation for prior-scale
// latents so Adam at lr 0.01 converges within a few hundred steps.
const W1_GAIN: f64 = 0.5;
const B1_STD: f64 = 0.1;
const W2_GAIN: f64 = 1.0;
const B2_STD: f64 = 0.3;

#[derive(Debug, Clone)]
struct SlotMap {
    /// hidden × latent_len
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// out × hidden
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl SlotMap {
    fn random(latent_len: usize, hidden: usize, out: usize, rng: &mut RngStream) -> Self {
        let s1 = W1_GAIN / (latent_len as f64).sqrt();
        let s2 = W2_GAIN / (hidden as f64).sqrt();
        Self {
            w1: (0..hidden * latent_len).map(|_| s1 * rng.normal()).collect(),
            b1: (0..hidden).map(|_| B1_STD * rng.normal()).collect(),
            w2: (0..out * hidden).map(|_| s2 * rng.normal()).collect(),
            b2: (0..out).map(|_| B2_STD * rng.normal()).collect(),
        }
    }

    fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn hidden_act(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len();
        self.b1
            .iter()
            .zip(self.w1.chunks_exact(n))
            .map(|(b, row)| (b + dot(row, y)).tanh())
            .collect()
    }

    fn output(&self, h: &[f64]) -> Vec<f64> {
        self.b2
            .iter()
            .zip(self.w2.chunks_exact(h.len()))
            .map(|(b, row)| b + dot(row, h))
            .collect()
    }

    /// Gradient w.r.t. the slot input given the output cotangent.
    fn backward(&self, h: &[f64], d_out: &[f64], latent_len: usize) -> Vec<f64> {
        let hidden = self.hidden();
        let mut dh = vec![0.0; hidden];
        for (row, &d) in self.w2.chunks_exact(hidden).zip(d_out) {
            if d != 0.0 {
                axpy(d, row, &mut dh);
            }
        }
        let mut dy = vec![0.0; latent_len];
        for ((row, &g), &hv) in self.w1.chunks_exact(latent_len).zip(&dh).zip(h) {
            let dpre = g * (1.0 - hv * hv);
            if dpre != 0.0 {
                axpy(dpre, row, &mut dy);
            }
        }
        dy
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    hidden: Vec<Vec<f64>>,
    image: Image,
}

impl ForwardPass {
    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }
}

/// Frozen differentiable generator.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    /// Region (slot index >= 1) of every pixel.
    region_of: Vec<usize>,
    /// Pixels of each region; index 0 is empty.
    region_pixels: Vec<Vec<usize>>,
    /// Position of every pixel inside its region's pixel list.
    offset_in_region: Vec<usize>,
    maps: Vec<SlotMap>,
}

pub fn build_toy_generator(
    num_slots: usize,
    latent_len: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<GeneratorModel> {
    GeneratorModel::new(GeneratorConfig::new(num_slots, latent_len, height, width, seed))
}

/// Row-major rectangular grid with `cells` cells. Rows hold `cols` cells each
/// except the last, whose cells are stretched to fill the width.
fn grid_regions(cells: usize, height: usize, width: usize, cols: Option<usize>) -> Result<Vec<usize>> {
    let min_cols = cells.div_ceil(height);
    let cols = cols
        .unwrap_or_else(|| ((cells as f64).sqrt().ceil() as usize).clamp(min_cols.max(1), width.max(1)))
        .max(1);
    let rows = cells.div_ceil(cols);
    if cols > width || rows > height {
        return Err(Error::config(format!(
            "a {rows}x{cols} region grid does not fit in {height}x{width}"
        )));
    }
    let mut region_of = vec![0; height * width];
    for r in 0..rows {
        let y0 = r * height / rows;
        let y1 = (r + 1) * height / rows;
        let in_row = if r + 1 == rows { cells - cols * (rows - 1) } else { cols };
        for c in 0..in_row {
            let x0 = c * width / in_row;
            let x1 = (c + 1) * width / in_row;
            let slot = 1 + r * cols + c;
            for y in y0..y1 {
                for x in x0..x1 {
                    region_of[y * width + x] = slot;
                }
            }
        }
    }
    Ok(region_of)
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let (h, w) = (config.height, config.width);
        let region_of = grid_regions(config.num_slots - 1, h, w, config.grid_cols)?;
        let mut region_pixels = vec![Vec::new(); config.num_slots];
        let mut offset_in_region = vec![0; h * w];
        for (p, &r) in region_of.iter().enumerate() {
            offset_in_region[p] = region_pixels[r].len();
            region_pixels[r].push(p);
        }
        let mut rng = RngStream::new(config.seed, 0x6765_6e65);
        let hidden = config.hidden();
        let maps = (0..config.num_slots)
            .map(|i| {
                let out = if i == 0 { 3 * h * w } else { 3 * region_pixels[i].len() };
                SlotMap::random(config.latent_len, hidden, out, &mut rng)
            })
            .collect();
        Ok(Self {
            config,
            region_of,
            region_pixels,
            offset_in_region,
            maps,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn num_slots(&self) -> usize {
        self.config.num_slots
    }

    pub fn latent_len(&self) -> usize {
        self.config.latent_len
    }

    pub fn latent_dim(&self) -> usize {
        self.config.num_slots * self.config.latent_len
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn source_bandwidth(&self) -> usize {
        self.config.source_bandwidth()
    }

    /// Binary mask of slot `i >= 1` over `H×W`; slot 0 covers the whole image.
    pub fn region_mask(&self, slot: usize) -> Vec<bool> {
        if slot == 0 {
            return vec![true; self.region_of.len()];
        }
        self.region_of.iter().map(|&r| r == slot).collect()
    }

    pub fn zero_latent(&self) -> LatentCode {
        LatentCode {
            num_slots: self.num_slots(),
            latent_len: self.latent_len(),
            data: vec![0.0; self.latent_dim()],
        }
    }

    fn check_latent(&self, latent: &LatentCode) -> Result<()> {
        if latent.num_slots != self.num_slots() || latent.latent_len != self.latent_len() {
            return Err(Error::contract(format!(
                "latent is {}x{}, generator expects {}x{}",
                latent.num_slots,
                latent.latent_len,
                self.num_slots(),
                self.latent_len()
            )));
        }
        Ok(())
    }

    pub fn forward_flat(&self, latent: &[f64]) -> Result<ForwardPass> {
        ensure_len("latent", latent.len(), self.latent_dim())?;
        let nl = self.latent_len();
        let hidden: Vec<Vec<f64>> = self
            .maps
            .iter()
            .zip(latent.chunks_exact(nl))
            .map(|(m, y)| m.hidden_act(y))
            .collect();
        let outputs: Vec<Vec<f64>> = self.maps.iter().zip(&hidden).map(|(m, h)| m.output(h)).collect();
        let plane = self.height() * self.width();
        let amp = self.config.global_amplitude;
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            for p in 0..plane {
                let r = self.region_of[p];
                let n = self.region_pixels[r].len();
                let regional = outputs[r][c * n + self.offset_in_region[p]];
                let global = outputs[0][c * plane + p];
                data[c * plane + p] = sigmoid(regional + amp * global);
            }
        }
        Ok(ForwardPass {
            hidden,
            image: Image::new(3, self.height(), self.width(), data)?,
        })
    }

    pub fn forward(&self, latent: &LatentCode) -> Result<ForwardPass> {
        self.check_latent(latent)?;
        self.forward_flat(&latent.data)
    }

    pub fn generate(&self, latent: &LatentCode) -> Result<Image> {
        Ok(self.forward(latent)?.image)
    }

    /// `Jᵀ·cotangent` using a cached forward pass.
    pub fn backward(&self, pass: &ForwardPass, cotangent: &Image) -> Result<Vec<f64>> {
        pass.image.ensure_same_shape(cotangent)?;
        let plane = self.height() * self.width();
        let amp = self.config.global_amplitude;
        let x = pass.image.data();
        let g = cotangent.data();
        let mut d_out: Vec<Vec<f64>> = self
            .region_pixels
            .iter()
            .enumerate()
            .map(|(i, px)| {
                if i == 0 {
                    vec![0.0; 3 * plane]
                } else {
                    vec![0.0; 3 * px.len()]
                }
            })
            .collect();
        for c in 0..3 {
            for p in 0..plane {
                let idx = c * plane + p;
                let dpre = g[idx] * x[idx] * (1.0 - x[idx]);
                let r = self.region_of[p];
                let n = self.region_pixels[r].len();
                d_out[r][c * n + self.offset_in_region[p]] = dpre;
                d_out[0][idx] = amp * dpre;
            }
        }
        let nl = self.latent_len();
        let mut grad = Vec::with_capacity(self.latent_dim());
        for ((m, h), d) in self.maps.iter().zip(&pass.hidden).zip(&d_out) {
            grad.extend(m.backward(h, d, nl));
        }
        Ok(grad)
    }

    pub fn generate_vjp(&self, latent: &LatentCode, cotangent: &Image) -> Result<Vec<f64>> {
        let pass = self.forward(latent)?;
        self.backward(&pass, cotangent)
    }
}
