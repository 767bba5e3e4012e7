//! Complex baseband signal path and the digital side link used for cache
//! indices.
//!
//! Real latent vectors of length `2k` map onto `k` complex channel uses by
//! pairing adjacent entries as real and imaginary parts. Every transmitted
//! signal is power normalized so that `‖z‖² = k·P̄`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// `k` complex channel uses.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSignal {
    samples: Vec<Complex64>,
}

impl ComplexSignal {
    pub fn new(samples: Vec<Complex64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("complex signal needs at least one sample"));
        }
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::contract("complex signal has non-finite samples"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    /// Channel uses.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `zᴴz`.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        self.energy() / self.len() as f64
    }
}

/// Transmit-side channel description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    #[serde(default = "unit_power")]
    pub power_constraint: f64,
    /// Noiseless channel; `snr_db` is ignored.
    #[serde(default)]
    pub noiseless: bool,
}

fn unit_power() -> f64 {
    1.0
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64) -> Self {
        Self {
            snr_db,
            power_constraint: 1.0,
            noiseless: false,
        }
    }

    pub fn noiseless() -> Self {
        Self {
            snr_db: f64::INFINITY,
            power_constraint: 1.0,
            noiseless: true,
        }
    }

    /// Noise variance per complex sample, `None` on a noiseless channel.
    pub fn sigma2(&self) -> Option<f64> {
        if self.noiseless {
            None
        } else {
            Some(snr_to_sigma2(self.snr_db, self.power_constraint))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power_constraint > 0.0) || !self.power_constraint.is_finite() {
            return Err(Error::config("power constraint must be positive and finite"));
        }
        if !self.noiseless {
            let s = snr_to_sigma2(self.snr_db, self.power_constraint);
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::config(format!(
                    "SNR {} dB gives a degenerate noise variance; use the noiseless flag",
                    self.snr_db
                )));
            }
        }
        Ok(())
    }
}

/// Pairs adjacent reals into complex samples: `[a, b, c, d] -> [a+bi, c+di]`.
pub fn to_complex(real: &[f64]) -> Result<ComplexSignal> {
    if !real.len().is_multiple_of(2) {
        return Err(Error::contract(format!(
            "cannot map odd-length vector ({}) onto complex channel uses",
            real.len()
        )));
    }
    ComplexSignal::new(real.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect())
}

/// Inverse of [`to_complex`].
pub fn from_complex(signal: &ComplexSignal) -> Vec<f64> {
    signal.samples.iter().flat_map(|s| [s.re, s.im]).collect()
}

/// Scales `signal` so that its energy equals `k·P̄`.
pub fn power_normalize(signal: &ComplexSignal, power_constraint: f64) -> Result<ComplexSignal> {
    if !(power_constraint > 0.0) {
        return Err(Error::contract("power constraint must be positive"));
    }
    // Shares the real-domain path so both give bit-identical results.
    let (scaled, _) = normalize_real(&from_complex(signal), power_constraint)?;
    to_complex(&scaled)
}

pub fn snr_to_sigma2(snr_db: f64, power_constraint: f64) -> f64 {
    power_constraint / 10f64.powf(snr_db / 10.0)
}

pub fn sigma2_to_snr(sigma2: f64, power_constraint: f64) -> f64 {
    10.0 * (power_constraint / sigma2).log10()
}

/// Draws circularly-symmetric complex Gaussian noise as interleaved reals,
/// variance `σ²/2` per component.
pub fn complex_noise(len_real: usize, sigma2: f64, rng: &mut RngStream) -> Vec<f64> {
    let std = (sigma2 / 2.0).sqrt();
    (0..len_real).map(|_| std * rng.normal()).collect()
}

/// Additive white Gaussian noise with total variance `σ²` per complex sample.
pub fn awgn(signal: &ComplexSignal, sigma2: f64, rng: &mut RngStream) -> Result<ComplexSignal> {
    if !(sigma2 >= 0.0) {
        return Err(Error::contract("noise variance must be non-negative"));
    }
    if sigma2 == 0.0 {
        return Ok(signal.clone());
    }
    let std = (sigma2 / 2.0).sqrt();
    let samples = signal
        .samples
        .iter()
        .map(|s| {
            let re = std * rng.normal();
            let im = std * rng.normal();
            s + Complex64::new(re, im)
        })
        .collect();
    ComplexSignal::new(samples)
}

/// Power normalization in the real domain, `y · sqrt(kP̄/‖y‖²)` with `k = len/2`,
/// plus its scale factor.
pub(crate) fn normalize_real(latent: &[f64], power_constraint: f64) -> Result<(Vec<f64>, f64)> {
    if !latent.len().is_multiple_of(2) {
        return Err(Error::contract(format!(
            "cannot map odd-length vector ({}) onto complex channel uses",
            latent.len()
        )));
    }
    let energy: f64 = latent.iter().map(|v| v * v).sum();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(Error::DegenerateSignal(
            "zero-energy signal cannot meet the power constraint".into(),
        ));
    }
    let k = (latent.len() / 2) as f64;
    let scale = (k * power_constraint / energy).sqrt();
    Ok((latent.iter().map(|v| v * scale).collect(), scale))
}

/// The channel-aware forward map `C⁻¹(PN(C(y)) + n)` for one fixed noise
/// realization, with its vector-Jacobian product.
#[derive(Debug, Clone)]
pub struct ChannelForward {
    power_constraint: f64,
    /// Interleaved real/imag noise; empty means noiseless.
    noise: Vec<f64>,
}

impl ChannelForward {
    pub fn new(power_constraint: f64, noise: Vec<f64>) -> Self {
        Self {
            power_constraint,
            noise,
        }
    }

    pub fn noiseless(power_constraint: f64) -> Self {
        Self::new(power_constraint, Vec::new())
    }

    /// Draws one realization of `n ~ CN(0, σ̂² I)` for a latent of `len` reals.
    pub fn sample(len: usize, sigma2_hat: f64, power_constraint: f64, rng: &mut RngStream) -> Self {
        if sigma2_hat > 0.0 {
            Self::new(power_constraint, complex_noise(len, sigma2_hat, rng))
        } else {
            Self::noiseless(power_constraint)
        }
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn apply(&self, latent: &[f64]) -> Result<Vec<f64>> {
        let (mut out, _) = normalize_real(latent, self.power_constraint)?;
        if !self.noise.is_empty() {
            if self.noise.len() != latent.len() {
                return Err(Error::contract("noise realization length mismatch"));
            }
            for (o, n) in out.iter_mut().zip(&self.noise) {
                *o += n;
            }
        }
        Ok(out)
    }

    /// `Jᵀ·cotangent` at `latent`. Noise is constant, so only the normalization
    /// contributes: `J = s(I − y yᵀ/‖y‖²)`.
    pub fn vjp(&self, latent: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        if cotangent.len() != latent.len() {
            return Err(Error::contract("cotangent length mismatch"));
        }
        let (_, scale) = normalize_real(latent, self.power_constraint)?;
        let energy: f64 = latent.iter().map(|v| v * v).sum();
        let radial: f64 = latent.iter().zip(cotangent).map(|(y, g)| y * g).sum::<f64>() / energy;
        Ok(latent
            .iter()
            .zip(cotangent)
            .map(|(y, g)| scale * (g - radial * y))
            .collect())
    }
}

/// One draw of the channel-aware forward map.
pub fn channel_forward_a(
    latent: &[f64],
    sigma2_hat: f64,
    power_constraint: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if !(sigma2_hat >= 0.0) {
        return Err(Error::contract("estimated noise variance must be non-negative"));
    }
    ChannelForward::sample(latent.len(), sigma2_hat, power_constraint, rng).apply(latent)
}

/// Digital link carrying cache indices: channel code of rate `R_c`, `M` bits
/// per modulated symbol, independent bit errors with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexLinkConfig {
    pub code_rate: f64,
    pub bits_per_symbol: u32,
    pub bit_error_rate: f64,
}

impl Default for IndexLinkConfig {
    /// Rate-1/3 code with BPSK, error free.
    fn default() -> Self {
        Self {
            code_rate: 1.0 / 3.0,
            bits_per_symbol: 1,
            bit_error_rate: 0.0,
        }
    }
}

impl IndexLinkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.code_rate > 0.0 && self.code_rate <= 1.0) {
            return Err(Error::config("code rate must lie in (0, 1]"));
        }
        if self.bits_per_symbol == 0 {
            return Err(Error::config("bits per symbol must be at least 1"));
        }
        // p = 1 is allowed: it is a deterministic flip, handy for testing.
        if !(0.0..=1.0).contains(&self.bit_error_rate) {
            return Err(Error::config("bit error rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Bits of the fixed-length code for one flat index, `⌈log₂(N_C·N_S)⌉`
/// (at least 1).
pub fn index_bits(capacity: usize, num_slots: usize) -> u32 {
    let n = (capacity * num_slots).max(1) as u64;
    // ceil(log2(n)) for n >= 1
    let bits = 64 - (n - 1).leading_zeros();
    bits.max(1)
}

/// Modulated symbols needed for `num_indices` indices,
/// `⌈num_indices · bits / (R_c · M)⌉`.
pub fn index_symbol_cost(num_indices: usize, link: &IndexLinkConfig, capacity: usize, num_slots: usize) -> u64 {
    if num_indices == 0 {
        return 0;
    }
    let coded = (num_indices as u64 * index_bits(capacity, num_slots) as u64) as f64
        / (link.code_rate * link.bits_per_symbol as f64);
    // 11 / (1/3) evaluates to 33.000000000000004; snap near-integers first.
    let nearest = coded.round();
    if (coded - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as u64
    } else {
        coded.ceil() as u64
    }
}

/// Index as seen by the receiver after the digital link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceivedIndex {
    pub value: usize,
    /// Set when any bit flipped or the value falls outside the index space.
    pub corrupted: bool,
}

/// Sends each index through the bit-flip model. `bits` is the code length and
/// `index_space` the number of valid indices.
pub fn index_link_transmit(
    indices: &[usize],
    bits: u32,
    index_space: usize,
    link: &IndexLinkConfig,
    rng: &mut RngStream,
) -> Vec<ReceivedIndex> {
    indices
        .iter()
        .map(|&sent| {
            let mut value = sent;
            if link.bit_error_rate > 0.0 {
                for b in 0..bits {
                    if rng.uniform() < link.bit_error_rate {
                        value ^= 1 << b;
                    }
                }
            }
            ReceivedIndex {
                value,
                corrupted: value != sent || value >= index_space,
            }
        })
        .collect()
}
