//! Numerical substrate: seeded random streams, the differentiable objective
//! contract, a central-difference gradient oracle and the Adam optimizer.
//!
//! # Random streams
//!
//! [`RngStream`] wraps `ChaCha8Rng` (rand_chacha 0.9). The 64-bit seed is
//! expanded to a ChaCha key with `SeedableRng::seed_from_u64` and the stream id
//! selects the ChaCha stream (nonce), so `(seed, stream_id)` pairs address
//! disjoint keystreams. Child streams created with [`RngStream::fork`] get a
//! fresh key derived with SplitMix64 from `(seed, stream_id, label)`. Normal
//! draws use `rand_distr::StandardNormal` (ziggurat), uniform draws use
//! `rand`'s 53-bit `f64` conversion; both are platform independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// Reproducible random stream addressed by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

pub fn seeded_rng(seed: u64, stream_id: u64) -> RngStream {
    RngStream::new(seed, stream_id)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream. Depends only on this stream's identity and
    /// `label`, never on how many samples have been drawn from it.
    pub fn fork(&self, label: u64) -> RngStream {
        let key = splitmix64(self.seed ^ splitmix64(self.stream_id ^ splitmix64(label)));
        RngStream::new(key, label)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }
}

/// A scalar function with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Objective built from a pair of closures; mostly useful in tests.
pub struct FnObjective<V, G> {
    dim: usize,
    value: V,
    grad: G,
}

impl<V, G> FnObjective<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    pub fn new(dim: usize, value: V, grad: G) -> Self {
        Self { dim, value, grad }
    }
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        ensure_len("objective input", x.len(), self.dim)?;
        Ok((self.value)(x))
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        ensure_len("objective input", x.len(), self.dim)?;
        Ok(((self.value)(x), (self.grad)(x)))
    }
}

/// Central-difference gradient. The step for coordinate `i` is
/// `step * max(1, |x_i|)`.
pub fn finite_diff_grad<O: Objective + ?Sized>(objective: &O, point: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::contract("finite difference step must be positive"));
    }
    ensure_len("finite difference point", point.len(), objective.dim())?;
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let h = step * point[i].abs().max(1.0);
        probe[i] = point[i] + h;
        let fp = objective.value(&probe)?;
        probe[i] = point[i] - h;
        let fm = objective.value(&probe)?;
        probe[i] = point[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { coordinate: i });
        }
        // (x+h) - (x-h) is not exactly 2h in floating point.
        let span = (point[i] + h) - (point[i] - h);
        grad.push((fp - fm) / span);
    }
    Ok(grad)
}

/// Worst coordinate-wise relative error `|a-b| / max(|a|, |b|, floor)`.
/// Returns `(error, coordinate)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, b))| ((a - b).abs() / a.abs().max(b.abs()).max(floor), i))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

/// Outcome of comparing an analytic gradient with the finite-difference oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic_norm: f64,
}

/// Default oracle settings: relative step 1e-5, denominators clamped at 1e-8.
pub fn gradient_check<O: Objective + ?Sized>(objective: &O, point: &[f64]) -> Result<GradCheck> {
    let (_, analytic) = objective.value_and_grad(point)?;
    let numeric = finite_diff_grad(objective, point, 1e-5)?;
    let (err, idx) = max_relative_error(&analytic, &numeric, 1e-8);
    Ok(GradCheck {
        max_relative_error: err,
        worst_coordinate: idx,
        analytic_norm: analytic.iter().map(|g| g * g).sum::<f64>().sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            config,
        }
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, variable: &mut [f64], gradient: &[f64]) -> Result<()> {
        ensure_len("adam variable", variable.len(), self.first_moment.len())?;
        ensure_len("adam gradient", gradient.len(), self.first_moment.len())?;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((x, &g), m), v) in variable
            .iter_mut()
            .zip(gradient)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Value-returning form of [`OptimizerState::step`].
pub fn adam_step(
    mut state: OptimizerState,
    mut variable: Vec<f64>,
    gradient: &[f64],
) -> Result<(OptimizerState, Vec<f64>)> {
    state.step(&mut variable, gradient)?;
    Ok((state, variable))
}
