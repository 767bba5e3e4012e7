use crate::error::Result;
use crate::generator::{GeneratorModel, LatentCode};
use crate::image::Image;
use crate::numerics::RngStream;

use super::config::SourceSpec;

/// One source image with the latent that produced it.
#[derive(Debug, Clone)]
pub struct SourceSample {
    pub latent: LatentCode,
    /// Slot `i` was taken from its pool.
    pub reused: Vec<bool>,
    /// Pool index per reused slot.
    pub pool_index: Vec<Option<usize>>,
    pub image: Image,
}

/// Draws `spec.count` images. Each slot vector comes from a fixed per-slot
/// pool with probability `reuse_prob`, otherwise it is fresh.
pub fn generate_source_stream(
    model: &GeneratorModel,
    spec: &SourceSpec,
    rng: &mut RngStream,
) -> Result<Vec<SourceSample>> {
    spec.validate()?;
    let (ns, nl) = (model.num_slots(), model.latent_len());
    let draw =
        |rng: &mut RngStream| -> Vec<f64> { rng.normal_vec(nl).into_iter().map(|v| v * spec.latent_scale).collect() };
    let pools: Vec<Vec<Vec<f64>>> = (0..ns)
        .map(|_| (0..spec.pool_size).map(|_| draw(rng)).collect())
        .collect();
    (0..spec.count)
        .map(|_| {
            let mut slots = Vec::with_capacity(ns);
            let mut reused = Vec::with_capacity(ns);
            let mut pool_index = Vec::with_capacity(ns);
            for pool in &pools {
                if rng.uniform() < spec.reuse_prob {
                    let j = rng.below(pool.len());
                    slots.push(pool[j].clone());
                    reused.push(true);
                    pool_index.push(Some(j));
                } else {
                    slots.push(draw(rng));
                    reused.push(false);
                    pool_index.push(None);
                }
            }
            let latent = LatentCode::from_slots(&slots)?;
            let image = model.generate(&latent)?;
            Ok(SourceSample {
                latent,
                reused,
                pool_index,
                image,
            })
        })
        .collect()
}
