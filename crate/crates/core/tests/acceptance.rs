//! Acceptance criteria 1-13, run sequentially with one pass/fail line each.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

use cagi_jscc::cdc::{CacheConfig, CacheEntry, SemanticCache};
use cagi_jscc::cdc_pipeline::{cdc_transmit, CachedForward, StraightThroughObjective, TwoStageConfig};
use cagi_jscc::channel::{
    awgn, from_complex, index_bits, index_symbol_cost, power_normalize, snr_to_sigma2, to_complex, ChannelConfig,
    ChannelForward, IndexLinkConfig,
};
use cagi_jscc::generator::{build_toy_generator, GeneratorConfig, GeneratorModel, LatentCode};
use cagi_jscc::harness::{generate_source_stream, run_sequence, ExperimentConfig, SnrMode, SourceSpec};
use cagi_jscc::image::Image;
use cagi_jscc::inversion::{
    channel_aware_invert, plain_invert, transmit_cagi, ChannelAwareObjective, InversionConfig, LatentInit,
    MseObjective, ReconstructionMetrics, TransmissionRecord,
};
use cagi_jscc::numerics::{finite_diff_grad, Objective, RngStream};
use cagi_jscc::objective::{cosine_similarity, ms_ssim, psnr, CombinedLoss, LossConfig};

type Outcome = std::result::Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> std::result::Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("runtime {:.1}s exceeds {limit_s}s", elapsed.as_secs_f64())
    })
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn prior_target(model: &GeneratorModel, rng: &mut RngStream, scale: f64) -> Image {
    let y: Vec<f64> = rng
        .normal_vec(model.latent_dim())
        .into_iter()
        .map(|v| v * scale)
        .collect();
    model
        .generate(&LatentCode::new(model.num_slots(), model.latent_len(), y).unwrap())
        .unwrap()
}

/// Image MSE after sending `latent` through one AWGN draw at `snr_db`.
fn received_mse(model: &GeneratorModel, latent: &LatentCode, target: &Image, snr_db: f64, rng: &mut RngStream) -> f64 {
    let z = power_normalize(&to_complex(latent.flat()).unwrap(), 1.0).unwrap();
    let r = awgn(&z, snr_to_sigma2(snr_db, 1.0), rng).unwrap();
    let y = latent.with_flat(from_complex(&r)).unwrap();
    model.generate(&y).unwrap().mse(target).unwrap()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

// 1. Power constraint over randomized pipeline runs.
fn power_constraint() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(101, 0);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for run in 0..1000u64 {
        let ns = 2 + rng.below(3);
        let nl = 2 * (1 + rng.below(4));
        let model = build_toy_generator(ns, nl, 8, 8, run).map_err(e2s)?;
        let target = prior_target(&model, &mut rng, 1.0);
        let p = rng.uniform_range(0.2, 4.0);
        let channel = ChannelConfig {
            snr_db: rng.uniform_range(-5.0, 20.0),
            power_constraint: p,
            noiseless: false,
        };
        let inv = InversionConfig {
            max_iters: 2,
            ..InversionConfig::default()
        };
        let mut round_rng = rng.fork(run);
        let record = if run % 2 == 0 {
            transmit_cagi(&model, &target, &channel, 1.0, &inv, &mut round_rng)
                .map_err(e2s)?
                .1
        } else {
            let cache_cfg = CacheConfig {
                thresholds: "uniform:0.0".into(),
                ..CacheConfig::default()
            };
            let mut tx = cache_cfg.build(ns, nl).map_err(e2s)?;
            let mut rx = tx.clone();
            // A first round fills the caches so the second sends a partial payload.
            let cfg = TwoStageConfig {
                stage1: inv,
                stage2_iters: 2,
                freeze_hits: true,
            };
            let link = IndexLinkConfig::default();
            cdc_transmit(
                &model,
                &target,
                &mut tx,
                &mut rx,
                &channel,
                1.0,
                &link,
                &cfg,
                &mut round_rng.fork(1),
            )
            .map_err(e2s)?;
            let target2 = prior_target(&model, &mut rng, 1.0);
            cdc_transmit(
                &model,
                &target2,
                &mut tx,
                &mut rx,
                &channel,
                1.0,
                &link,
                &cfg,
                &mut round_rng.fork(2),
            )
            .map_err(e2s)?
            .1
        };
        let k = record.analog_complex_symbols as f64;
        if k == 0.0 {
            ensure(record.tx_signal_energy == 0.0, || {
                "energy sent with an empty payload".into()
            })?;
            continue;
        }
        let expect = k * p;
        worst = worst.max((record.tx_signal_energy - expect).abs() / expect);
        checked += 1;
    }
    ensure(worst <= 1e-9, || format!("worst relative energy error {worst:e}"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "{checked} signals, worst relative error {worst:.1e}, {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

// 2. BCR accounting at full scale.
fn bcr_accounting() -> Outcome {
    let gen = GeneratorConfig::new(24, 512, 512, 512, 0);
    let k = (gen.num_slots * gen.latent_len / 2) as u64;
    let metrics = ReconstructionMetrics {
        psnr_db: 0.0,
        ms_ssim: 0.0,
        l1: 0.0,
    };
    let r = TransmissionRecord::new(k, 0, gen.source_bandwidth() as u64, metrics).map_err(e2s)?;
    ensure(r.bcr() == Ratio::new(1, 128), || format!("bcr {}", r.bcr()))?;
    ensure(r.bcr().to_string() == "1/128", || format!("printed as {}", r.bcr()))?;
    // 6144 / 786432 by hand.
    ensure(k == 6144 && gen.source_bandwidth() == 786_432, || {
        "dimension bookkeeping".into()
    })?;
    Ok(format!("{}/{} = {}", k, gen.source_bandwidth(), r.bcr()))
}

// 3. Index coding costs.
fn index_coding() -> Outcome {
    fn oracle_bits(n: usize) -> u32 {
        let mut b = 0;
        while (1usize << b) < n {
            b += 1;
        }
        b
    }
    let link = IndexLinkConfig::default();
    ensure(index_bits(50, 28) == 11, || format!("bits {}", index_bits(50, 28)))?;
    ensure(index_symbol_cost(1, &link, 50, 28) == 33, || {
        format!("symbols {}", index_symbol_cost(1, &link, 50, 28))
    })?;
    let got: Vec<u32> = [30, 50, 70, 90].iter().map(|&c| index_bits(c, 28)).collect();
    ensure(got == vec![10, 11, 11, 12], || format!("{got:?}"))?;
    for c in [30, 50, 70, 90] {
        let b = oracle_bits(c * 28);
        ensure(index_bits(c, 28) == b, || format!("N_C={c}: oracle {b}"))?;
        ensure(index_symbol_cost(1, &link, c, 28) == 3 * b as u64, || {
            format!("N_C={c} symbol cost")
        })?;
    }
    Ok(format!("bits {got:?}, 33 symbols per index at N_C=50"))
}

/// Straight-through objective written as a plain function of `y`: frozen
/// slots are `y + (c - anchor)`, analog slots go through the noisy
/// normalized channel.
struct SurrogateSt<'a> {
    model: &'a GeneratorModel,
    loss: &'a CombinedLoss,
    frozen: Vec<Option<Vec<f64>>>,
    analog: Vec<usize>,
    noise: Vec<f64>,
    anchor: Vec<f64>,
    st: StraightThroughObjective<'a>,
}

impl Objective for SurrogateSt<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn value(&self, y: &[f64]) -> cagi_jscc::Result<f64> {
        let nl = self.model.latent_len();
        let payload: Vec<f64> = self
            .analog
            .iter()
            .flat_map(|&i| y[i * nl..(i + 1) * nl].to_vec())
            .collect();
        let mut a = y.to_vec();
        if !payload.is_empty() {
            let energy: f64 = payload.iter().map(|v| v * v).sum();
            let scale = (payload.len() as f64 / 2.0 / energy).sqrt();
            for (k, &i) in self.analog.iter().enumerate() {
                for t in 0..nl {
                    a[i * nl + t] = scale * payload[k * nl + t] + self.noise[k * nl + t];
                }
            }
        }
        for (i, c) in self.frozen.iter().enumerate() {
            if let Some(c) = c {
                for t in 0..nl {
                    a[i * nl + t] = y[i * nl + t] + (c[t] - self.anchor[i * nl + t]);
                }
            }
        }
        self.loss.value(self.model.forward_flat(&a)?.image())
    }

    fn value_and_grad(&self, y: &[f64]) -> cagi_jscc::Result<(f64, Vec<f64>)> {
        self.st.value_and_grad(y)
    }
}

// 4. Gradient oracle for the three objectives.
fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 3];
    for seed in 0..5u64 {
        let mut rng = RngStream::new(400 + seed, 0);
        let model = build_toy_generator(4, 8, 16, 16, seed).map_err(e2s)?;
        let target = prior_target(&model, &mut rng, 1.0);
        let y = rng.normal_vec(model.latent_dim());
        let check = |obj: &dyn Objective| -> std::result::Result<f64, String> {
            let (_, g) = obj.value_and_grad(&y).map_err(e2s)?;
            let fd = finite_diff_grad(obj, &y, 1e-5).map_err(e2s)?;
            Ok(relative_error(&g, &fd))
        };
        worst[0] = worst[0].max(check(&MseObjective::new(&model, &target).map_err(e2s)?)?);

        let loss = CombinedLoss::new(&LossConfig::default(), &target).map_err(e2s)?;
        let sigma2 = snr_to_sigma2(0.0, 1.0);
        let fwd = ChannelForward::sample(model.latent_dim(), sigma2, 1.0, &mut rng);
        worst[1] = worst[1].max(check(&ChannelAwareObjective::new(&model, &loss, fwd).map_err(e2s)?)?);

        // Slots 0 and 2 hit entries near the point, slots 1 and 3 miss.
        let cache_cfg = CacheConfig {
            thresholds: "uniform:0.9".into(),
            ..CacheConfig::default()
        };
        let mut cache = cache_cfg.build(4, 8).map_err(e2s)?;
        let mut frozen = vec![None; 4];
        for i in 0..4 {
            let v: Vec<f64> = if i % 2 == 0 {
                y[i * 8..(i + 1) * 8].iter().map(|v| v + 0.05 * rng.normal()).collect()
            } else {
                rng.normal_vec(8)
            };
            cache.insert(i, &v, 0.0).map_err(e2s)?;
            if i % 2 == 0 {
                frozen[i] = Some(v);
            }
        }
        let latent = LatentCode::new(4, 8, y.clone()).map_err(e2s)?;
        let plan = cache.plan_reduction(&latent, None).map_err(e2s)?;
        ensure(plan.hit_mask == vec![true, false, true, false], || {
            format!("hit mask {:?}", plan.hit_mask)
        })?;
        let cached = CachedForward::new(&cache, plan).map_err(e2s)?;
        let ch = cached.sample_channel(sigma2, 1.0, &mut rng);
        let surrogate = SurrogateSt {
            model: &model,
            loss: &loss,
            frozen,
            analog: vec![1, 3],
            noise: ch.noise().to_vec(),
            anchor: y.clone(),
            st: StraightThroughObjective::new(&model, &loss, &cached, ch).map_err(e2s)?,
        };
        let st_value = surrogate.st.value(&y).map_err(e2s)?;
        let sur_value = surrogate.value(&y).map_err(e2s)?;
        ensure((st_value - sur_value).abs() <= 1e-12 * st_value.abs().max(1.0), || {
            format!("surrogate value {sur_value} vs {st_value}")
        })?;
        worst[2] = worst[2].max(check(&surrogate)?);
    }
    ensure(worst.iter().all(|&w| w < 1e-3), || format!("worst errors {worst:?}"))?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "max rel err mse {:.1e}, channel-aware {:.1e}, straight-through {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

// 5. Plain inversion reaches a self-generated target.
fn inversion_oracle() -> Outcome {
    let start = Instant::now();
    let mut mses = Vec::new();
    for seed in 0..5u64 {
        let model = GeneratorModel::new(GeneratorConfig {
            seed,
            ..GeneratorConfig::default()
        })
        .map_err(e2s)?;
        let mut rng = RngStream::new(500 + seed, 0);
        let target = prior_target(&model, &mut rng, 1.0);
        let y = plain_invert(&model, &target, &InversionConfig::default(), &mut rng).map_err(e2s)?;
        mses.push(model.generate(&y).map_err(e2s)?.mse(&target).map_err(e2s)?);
    }
    let passed = mses.iter().filter(|&&m| m < 1e-3).count();
    ensure(passed == 5, || format!("{passed}/5 below 1e-3: {mses:?}"))?;
    within(start.elapsed(), 120.0)?;
    let worst = mses.iter().copied().fold(0.0, f64::max);
    Ok(format!("5/5 seeds, worst MSE {worst:.2e}"))
}

// 6. Channel-aware inversion beats raw transmission at 0 dB.
fn channel_aware_benefit() -> Outcome {
    let start = Instant::now();
    let (mut wins, mut sum_ca, mut sum_raw) = (0, 0.0, 0.0);
    let trials = 20;
    for seed in 0..trials {
        let model = GeneratorModel::new(GeneratorConfig {
            seed,
            ..GeneratorConfig::default()
        })
        .map_err(e2s)?;
        let mut rng = RngStream::new(600 + seed, 0);
        let target = prior_target(&model, &mut rng, std::f64::consts::FRAC_1_SQRT_2);
        let cfg = InversionConfig::default();
        let plain = plain_invert(&model, &target, &cfg, &mut rng.fork(1)).map_err(e2s)?;
        let ca = channel_aware_invert(
            &model,
            &target,
            snr_to_sigma2(0.0, 1.0),
            &cfg.with_init(&plain),
            &mut rng.fork(2),
        )
        .map_err(e2s)?;
        let eval = rng.fork(3);
        let (mut raw_mse, mut ca_mse) = (0.0, 0.0);
        for draw in 0..8 {
            // Same noise for both latents.
            let mut a = eval.fork(draw);
            let mut b = a.clone();
            raw_mse += received_mse(&model, &plain, &target, 0.0, &mut a) / 8.0;
            ca_mse += received_mse(&model, &ca, &target, 0.0, &mut b) / 8.0;
        }
        wins += (ca_mse < raw_mse) as usize;
        sum_ca += ca_mse;
        sum_raw += raw_mse;
    }
    let n = trials as f64;
    ensure(wins >= 15, || format!("{wins}/20 wins"))?;
    ensure(sum_ca < sum_raw, || {
        format!("mean MSE {} vs raw {}", sum_ca / n, sum_raw / n)
    })?;
    within(start.elapsed(), 600.0)?;
    Ok(format!(
        "{wins}/20 wins, mean MSE {:.5} vs raw {:.5}",
        sum_ca / n,
        sum_raw / n
    ))
}

// 7. Optimizing for 0 dB while the channel is at 5 dB.
fn imperfect_snr() -> Outcome {
    let (mut mismatched, mut matched) = (0.0, 0.0);
    for seed in 0..10u64 {
        let model = GeneratorModel::new(GeneratorConfig {
            seed,
            ..GeneratorConfig::default()
        })
        .map_err(e2s)?;
        let mut rng = RngStream::new(700 + seed, 0);
        let target = prior_target(&model, &mut rng, std::f64::consts::FRAC_1_SQRT_2);
        let channel = ChannelConfig::awgn(5.0);
        let cfg = InversionConfig::default();
        let round = rng.fork(1);
        let (_, a) = transmit_cagi(
            &model,
            &target,
            &channel,
            snr_to_sigma2(0.0, 1.0),
            &cfg,
            &mut round.clone(),
        )
        .map_err(e2s)?;
        let (_, b) = transmit_cagi(
            &model,
            &target,
            &channel,
            snr_to_sigma2(5.0, 1.0),
            &cfg,
            &mut round.clone(),
        )
        .map_err(e2s)?;
        mismatched += a.metrics.psnr_db / 10.0;
        matched += b.metrics.psnr_db / 10.0;
    }
    let gap = matched - mismatched;
    ensure(gap <= 1.5, || {
        format!("gap {gap:.3} dB (matched {matched:.2}, mismatched {mismatched:.2})")
    })?;
    Ok(format!(
        "matched {matched:.2} dB, mismatched {mismatched:.2} dB, gap {gap:.2} dB"
    ))
}

fn cdc_experiment(reuse_prob: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        generator: GeneratorConfig {
            hidden_width: Some(512),
            global_amplitude: 0.5,
            ..GeneratorConfig::new(4, 512, 32, 32, 1)
        },
        seed: 1,
        ..ExperimentConfig::default()
    };
    cfg.channel.snr = SnrMode::Uniform {
        min_db: 0.0,
        max_db: 5.0,
    };
    cfg.inversion.stage1.max_iters = 150;
    cfg.inversion.stage1.init = LatentInit::Provided(vec![0.0; 4 * 512]);
    cfg.inversion.stage2_iters = 50;
    cfg.cache.thresholds = "uniform:0.8".into();
    cfg.source = SourceSpec {
        count: 100,
        pool_size: 10,
        reuse_prob,
        ..SourceSpec::default()
    };
    cfg
}

// 8. CDC efficiency on a correlated stream.
fn cdc_efficiency() -> Outcome {
    let start = Instant::now();
    let mut no_cache = cdc_experiment(0.7);
    no_cache.use_cache = false;
    no_cache.source.count = 1;
    let baseline = run_sequence(&no_cache).map_err(e2s)?.records[0].record.bcr();

    let mut mean_hits = Vec::new();
    let mut main = None;
    for reuse in [0.3, 0.5, 0.7] {
        let report = run_sequence(&cdc_experiment(reuse)).map_err(e2s)?;
        ensure(report.errors.is_empty(), || {
            format!("round errors at reuse {reuse}: {:?}", report.errors)
        })?;
        let hits: usize = report.records.iter().map(|r| r.record.hits()).sum();
        mean_hits.push(hits as f64 / report.records.len() as f64);
        if reuse == 0.7 {
            main = Some(report);
        }
    }
    let report = main.expect("reuse 0.7 ran");
    let first = report.records[0].record.bcr();
    ensure(first == baseline, || {
        format!("round-1 BCR {first} vs no-cache {baseline}")
    })?;
    let late: Vec<f64> = report
        .records
        .iter()
        .filter(|r| r.round > 50)
        .map(|r| r.record.bcr_f64())
        .collect();
    ensure(late.len() == 50, || format!("{} late rounds", late.len()))?;
    let late_mean = late.iter().sum::<f64>() / 50.0;
    let ratio = late_mean / (*first.numer() as f64 / *first.denom() as f64);
    ensure(ratio <= 0.6, || format!("late mean BCR / round-1 BCR = {ratio:.3}"))?;
    ensure(mean_hits.windows(2).all(|w| w[0] <= w[1]), || {
        format!("mean hits per round at reuse 0.3/0.5/0.7: {mean_hits:?}")
    })?;
    within(start.elapsed(), 900.0)?;
    Ok(format!(
        "round-1 BCR {first}, late/round-1 {ratio:.3}, mean hits {:.2}/{:.2}/{:.2}, {:.0}s",
        mean_hits[0],
        mean_hits[1],
        mean_hits[2],
        start.elapsed().as_secs_f64()
    ))
}

// 9. Transmitter and receiver caches stay in sync.
fn cache_sync() -> Outcome {
    let mut rng = RngStream::new(900, 0);
    let mut rounds = 0;
    let mut total_hits = 0;
    let mut run = 0u64;
    while rounds < 1000 {
        let ns = 2 + rng.below(3);
        let nl = 2 * (1 + rng.below(3));
        let model = build_toy_generator(ns, nl, 8, 8, run).map_err(e2s)?;
        let cache_cfg = CacheConfig {
            capacity: 1 + rng.below(5),
            alpha: [0.0, 0.5, 1.0][rng.below(3)],
            thresholds: format!("uniform:{}", [0.0, 0.3, 0.6][rng.below(3)]),
            ..CacheConfig::default()
        };
        let mut tx = cache_cfg.build(ns, nl).map_err(e2s)?;
        let mut rx = tx.clone();
        let stream = generate_source_stream(
            &model,
            &SourceSpec {
                count: 50,
                pool_size: 3,
                reuse_prob: 0.6,
                ..SourceSpec::default()
            },
            &mut rng.fork(run),
        )
        .map_err(e2s)?;
        let cfg = TwoStageConfig {
            stage1: InversionConfig {
                max_iters: 2,
                ..InversionConfig::default()
            },
            stage2_iters: 1,
            freeze_hits: true,
        };
        for (k, s) in stream.iter().enumerate() {
            let channel = if rng.below(10) == 0 {
                ChannelConfig::noiseless()
            } else {
                ChannelConfig::awgn(rng.uniform_range(0.0, 5.0))
            };
            let (_, rec) = cdc_transmit(
                &model,
                &s.image,
                &mut tx,
                &mut rx,
                &channel,
                snr_to_sigma2(2.5, 1.0),
                &IndexLinkConfig::default(),
                &cfg,
                &mut rng.fork(1_000_000 + run * 1000 + k as u64),
            )
            .map_err(e2s)?;
            total_hits += rec.hits();
            rounds += 1;
            ensure(rec.fallback_slots.is_empty(), || {
                format!("fallback at round {rounds} with p=0")
            })?;
            ensure(tx.structurally_equal(&rx), || {
                format!("caches diverged at round {rounds}")
            })?;
        }
        run += 1;
    }
    ensure(total_hits > 0, || "no hits exercised".into())?;

    // Noisy index link.
    let model = build_toy_generator(3, 4, 8, 8, 77).map_err(e2s)?;
    let cache_cfg = CacheConfig {
        capacity: 4,
        thresholds: "uniform:0.0".into(),
        ..CacheConfig::default()
    };
    let (mut tx, mut rx) = (cache_cfg.build(3, 4).map_err(e2s)?, cache_cfg.build(3, 4).map_err(e2s)?);
    let link = IndexLinkConfig {
        bit_error_rate: 0.05,
        ..IndexLinkConfig::default()
    };
    let stream = generate_source_stream(
        &model,
        &SourceSpec {
            count: 300,
            pool_size: 3,
            reuse_prob: 0.8,
            ..SourceSpec::default()
        },
        &mut rng.fork(5),
    )
    .map_err(e2s)?;
    let cfg = TwoStageConfig {
        stage1: InversionConfig {
            max_iters: 2,
            ..InversionConfig::default()
        },
        stage2_iters: 1,
        freeze_hits: true,
    };
    let mut fallbacks = 0;
    for (k, s) in stream.iter().enumerate() {
        let channel = ChannelConfig::awgn(rng.uniform_range(0.0, 5.0));
        let (_, rec) = cdc_transmit(
            &model,
            &s.image,
            &mut tx,
            &mut rx,
            &channel,
            1.0,
            &link,
            &cfg,
            &mut rng.fork(k as u64),
        )
        .map_err(|e| format!("noisy link round {k}: {e}"))?;
        fallbacks += rec.fallback_slots.len();
    }
    ensure(fallbacks > 0, || "no fallback substitutions recorded at p=0.05".into())?;
    Ok(format!(
        "{rounds} rounds in sync ({total_hits} hits); {fallbacks} fallbacks over 300 noisy-link rounds"
    ))
}

/// Independent priority formula.
fn oracle_priority(e: &CacheEntry, alpha: f64, range: (f64, f64), clock: u64) -> f64 {
    let snr = ((e.snr_tag - range.0) / (range.1 - range.0)).clamp(0.0, 1.0);
    let t = if clock == 0 {
        0.0
    } else {
        e.last_access as f64 / clock as f64
    };
    alpha * snr + (1.0 - alpha) * t
}

#[derive(Debug, Clone)]
enum Op {
    Store { slot: usize, dir: usize, snr: f64 },
    Plan { dir: usize, snr: f64 },
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        (0..2usize, 0..6usize, -2.0..8.0f64).prop_map(|(slot, dir, snr)| Op::Store { slot, dir, snr }),
        (0..6usize, -2.0..8.0f64).prop_map(|(dir, snr)| Op::Plan { dir, snr }),
    ];
    prop::collection::vec(op, 1..60)
}

/// Six fixed directions; equal directions are the only hits at γ = 0.99.
fn direction(d: usize) -> Vec<f64> {
    let mut v = vec![0.05; 6];
    v[d] = 1.0;
    v
}

// 10. SNR-aware cache policy properties.
fn cache_policy() -> Outcome {
    let mut runner = TestRunner::new(PtConfig {
        cases: 256,
        ..PtConfig::default()
    });
    let result = runner.run(
        &(ops(), 1..5usize, prop_oneof![Just(0.0), Just(0.3), Just(1.0)]),
        |(ops, cap, alpha)| {
            let cfg = CacheConfig {
                capacity: cap,
                alpha,
                snr_range: (0.0, 5.0),
                thresholds: "uniform:0.99".into(),
            };
            let mut cache: SemanticCache = cfg.build(2, 6).unwrap();
            for op in ops {
                match op {
                    Op::Store { slot, dir, snr } => {
                        let before: Vec<CacheEntry> = cache.slot(slot).to_vec();
                        let clock = cache.clock();
                        let v = direction(dir);
                        let matched = before
                            .iter()
                            .position(|e| cosine_similarity(&e.vector, &v).unwrap() >= 0.99);
                        cache.cache_store(slot, &v, snr).unwrap();
                        let after = cache.slot(slot);
                        prop_assert!(after.len() <= cap);
                        match matched {
                            Some(j) => {
                                prop_assert_eq!(after.len(), before.len());
                                if snr >= before[j].snr_tag {
                                    prop_assert_eq!(after[j].snr_tag, snr);
                                    prop_assert_eq!(&after[j].vector, &v);
                                } else {
                                    prop_assert_eq!(after[j].snr_tag, before[j].snr_tag);
                                    prop_assert_eq!(&after[j].vector, &before[j].vector);
                                }
                            }
                            None if before.len() == cap => {
                                // Exactly one old entry is gone; it has minimum priority.
                                let survivors = &after[..after.len() - 1];
                                let gone = (0..before.len())
                                    .find(|&k| survivors.get(k).map(|s| s != &before[k]).unwrap_or(true))
                                    .unwrap();
                                let p: Vec<f64> = before
                                    .iter()
                                    .map(|e| oracle_priority(e, alpha, (0.0, 5.0), clock))
                                    .collect();
                                let min = p.iter().copied().fold(f64::INFINITY, f64::min);
                                prop_assert_eq!(p[gone], min);
                                prop_assert_eq!(p.iter().position(|&x| x == min).unwrap(), gone);
                                if alpha == 0.0 {
                                    let lru = before.iter().map(|e| e.last_access).min().unwrap();
                                    prop_assert_eq!(before[gone].last_access, lru);
                                }
                                if alpha == 1.0 {
                                    let low = before
                                        .iter()
                                        .map(|e| e.snr_tag.clamp(0.0, 5.0))
                                        .fold(f64::INFINITY, f64::min);
                                    prop_assert_eq!(before[gone].snr_tag.clamp(0.0, 5.0), low);
                                }
                            }
                            None => prop_assert_eq!(after.len(), before.len() + 1),
                        }
                    }
                    Op::Plan { dir, snr } => {
                        let slots = vec![direction(dir), direction((dir + 1) % 6)];
                        let latent = LatentCode::from_slots(&slots).unwrap();
                        let plan = cache.plan_reduction(&latent, Some(snr)).unwrap();
                        for i in 0..2 {
                            let up = plan.is_upgrade(i);
                            match plan.hit_positions[i] {
                                Some(j) => prop_assert_eq!(up, snr >= cache.slot(i)[j].snr_tag),
                                None => prop_assert!(!up),
                            }
                        }
                    }
                }
            }
            Ok(())
        },
    );
    result.map_err(|e| e.to_string())?;
    Ok("256 random operation sequences: capacity, upgrade rule, min-priority eviction, LRU and SNR limits".into())
}

// 11. Straight-through equals channel-aware with an empty cache.
fn straight_through_consistency() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let model = build_toy_generator(4, 8, 16, 16, seed).map_err(e2s)?;
        let mut rng = RngStream::new(1100 + seed, 0);
        let target = prior_target(&model, &mut rng, 1.0);
        let loss = CombinedLoss::new(&LossConfig::default(), &target).map_err(e2s)?;
        let cache = CacheConfig::default().build(4, 8).map_err(e2s)?;
        let y = LatentCode::sample_prior(4, 8, &mut rng).map_err(e2s)?;
        let cached = CachedForward::new(&cache, cache.plan_reduction(&y, None).map_err(e2s)?).map_err(e2s)?;
        let ch = cached.sample_channel(snr_to_sigma2(0.0, 1.0), 1.0, &mut rng);
        let (v1, g1) = StraightThroughObjective::new(&model, &loss, &cached, ch.clone())
            .map_err(e2s)?
            .value_and_grad(y.flat())
            .map_err(e2s)?;
        let (v2, g2) = ChannelAwareObjective::new(&model, &loss, ch)
            .map_err(e2s)?
            .value_and_grad(y.flat())
            .map_err(e2s)?;
        worst = worst.max((v1 - v2).abs());
        for (a, b) in g1.iter().zip(&g2) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max difference {worst:e}"))?;
    Ok(format!("max value/gradient difference {worst:.1e}"))
}

// 12. Metric units.
fn metric_units() -> Outcome {
    let a = Image::filled(3, 16, 16, 0.5);
    let b = Image::filled(3, 16, 16, 0.6);
    let p = psnr(&a, &b, 1.0).map_err(e2s)?;
    ensure((p - 20.0).abs() < 1e-9, || format!("psnr {p}"))?;
    let mut rng = RngStream::new(12, 0);
    let x = Image::new(3, 32, 32, (0..3 * 32 * 32).map(|_| rng.uniform()).collect()).map_err(e2s)?;
    let m = ms_ssim(&x, &x).map_err(e2s)?;
    ensure((m - 1.0).abs() <= 1e-9, || format!("ms-ssim {m}"))?;
    let u = [1.0, 2.0, 3.0];
    let cases = [
        (cosine_similarity(&u, &[2.0, 4.0, 6.0]).map_err(e2s)?, 1.0),
        (cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).map_err(e2s)?, 0.0),
        (cosine_similarity(&u, &[-1.0, -2.0, -3.0]).map_err(e2s)?, -1.0),
    ];
    for (got, want) in cases {
        ensure((got - want).abs() < 1e-12, || format!("cosine {got} vs {want}"))?;
    }
    Ok(format!("psnr {p:.12}, ms-ssim(x,x) {m:.12}, cosine 1/0/-1"))
}

// 13. CLI determinism.
fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"generator": {"num_slots": 4, "latent_len": 8, "height": 8, "width": 8, "seed": 2},
            "inversion": {"stage1": {"max_iters": 10}, "stage2_iters": 5},
            "cache": {"thresholds": "uniform:0.3"},
            "source": {"count": 6}}"#,
    )
    .map_err(e2s)?;
    let run = |sub: &str, format: &str, out: &Path| -> std::result::Result<(), String> {
        let status = Command::new(env!("CARGO_BIN_EXE_cagi"))
            .args([sub, "--config"])
            .arg(&config)
            .args(["--seed", "42", "--format", format, "--out"])
            .arg(out)
            .status()
            .map_err(e2s)?;
        ensure(status.success(), || format!("{sub} exited with {status}"))
    };
    let mut compared = 0;
    for sub in ["invert", "transmit", "sequence", "cache-stats", "gradcheck"] {
        for format in ["csv", "json"] {
            let (a, b) = (
                dir.path().join(format!("{sub}-{format}-a")),
                dir.path().join(format!("{sub}-{format}-b")),
            );
            run(sub, format, &a)?;
            run(sub, format, &b)?;
            let mut files: Vec<_> = std::fs::read_dir(&a)
                .map_err(e2s)?
                .map(|e| e.unwrap().file_name())
                .collect();
            files.sort();
            ensure(!files.is_empty(), || format!("{sub} wrote nothing"))?;
            for f in files {
                let (x, y) = (
                    std::fs::read(a.join(&f)).map_err(e2s)?,
                    std::fs::read(b.join(&f)).map_err(e2s)?,
                );
                ensure(x == y, || format!("{sub} {format}: {f:?} differs"))?;
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} report files byte-identical across repeated runs"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 13] = [
        (1, "power constraint", power_constraint),
        (2, "BCR accounting", bcr_accounting),
        (3, "index coding", index_coding),
        (4, "gradient oracle", gradient_oracle),
        (5, "inversion oracle", inversion_oracle),
        (6, "channel-aware benefit", channel_aware_benefit),
        (7, "imperfect SNR robustness", imperfect_snr),
        (8, "CDC efficiency", cdc_efficiency),
        (9, "cache synchronization", cache_sync),
        (10, "SNR-aware policy", cache_policy),
        (11, "straight-through consistency", straight_through_consistency),
        (12, "metric units", metric_units),
        (13, "CLI determinism", cli_determinism),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (n, name, f) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let line = match &outcome {
            Ok(detail) => format!("criterion {n:>2} {name}: PASS ({detail})"),
            Err(why) => {
                failed.push(n);
                format!("criterion {n:>2} {name}: FAIL ({why})")
            }
        };
        // Written past the test harness capture so the lines always show.
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
