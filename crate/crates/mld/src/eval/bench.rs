//! Inference-speed benchmark: average seconds to produce one motion from one
//! prompt, split by pipeline stage, plus a raw-sequence diffusion baseline
//! with the same denoiser capacity for comparison.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cond::{Condition, TextEmbedProvider};
use crate::diffusion::{
    ddim_trajectory, ddpm_trajectory, Denoiser, DenoiserConfig, DiffusionModel, NoiseSchedule,
    SampleMethod, SamplerSpec,
};
use crate::error::{Error, Result};
use crate::motion::NormStats;
use crate::nn::{Linear, Params};
use crate::numerics::{Graph, Tensor};
use crate::rng::CounterRng;
use crate::vae::MotionVae;

/// Average inference time per prompt with per-stage breakdown. Model loading
/// is excluded by construction: the clock starts after everything is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AitsReport {
    pub seconds_per_prompt: f64,
    pub embed_seconds: f64,
    pub denoise_seconds: f64,
    pub decode_seconds: f64,
    pub denoiser_calls_per_prompt: f64,
    pub reps: usize,
}

fn check_bench_args(prompt_count: usize, reps: usize) -> Result<()> {
    if prompt_count == 0 {
        return Err(Error::InvalidArgument("benchmark needs prompts".into()));
    }
    if reps == 0 {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one timed repetition".into(),
        ));
    }
    Ok(())
}

/// Time `reps` single-prompt generations, cycling through `prompts`, after
/// `warmup` untimed runs. Batch size is one throughout.
#[allow(clippy::too_many_arguments)]
pub fn aits_bench(
    model: &DiffusionModel,
    vae: &MotionVae,
    stats: &NormStats,
    provider: &TextEmbedProvider,
    prompts: &[Condition],
    length: usize,
    sampler: &SamplerSpec,
    guidance_scale: f64,
    warmup: usize,
    reps: usize,
    seed: u64,
) -> Result<AitsReport> {
    check_bench_args(prompts.len(), reps)?;
    let mut seed_rng = CounterRng::new(seed).fork_str("aits");
    for i in 0..warmup {
        let cond = &prompts[i % prompts.len()];
        model.sample(
            provider,
            cond,
            length,
            sampler,
            guidance_scale,
            vae,
            stats,
            seed_rng.next_u64(),
        )?;
    }
    let mut wall = 0.0;
    let mut embed = 0.0;
    let mut denoise = 0.0;
    let mut decode = 0.0;
    let mut calls = 0usize;
    for i in 0..reps {
        let cond = &prompts[i % prompts.len()];
        let start = Instant::now();
        let (_, s) = model.sample(
            provider,
            cond,
            length,
            sampler,
            guidance_scale,
            vae,
            stats,
            seed_rng.next_u64(),
        )?;
        wall += start.elapsed().as_secs_f64();
        embed += s.embed_seconds;
        denoise += s.denoise_seconds;
        decode += s.decode_seconds;
        calls += s.denoiser_calls;
    }
    let n = reps as f64;
    Ok(AitsReport {
        seconds_per_prompt: wall / n,
        embed_seconds: embed / n,
        denoise_seconds: denoise / n,
        decode_seconds: decode / n,
        denoiser_calls_per_prompt: calls as f64 / n,
        reps,
    })
}

/// Baseline: the same denoiser architecture run directly over a raw-length
/// token sequence, with linear maps in and out of the model width standing
/// in for the missing autoencoder. Times one unconditional generation per
/// rep at the same step count, so the only difference from the latent
/// pipeline is the number of tokens the backbone sees.
#[allow(clippy::too_many_arguments)]
pub fn raw_baseline_aits(
    config: &DenoiserConfig,
    feature_dim: usize,
    schedule: &NoiseSchedule,
    length: usize,
    sampler: &SamplerSpec,
    warmup: usize,
    reps: usize,
    seed: u64,
) -> Result<AitsReport> {
    check_bench_args(1, reps)?;
    if length == 0 || feature_dim == 0 {
        return Err(Error::InvalidArgument(
            "raw baseline needs a positive length and feature width".into(),
        ));
    }
    sampler.validate(schedule.len())?;

    let rng = CounterRng::new(seed).fork_str("raw_baseline");
    let mut params = Params::new();
    let denoiser = Denoiser::init(&mut params, &mut rng.fork_str("init"), config.clone())?;
    let out_proj = Linear::init(
        &mut params,
        &mut rng.fork_str("proj"),
        "raw/out_proj",
        config.d,
        feature_dim,
        true,
    );

    let run = |rep: u64| -> Result<(f64, f64, usize)> {
        let mut draw = rng.fork_str("noise").fork(rep);
        let mut z = Tensor::zeros(&[length, config.d]);
        for v in z.data_mut() {
            *v = draw.normal_f32();
        }
        let mut calls = 0usize;
        let denoise_start = Instant::now();
        let mut eps_fn = |z_t: &Tensor, t: usize| -> Result<Tensor> {
            calls += 1;
            denoiser.denoise(&params, z_t, t, None)
        };
        let z0 = match sampler.method {
            SampleMethod::Ddim => {
                let ts = sampler.timesteps(schedule.len())?;
                ddim_trajectory(
                    &z,
                    &ts,
                    schedule,
                    sampler.eta,
                    rng.fork_str("traj").fork(rep).next_u64(),
                    &mut eps_fn,
                )?
            }
            SampleMethod::Ddpm => ddpm_trajectory(
                &z,
                schedule,
                rng.fork_str("traj").fork(rep).next_u64(),
                &mut eps_fn,
            )?,
        };
        let denoise_s = denoise_start.elapsed().as_secs_f64();

        let decode_start = Instant::now();
        let mut g = Graph::<f32>::new();
        let bound = params.bind_frozen(&mut g);
        let zv = g.leaf(&z0);
        let out = out_proj.forward(&mut g, &bound, zv)?;
        let _raw = g.value(out).clone();
        let decode_s = decode_start.elapsed().as_secs_f64();
        Ok((denoise_s, decode_s, calls))
    };

    for i in 0..warmup {
        run(i as u64)?;
    }
    let mut wall = 0.0;
    let mut denoise = 0.0;
    let mut decode = 0.0;
    let mut calls = 0usize;
    for i in 0..reps {
        let start = Instant::now();
        let (d, dec, c) = run((warmup + i) as u64)?;
        wall += start.elapsed().as_secs_f64();
        denoise += d;
        decode += dec;
        calls += c;
    }
    let n = reps as f64;
    Ok(AitsReport {
        seconds_per_prompt: wall / n,
        embed_seconds: 0.0,
        denoise_seconds: denoise / n,
        decode_seconds: decode / n,
        denoiser_calls_per_prompt: calls as f64 / n,
        reps,
    })
}
