//! Latent diffusion over the motion VAE's latent space.
//!
//! Covers the forward noising process with its variance schedule, a
//! transformer denoiser with either token-concatenation or cross-attention
//! condition injection, classifier-free guidance, DDPM and DDIM reverse
//! samplers, and a training loop that fits the denoiser against latents
//! produced by a frozen autoencoder.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cond::{CondConfig, CondTokens, Condition, ConditionEmbedder, TextEmbedProvider};
use crate::error::{Error, Result};
use crate::motion::{Corpus, CorpusEntry, MotionSequence, NormStats};
use crate::nn::{
    accumulate_grads, apply_grad_map, timestep_embedding, Backbone, BoundParams, Linear, Params,
};
use crate::numerics::{AdamwParams, Graph, OptimState, Scalar, Tensor, Value};
use crate::rng::CounterRng;
use crate::vae::{GaussianLatent, LatentCode, MotionVae};

/// How the per-step noise variances are spaced across the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    ScaledLinear,
    Linear,
}

/// Schedule hyperparameters. The defaults give a 1000-step scaled-linear
/// schedule running from 8.5e-4 to 0.012.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_steps: 1000,
            beta_start: 8.5e-4,
            beta_end: 0.012,
            kind: ScheduleKind::ScaledLinear,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        self.build().map(|_| ())
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Precomputed noise schedule: per-step variances and their cumulative
/// products, kept in f64 so long products stay accurate.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of diffusion steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Per-step variance. Panics if `t` is out of range; use `check_step`
    /// first when the index comes from outside.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Cumulative product one step before `t_prev`; `None` stands for the
    /// clean end of the chain where the product is 1.
    pub fn alpha_bar_or_one(&self, t_prev: Option<usize>) -> f64 {
        match t_prev {
            Some(t) => self.alpha_bars[t],
            None => 1.0,
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range for a {}-step schedule",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Build a noise schedule. The scaled-linear kind interpolates the square
/// roots of the endpoint variances and squares the result; the linear kind
/// interpolates the variances directly. A single-step schedule holds just
/// the starting variance.
pub fn make_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one step".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "schedule endpoints must satisfy 0 < start <= end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let mut betas = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let f = if t_steps == 1 {
            0.0
        } else {
            t as f64 / (t_steps - 1) as f64
        };
        let b = match kind {
            ScheduleKind::ScaledLinear => {
                let s = beta_start.sqrt() + f * (beta_end.sqrt() - beta_start.sqrt());
                s * s
            }
            ScheduleKind::Linear => beta_start + f * (beta_end - beta_start),
        };
        betas.push(b);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0f64;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Jump straight from a clean latent to its noised version at step `t`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_step(t)?;
    if !z0.same_shape(eps) {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            detail: format!("latent {:?} vs noise {:?}", z0.dims(), eps.dims()),
        });
    }
    let ab = schedule.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z0.clone();
    for (o, e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = (ca * *o as f64 + cb * *e as f64) as f32;
    }
    Ok(out)
}

/// Where condition tokens enter the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    Concat,
    CrossAttention,
}

/// Denoiser transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: Option<usize>,
    pub use_skip: bool,
    pub injection: Injection,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d: 256,
            layers: 9,
            heads: 4,
            ff_hidden: None,
            use_skip: true,
            injection: Injection::Concat,
        }
    }
}

impl DenoiserConfig {
    pub fn ff_hidden(&self) -> usize {
        self.ff_hidden.unwrap_or(4 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config(
                "denoiser width, depth, and head count must be positive".into(),
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "denoiser heads {} must divide width {}",
                self.heads, self.d
            )));
        }
        if self.use_skip && self.layers.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "skip-connected denoiser needs an odd layer count, got {}",
                self.layers
            )));
        }
        if self.ff_hidden() == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }
}

/// Transformer that predicts the noise added to a latent. The timestep is a
/// learned projection of a sinusoidal embedding prepended as one extra token;
/// condition tokens either join the sequence or arrive as cross-attention
/// memory depending on the injection mode.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    time_proj: Linear,
    backbone: Backbone,
    out: Linear,
}

impl Denoiser {
    pub fn init(params: &mut Params, rng: &mut CounterRng, config: DenoiserConfig) -> Result<Denoiser> {
        config.validate()?;
        let time_proj = Linear::init(params, rng, "denoiser/time_proj", config.d, config.d, true);
        let backbone = Backbone::init(
            params,
            rng,
            "denoiser/backbone",
            config.layers,
            config.d,
            config.heads,
            config.ff_hidden(),
            config.injection == Injection::CrossAttention,
            config.use_skip,
        )?;
        let out = Linear::init(params, rng, "denoiser/out", config.d, config.d, true);
        Ok(Denoiser {
            config,
            time_proj,
            backbone,
            out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Graph-level noise prediction. `z` holds the n latent rows; `cond` is
    /// an optional m x d token block. The prediction is read off the last n
    /// rows of the backbone output.
    pub fn denoise_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bp: &BoundParams,
        z: Value,
        t: usize,
        cond: Option<Value>,
    ) -> Result<Value> {
        let d = self.config.d;
        if g.value(z).cols() != d {
            return Err(Error::ShapeMismatch {
                op: "denoise",
                detail: format!("latent width {} vs denoiser width {d}", g.value(z).cols()),
            });
        }
        if let Some(c) = cond {
            if g.value(c).cols() != d {
                return Err(Error::ShapeMismatch {
                    op: "denoise",
                    detail: format!(
                        "condition width {} vs denoiser width {d}",
                        g.value(c).cols()
                    ),
                });
            }
        }
        let n = g.value(z).rows();
        let emb = g.constant(&timestep_embedding::<T>(t, d));
        let time_tok = self.time_proj.forward(g, bp, emb)?;

        let (seq, mem) = match self.config.injection {
            Injection::Concat => {
                let head = match cond {
                    Some(c) => g.concat_rows(time_tok, c)?,
                    None => time_tok,
                };
                (g.concat_rows(head, z)?, None)
            }
            Injection::CrossAttention => (g.concat_rows(time_tok, z)?, cond),
        };
        let h = self.backbone.forward(g, bp, seq, None, mem)?;
        let rows = g.value(h).rows();
        let tail = g.slice_rows(h, rows - n, rows)?;
        self.out.forward(g, bp, tail)
    }

    /// Tensor-level noise prediction with frozen weights.
    pub fn denoise(
        &self,
        params: &Params,
        z_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let bp = params.bind_frozen(&mut g);
        let zv = g.constant(z_t);
        let cv = cond.map(|c| g.constant(c));
        let out = self.denoise_graph(&mut g, &bp, zv, t, cv)?;
        Ok(g.value(out).clone())
    }
}

/// Classifier-free guidance knobs: `scale` mixes conditional and
/// unconditional predictions at sampling time, `dropout` is the probability
/// of training a sample against the null condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceParams {
    pub scale: f64,
    pub dropout: f64,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        GuidanceParams {
            scale: 7.5,
            dropout: 0.1,
        }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::Config(format!(
                "guidance scale must be finite and non-negative, got {}",
                self.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "condition dropout must lie in [0, 1], got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Blend conditional and unconditional noise predictions with guidance
/// weight `s`, computed as the unconditional branch plus `s` times the
/// difference. The scales 1 and 0 return the respective input unchanged.
pub fn cfg_combine(eps_c: &Tensor, eps_u: &Tensor, s: f64) -> Result<Tensor> {
    if !eps_c.same_shape(eps_u) {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            detail: format!("{:?} vs {:?}", eps_c.dims(), eps_u.dims()),
        });
    }
    if s == 1.0 {
        return Ok(eps_c.clone());
    }
    if s == 0.0 {
        return Ok(eps_u.clone());
    }
    let mut out = eps_c.clone();
    for (o, (&c, &u)) in out
        .data_mut()
        .iter_mut()
        .zip(eps_c.data().iter().zip(eps_u.data()))
    {
        *o = (u as f64 + s * (c as f64 - u as f64)) as f32;
    }
    Ok(out)
}

/// One deterministic-or-stochastic DDIM update from step `t` down to
/// `t_prev`. `t_prev = None` targets the clean end of the chain, returning
/// the predicted latent itself; with `eta = 0` no noise is drawn at all.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
    eta: f64,
    seed: u64,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::InvalidArgument(format!(
                "ddim target step {p} must precede current step {t}"
            )));
        }
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ddim eta must be finite and non-negative, got {eta}"
        )));
    }
    if !z_t.same_shape(eps_hat) {
        return Err(Error::ShapeMismatch {
            op: "ddim_step",
            detail: format!("latent {:?} vs noise {:?}", z_t.dims(), eps_hat.dims()),
        });
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar_or_one(t_prev);
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt();
    let var = sigma * sigma;
    if var > 1.0 - ab_p + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "ddim noise variance {var:.6} exceeds the posterior budget {:.6}",
            1.0 - ab_p
        )));
    }
    let dir = (1.0 - ab_p - var).max(0.0).sqrt();
    let (sq_t, sq_p, sq_1m) = (ab_t.sqrt(), ab_p.sqrt(), (1.0 - ab_t).sqrt());

    let mut out = z_t.clone();
    if sigma > 0.0 {
        let mut noise = Tensor::zeros(z_t.dims());
        CounterRng::new(seed)
            .fork_str("ddim_noise")
            .fill_normal_f32(noise.data_mut());
        for ((o, (&z, &e)), &x) in out
            .data_mut()
            .iter_mut()
            .zip(z_t.data().iter().zip(eps_hat.data()))
            .zip(noise.data())
        {
            let z0 = (z as f64 - sq_1m * e as f64) / sq_t;
            *o = (sq_p * z0 + dir * e as f64 + sigma * x as f64) as f32;
        }
    } else {
        for (o, (&z, &e)) in out
            .data_mut()
            .iter_mut()
            .zip(z_t.data().iter().zip(eps_hat.data()))
        {
            let z0 = (z as f64 - sq_1m * e as f64) / sq_t;
            *o = (sq_p * z0 + dir * e as f64) as f32;
        }
    }
    Ok(out)
}

/// One ancestral DDPM update from step `t` to `t - 1`. The final move to
/// the clean sample at `t = 1` adds no noise, and `t = 0` is undefined.
pub fn ddpm_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    if t == 0 {
        return Err(Error::InvalidArgument(
            "ddpm has no transition below step 1".into(),
        ));
    }
    if !z_t.same_shape(eps_hat) {
        return Err(Error::ShapeMismatch {
            op: "ddpm_step",
            detail: format!("latent {:?} vs noise {:?}", z_t.dims(), eps_hat.dims()),
        });
    }
    let b = schedule.beta(t);
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let coef = b / (1.0 - ab).sqrt();
    let inv_sq_a = 1.0 / a.sqrt();

    let mut out = z_t.clone();
    if t > 1 {
        let btilde = (1.0 - ab_prev) / (1.0 - ab) * b;
        let sd = btilde.sqrt();
        let mut noise = Tensor::zeros(z_t.dims());
        CounterRng::new(seed)
            .fork_str("ddpm_noise")
            .fill_normal_f32(noise.data_mut());
        for ((o, (&z, &e)), &x) in out
            .data_mut()
            .iter_mut()
            .zip(z_t.data().iter().zip(eps_hat.data()))
            .zip(noise.data())
        {
            let mean = inv_sq_a * (z as f64 - coef * e as f64);
            *o = (mean + sd * x as f64) as f32;
        }
    } else {
        for (o, (&z, &e)) in out
            .data_mut()
            .iter_mut()
            .zip(z_t.data().iter().zip(eps_hat.data()))
        {
            *o = (inv_sq_a * (z as f64 - coef * e as f64)) as f32;
        }
    }
    Ok(out)
}

fn check_timesteps(timesteps: &[usize], t_total: usize) -> Result<()> {
    if timesteps.is_empty() {
        return Err(Error::InvalidArgument("empty timestep sequence".into()));
    }
    if timesteps[timesteps.len() - 1] != t_total - 1 {
        return Err(Error::InvalidArgument(format!(
            "timestep sequence must end at {}, got {}",
            t_total - 1,
            timesteps[timesteps.len() - 1]
        )));
    }
    for w in timesteps.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidArgument(
                "timestep sequence must be strictly increasing".into(),
            ));
        }
    }
    Ok(())
}

/// Walk a DDIM timestep subsequence from pure noise down to a clean latent.
/// `eps_fn` supplies the noise prediction for each visited step.
pub fn ddim_trajectory<F>(
    z_init: &Tensor,
    timesteps: &[usize],
    schedule: &NoiseSchedule,
    eta: f64,
    seed: u64,
    mut eps_fn: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    check_timesteps(timesteps, schedule.len())?;
    let mut noise_seeds = CounterRng::new(seed).fork_str("ddim_traj");
    let mut z = z_init.clone();
    for k in (0..timesteps.len()).rev() {
        let t = timesteps[k];
        let t_prev = if k > 0 { Some(timesteps[k - 1]) } else { None };
        let eps = eps_fn(&z, t)?;
        z = ddim_step(&z, &eps, t, t_prev, schedule, eta, noise_seeds.next_u64())?;
    }
    Ok(z)
}

/// Walk the full ancestral chain from step T - 1 down to step 1.
pub fn ddpm_trajectory<F>(
    z_init: &Tensor,
    schedule: &NoiseSchedule,
    seed: u64,
    mut eps_fn: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if schedule.len() < 2 {
        return Err(Error::InvalidArgument(
            "ancestral sampling needs a schedule with at least two steps".into(),
        ));
    }
    let mut noise_seeds = CounterRng::new(seed).fork_str("ddpm_traj");
    let mut z = z_init.clone();
    for t in (1..schedule.len()).rev() {
        let eps = eps_fn(&z, t)?;
        z = ddpm_step(&z, &eps, t, schedule, noise_seeds.next_u64())?;
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMethod {
    Ddim,
    Ddpm,
}

/// Reverse-process settings. `inference_steps` and `eta` only apply to
/// DDIM; ancestral DDPM always walks every schedule step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub method: SampleMethod,
    pub inference_steps: usize,
    pub eta: f64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            method: SampleMethod::Ddim,
            inference_steps: 50,
            eta: 0.0,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self, t_total: usize) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        match self.method {
            SampleMethod::Ddim => {
                if self.inference_steps == 0 || self.inference_steps > t_total {
                    return Err(Error::InvalidArgument(format!(
                        "inference_steps {} must lie in 1..={t_total}",
                        self.inference_steps
                    )));
                }
            }
            SampleMethod::Ddpm => {
                if t_total < 2 {
                    return Err(Error::InvalidArgument(
                        "ancestral sampling needs a schedule with at least two steps".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The strictly increasing steps the sampler visits, always ending at
    /// T - 1. DDIM spaces `inference_steps` of them a uniform stride apart;
    /// DDPM visits every step from 1 upward.
    pub fn timesteps(&self, t_total: usize) -> Result<Vec<usize>> {
        self.validate(t_total)?;
        match self.method {
            SampleMethod::Ddim => {
                let steps = self.inference_steps;
                let stride = t_total / steps;
                Ok((0..steps)
                    .map(|k| t_total - 1 - (steps - 1 - k) * stride)
                    .collect())
            }
            SampleMethod::Ddpm => Ok((1..t_total).collect()),
        }
    }
}

/// Where training conditions come from in a corpus manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondSource {
    Text,
    Action,
    None,
}

/// Pull one condition per manifest entry according to the chosen source.
pub fn conditions_from_corpus(entries: &[CorpusEntry], source: CondSource) -> Result<Vec<Condition>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| match source {
            CondSource::Text => e.text.clone().map(|t| Condition::Text { text: t }).ok_or_else(
                || Error::Config(format!("corpus entry {i} carries no text caption")),
            ),
            CondSource::Action => e
                .action_id
                .map(|id| Condition::Action { id })
                .ok_or_else(|| Error::Config(format!("corpus entry {i} carries no action id"))),
            CondSource::None => Ok(Condition::None),
        })
        .collect()
}

/// Everything needed to build and train a latent diffusion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceParams,
    pub cond: CondConfig,
    pub source: CondSource,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceParams::default(),
            cond: CondConfig::default(),
            source: CondSource::Text,
            lr: 1e-4,
            batch_size: 8,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.schedule.validate()?;
        self.guidance.validate()?;
        self.cond.validate()?;
        if self.cond.d != self.denoiser.d {
            return Err(Error::Config(format!(
                "condition width {} must match denoiser width {}",
                self.cond.d, self.denoiser.d
            )));
        }
        if self.source == CondSource::Action && self.cond.n_actions == 0 {
            return Err(Error::Config(
                "action-conditioned training needs a non-empty action table".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Wall-clock and call-count accounting for one sampled motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub denoiser_calls: usize,
    pub embed_seconds: f64,
    pub denoise_seconds: f64,
    pub decode_seconds: f64,
}

/// Denoiser, condition embedder, and schedule under one parameter registry.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    config: DiffusionConfig,
    params: Params,
    denoiser: Denoiser,
    embedder: ConditionEmbedder,
    schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn init(config: DiffusionConfig, seed: u64) -> Result<DiffusionModel> {
        config.validate()?;
        let schedule = make_schedule(
            config.schedule.t_steps,
            config.schedule.beta_start,
            config.schedule.beta_end,
            config.schedule.kind,
        )?;
        let mut params = Params::new();
        let mut rng = CounterRng::new(seed).fork_str("diffusion_init");
        let denoiser = Denoiser::init(&mut params, &mut rng, config.denoiser.clone())?;
        let embedder = ConditionEmbedder::init(&mut params, &mut rng, config.cond.clone())?;
        Ok(DiffusionModel {
            config,
            params,
            denoiser,
            embedder,
            schedule,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn embedder(&self) -> &ConditionEmbedder {
        &self.embedder
    }

    /// Swap in externally loaded weights. Every existing tensor must appear
    /// with its exact shape; anything missing, extra, or resized is refused.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, t) in params.iter() {
            let cur = self.params.get(name)?;
            if cur.dims() != t.dims() {
                return Err(Error::Incompatible(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    cur.dims()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Frozen condition tokens for any condition kind.
    pub fn cond_tokens(
        &self,
        provider: &TextEmbedProvider,
        cond: &Condition,
    ) -> Result<CondTokens> {
        match cond {
            Condition::Text { text } => self.embedder.embed_text(&self.params, provider, text),
            Condition::Action { id } => self.embedder.embed_action(&self.params, *id),
            Condition::None => self.embedder.null_tokens(&self.params),
        }
    }

    /// Tensor-level noise prediction with frozen weights. `None` falls back
    /// to the learned null condition.
    pub fn denoise(&self, z_t: &Tensor, t: usize, cond: Option<&CondTokens>) -> Result<Tensor> {
        let null;
        let tokens = match cond {
            Some(c) => c,
            None => {
                null = self.embedder.null_tokens(&self.params)?;
                &null
            }
        };
        self.denoiser
            .denoise(&self.params, z_t, t, Some(&tokens.tokens))
    }

    /// Mean noise-prediction loss of the current weights over a batch of
    /// clean latents, using the training-time draw of steps, noises, and
    /// condition dropout.
    pub fn diffusion_loss(
        &self,
        provider: &TextEmbedProvider,
        z0s: &[Tensor],
        conds: &[Condition],
        seed: u64,
    ) -> Result<f64> {
        if z0s.len() != conds.len() {
            return Err(Error::InvalidArgument(format!(
                "{} latents but {} conditions",
                z0s.len(),
                conds.len()
            )));
        }
        let p = self.config.guidance.dropout;
        diffusion_loss_with(z0s, &self.schedule, p, seed, |i, z_t, t, _eps, dropped| {
            let mut g = Graph::<f32>::new();
            let bp = self.params.bind_frozen(&mut g);
            let zv = g.constant(z_t);
            let tokens = if dropped {
                self.embedder.null_graph(&mut g, &bp)?
            } else {
                self.embedder.tokens_graph(&mut g, &bp, provider, &conds[i])?
            };
            let out = self.denoiser.denoise_graph(&mut g, &bp, zv, t, Some(tokens))?;
            Ok(g.value(out).clone())
        })
    }

    /// Draw one motion. Runs the chosen reverse sampler under classifier
    /// free guidance, decodes the final latent with the frozen VAE, and
    /// undoes feature normalization. Guidance needs two denoiser calls per
    /// step unless the scale is exactly 1 or the condition is empty, both of
    /// which collapse to a single call.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        provider: &TextEmbedProvider,
        cond: &Condition,
        length: usize,
        sampler: &SamplerSpec,
        guidance_scale: f64,
        vae: &MotionVae,
        stats: &NormStats,
        seed: u64,
    ) -> Result<(MotionSequence, SampleStats)> {
        if !(guidance_scale.is_finite() && guidance_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale must be finite and non-negative, got {guidance_scale}"
            )));
        }
        sampler.validate(self.schedule.len())?;
        if vae.config().d != self.config.denoiser.d {
            return Err(Error::Incompatible(format!(
                "vae latent width {} vs denoiser width {}",
                vae.config().d,
                self.config.denoiser.d
            )));
        }
        let n = vae.config().n_latent_tokens;
        let d = self.config.denoiser.d;

        let embed_start = Instant::now();
        let cond_tokens = self.cond_tokens(provider, cond)?;
        let null_tokens = self.embedder.null_tokens(&self.params)?;
        let embed_seconds = embed_start.elapsed().as_secs_f64();

        let single_call = guidance_scale == 1.0 || matches!(cond, Condition::None);
        let rng = CounterRng::new(seed);
        let mut z = Tensor::zeros(&[n, d]);
        rng.fork_str("sample_init").fill_normal_f32(z.data_mut());
        let noise_seed = rng.fork_str("sample_noise").next_u64();

        let mut calls = 0usize;
        let denoise_start = Instant::now();
        let mut predict = |z_t: &Tensor, t: usize| -> Result<Tensor> {
            let eps_c = self
                .denoiser
                .denoise(&self.params, z_t, t, Some(&cond_tokens.tokens))?;
            calls += 1;
            if single_call {
                return Ok(eps_c);
            }
            let eps_u = self
                .denoiser
                .denoise(&self.params, z_t, t, Some(&null_tokens.tokens))?;
            calls += 1;
            cfg_combine(&eps_c, &eps_u, guidance_scale)
        };
        let z0 = match sampler.method {
            SampleMethod::Ddim => {
                let ts = sampler.timesteps(self.schedule.len())?;
                ddim_trajectory(&z, &ts, &self.schedule, sampler.eta, noise_seed, &mut predict)?
            }
            SampleMethod::Ddpm => ddpm_trajectory(&z, &self.schedule, noise_seed, &mut predict)?,
        };
        let denoise_seconds = denoise_start.elapsed().as_secs_f64();

        let decode_start = Instant::now();
        let normalized = vae.decode(&LatentCode { z: z0 }, length)?;
        let mut motion = stats.denormalize(&normalized)?;
        motion.clamp_contacts();
        let decode_seconds = decode_start.elapsed().as_secs_f64();

        Ok((
            motion,
            SampleStats {
                denoiser_calls: calls,
                embed_seconds,
                denoise_seconds,
                decode_seconds,
            },
        ))
    }
}

/// One training-time draw for a sample: the noising step, the injected
/// noise, and whether the condition is dropped for guidance training.
struct NoisingDraw {
    t: usize,
    eps: Tensor,
    dropped: bool,
}

impl NoisingDraw {
    fn sample(r: &mut CounterRng, t_total: usize, p: f64, dims: &[usize]) -> NoisingDraw {
        let t = r.below(t_total);
        let mut eps = Tensor::zeros(dims);
        r.fill_normal_f32(eps.data_mut());
        let dropped = r.uniform() < p;
        NoisingDraw { t, eps, dropped }
    }
}

/// Mean per-sample noise-prediction loss over a batch of clean latents,
/// with the prediction supplied by a closure. Each sample's step, noise,
/// and dropout flag come from an rng stream forked on the sample index; the
/// loss is the squared error summed over every latent coordinate, averaged
/// across the batch.
pub fn diffusion_loss_with<F>(
    z0s: &[Tensor],
    schedule: &NoiseSchedule,
    p: f64,
    seed: u64,
    mut eps_fn: F,
) -> Result<f64>
where
    F: FnMut(usize, &Tensor, usize, &Tensor, bool) -> Result<Tensor>,
{
    if z0s.is_empty() {
        return Err(Error::InvalidArgument(
            "diffusion loss needs at least one latent".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "condition dropout must lie in [0, 1], got {p}"
        )));
    }
    let base = CounterRng::new(seed).fork_str("diff_loss");
    let mut total = 0.0f64;
    for (i, z0) in z0s.iter().enumerate() {
        let mut r = base.fork(i as u64);
        let draw = NoisingDraw::sample(&mut r, schedule.len(), p, z0.dims());
        let z_t = q_sample(z0, draw.t, &draw.eps, schedule)?;
        let eps_hat = eps_fn(i, &z_t, draw.t, &draw.eps, draw.dropped)?;
        if !eps_hat.same_shape(&draw.eps) {
            return Err(Error::ShapeMismatch {
                op: "diffusion_loss",
                detail: format!(
                    "prediction {:?} vs noise {:?}",
                    eps_hat.dims(),
                    draw.eps.dims()
                ),
            });
        }
        let mut s = 0.0f64;
        for (&a, &b) in draw.eps.data().iter().zip(eps_hat.data()) {
            let diff = a as f64 - b as f64;
            s += diff * diff;
        }
        total += s;
    }
    Ok(total / z0s.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffEpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTrainReport {
    pub per_epoch: Vec<DiffEpochLoss>,
    pub diverged_at: Option<usize>,
}

pub struct DiffusionTrainOutcome {
    pub model: DiffusionModel,
    pub report: DiffTrainReport,
}

fn is_divergence(err: &Error) -> bool {
    matches!(err, Error::NonFinite { .. })
}

/// Train a denoiser over the latent space of a frozen VAE. Posterior means
/// and deviations are computed once up front outside any gradient graph, so
/// no gradient can reach the autoencoder; each visit to a sequence then
/// draws a fresh latent from its posterior before noising it. A non-finite
/// loss stops training and rolls the weights back to the last epoch that
/// finished cleanly.
pub fn train_diffusion(
    corpus: &Corpus,
    vae: &MotionVae,
    stats: &NormStats,
    provider: &TextEmbedProvider,
    config: &DiffusionConfig,
    epochs: usize,
    seed: u64,
) -> Result<DiffusionTrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot train on an empty corpus".into(),
        ));
    }
    if vae.config().d != config.denoiser.d {
        return Err(Error::Incompatible(format!(
            "vae latent width {} vs denoiser width {}",
            vae.config().d,
            config.denoiser.d
        )));
    }
    let conds = conditions_from_corpus(&corpus.entries, config.source)?;
    if config.source == CondSource::Action {
        for (i, c) in conds.iter().enumerate() {
            if let Condition::Action { id } = c {
                if *id >= config.cond.n_actions {
                    return Err(Error::Config(format!(
                        "corpus entry {i} has action id {id}, table holds {}",
                        config.cond.n_actions
                    )));
                }
            }
        }
    }

    let posteriors: Vec<GaussianLatent> = corpus
        .motions
        .iter()
        .map(|m| stats.normalize(m).and_then(|n| vae.encode(&n)))
        .collect::<Result<_>>()?;

    let mut model = DiffusionModel::init(config.clone(), seed)?;
    let rng = CounterRng::new(seed).fork_str("diffusion_train");
    let t_total = model.schedule.len();
    let p = config.guidance.dropout;
    let n = vae.config().n_latent_tokens;
    let d = config.denoiser.d;

    let mut opt = OptimState::new();
    let hyper = AdamwParams {
        lr: config.lr,
        ..AdamwParams::default()
    };

    let mut last_good = model.params.clone();
    let mut per_epoch = Vec::with_capacity(epochs);
    let mut diverged_at = None;
    let mut step_counter = 0u64;

    'epochs: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..posteriors.len()).collect();
        rng.fork_str("order").fork(epoch as u64).shuffle(&mut order);

        let mut ep_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let scale = 1.0 / chunk.len() as f32;
            let mut b_loss = 0.0f64;
            for &i in chunk {
                let mut r = rng.fork_str("draws").fork(step_counter);
                step_counter += 1;
                let draw = NoisingDraw::sample(&mut r, t_total, p, &[n, d]);
                let mut post_eps = Tensor::zeros(&[n, d]);
                r.fill_normal_f32(post_eps.data_mut());

                let post = &posteriors[i];
                let sigma = post.sigma();
                let mut z0 = post.mu.clone();
                for ((z, &s), &e) in z0
                    .data_mut()
                    .iter_mut()
                    .zip(sigma.data())
                    .zip(post_eps.data())
                {
                    *z += s * e;
                }
                let z_t = q_sample(&z0, draw.t, &draw.eps, &model.schedule)?;

                let mut g = Graph::<f32>::new();
                let bp = model.params.bind(&mut g);
                let step = (|| {
                    let zv = g.constant(&z_t);
                    let tokens = if draw.dropped {
                        model.embedder.null_graph(&mut g, &bp)?
                    } else {
                        model.embedder.tokens_graph(&mut g, &bp, provider, &conds[i])?
                    };
                    let eps_hat = model.denoiser.denoise_graph(&mut g, &bp, zv, draw.t, Some(tokens))?;
                    let target = g.constant(&draw.eps);
                    let diff = g.sub(eps_hat, target)?;
                    let sq = g.mul(diff, diff)?;
                    let loss = g.sum(sq)?;
                    g.backward(loss).map(|grads| (loss, grads))
                })();
                match step {
                    Ok((loss, grads)) => {
                        accumulate_grads(&mut acc, &model.params, &bp, &g, &grads, scale)?;
                        b_loss += g.value(loss).item() as f64;
                    }
                    Err(e) if is_divergence(&e) => {
                        diverged_at = Some(epoch);
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            apply_grad_map(&mut model.params, &acc, &mut opt, &hyper)?;
            ep_loss += b_loss / chunk.len() as f64;
            batches += 1;
        }

        let mean = ep_loss / batches as f64;
        per_epoch.push(DiffEpochLoss { epoch, loss: mean });
        if !mean.is_finite() {
            diverged_at = Some(epoch);
            break;
        }
        last_good = model.params.clone();
    }

    if diverged_at.is_some() {
        model.params = last_good;
    }

    Ok(DiffusionTrainOutcome {
        model,
        report: DiffTrainReport {
            per_epoch,
            diverged_at,
        },
    })
}
