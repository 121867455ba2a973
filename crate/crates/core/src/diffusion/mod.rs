//! DDPM schedule and reverse process over latent grids, with a pluggable
//! noise-prediction model, masked (RePaint) sampling and sliding-window
//! outpainting.
//!
//! Random numbers come from one seed split into three ChaCha streams:
//! stream 0 draws `z_T` and then one noise grid per reverse step (including
//! the last, where it is multiplied by zero), stream 1 draws the known-region
//! noise of masked sampling, stream 2 the forward re-noising of resampling
//! jumps. Plain and masked sampling therefore agree bit for bit when the mask
//! marks everything unknown.

mod outpaint;
mod remote;
mod repaint;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::scene::DensityLabel;

pub use outpaint::{assemble, outpaint_chain, outpaint_neighborhood, Canvas, Direction, OutpaintBlock};
pub use remote::{serve, ExternalDenoiser, PROTOCOL_VERSION};
pub use repaint::{build_mask, jump_schedule, repaint, ChannelGroup, MaskSpec, RepaintParams, Side};

pub const DEFAULT_STEPS: usize = 1000;
pub const BETA_START: f64 = 0.0015;
pub const BETA_END: f64 = 0.015;

/// Variance schedule. Index 0 is the clean state: `alpha_bars[0] = 1` and
/// `betas[0]` is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Model timestep passed to the denoiser at each step (identity unless
    /// respaced).
    model_t: Vec<usize>,
}

impl NoiseSchedule {
    /// `steps` betas spaced linearly from `start` to `end`, both included.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(start > 0.0 && start <= end && end < 1.0) {
            return Err(Error::config(format!(
                "beta bounds must satisfy 0 < {start} <= {end} < 1"
            )));
        }
        let mut betas = vec![0.0];
        for i in 0..steps {
            let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            betas.push(start + f * (end - start));
        }
        let mut alpha_bars = vec![1.0];
        for t in 1..=steps {
            alpha_bars.push(alpha_bars[t - 1] * (1.0 - betas[t]));
        }
        Ok(Self {
            betas,
            alpha_bars,
            model_t: (0..=steps).collect(),
        })
    }

    /// The default 1000-step linear schedule.
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, BETA_START, BETA_END).expect("default bounds are valid")
    }

    /// Uniformly strided sub-schedule with `steps` steps: step `i` uses model
    /// timestep `⌊i·T/steps⌋`, and betas are recomputed so the cumulative
    /// products match the base schedule at those timesteps.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let t_max = self.len();
        if steps == 0 || steps > t_max {
            return Err(Error::config(format!("cannot take {steps} of {t_max} steps")));
        }
        if steps == t_max {
            return Ok(self.clone());
        }
        let model_t: Vec<usize> = (0..=steps).map(|i| self.model_t[i * t_max / steps]).collect();
        let alpha_bars: Vec<f64> = (0..=steps).map(|i| self.alpha_bars[i * t_max / steps]).collect();
        let mut betas = vec![0.0];
        for i in 1..=steps {
            betas.push(1.0 - alpha_bars[i] / alpha_bars[i - 1]);
        }
        Ok(Self {
            betas,
            alpha_bars,
            model_t,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_t[t]
    }

    /// `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`, zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::config(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Latents and masks

/// `h × w × c` latent, channels fastest: entry `(y, x, ch)` lives at
/// `(y·w + x)·c + ch`. Channels below `split` are ground channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub split: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            split: c / 2,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        Self {
            data: vec![v; h * w * c],
            ..Self::zeros(h, w, c)
        }
    }

    pub fn from_data(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::config(format!("{} values for a {h}x{w}x{c} latent", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("latent values must be finite"));
        }
        Ok(Self {
            data,
            ..Self::zeros(h, w, c)
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.index(y, x, ch)]
    }

    /// Standard normal grid drawn from `rng`.
    pub fn gaussian(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..h * w * c).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            data,
            ..Self::zeros(h, w, c)
        }
    }

    fn same_shape(&self, other: &LatentGrid) -> bool {
        self.shape() == other.shape()
    }
}

/// Binary mask over a latent; `true` marks entries to synthesize.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMask {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<bool>,
}

impl LatentMask {
    pub fn all(h: usize, w: usize, c: usize, unknown: bool) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![unknown; h * w * c],
        }
    }

    /// Builds a mask from 0/1 values; anything else is rejected.
    pub fn from_values(h: usize, w: usize, c: usize, values: &[f64]) -> Result<Self> {
        if values.len() != h * w * c {
            return Err(Error::config(format!("{} mask values for {h}x{w}x{c}", values.len())));
        }
        let data = values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(Error::config(format!("mask value {v} is not binary"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { h, w, c, data })
    }

    pub fn unknown_count(&self) -> usize {
        self.data.iter().filter(|m| **m).count()
    }
}

// ---------------------------------------------------------------------------
// Denoisers

/// Noise-prediction model `ε̂(z_t, t, y)`. `t` is a timestep of the model's
/// own (base) schedule. Implementations must return a grid of the input's
/// shape and be deterministic for fixed inputs.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, z_t: &LatentGrid, t: usize, label: Option<DensityLabel>) -> Result<LatentGrid>;
}

/// Exact noise predictor for data `z0 ~ N(μ0, σ0² I)`.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    pub mean: LatentGrid,
    pub variance: f64,
    schedule: NoiseSchedule,
}

impl GaussianDenoiser {
    pub fn new(mean: LatentGrid, variance: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidVariance(variance));
        }
        Ok(Self {
            mean,
            variance,
            schedule,
        })
    }
}

impl Denoiser for GaussianDenoiser {
    fn predict_noise(&self, z_t: &LatentGrid, t: usize, _label: Option<DensityLabel>) -> Result<LatentGrid> {
        self.schedule.check_step(t)?;
        if !z_t.same_shape(&self.mean) {
            return Err(Error::config("latent shape differs from the denoiser's mean"));
        }
        let ab = self.schedule.alpha_bar(t);
        let (sa, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        let denom = ab * self.variance + 1.0 - ab;
        let mut out = z_t.clone();
        for (o, (&z, &mu)) in out.data.iter_mut().zip(z_t.data.iter().zip(&self.mean.data)) {
            let posterior_mean = (self.variance * sa * z + (1.0 - ab) * mu) / denom;
            *o = (z - sa * posterior_mean) / s1;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Forward and reverse steps

/// `√ᾱ_t·z0 + √(1 − ᾱ_t)·ε`.
pub fn q_sample(z0: &LatentGrid, t: usize, eps: &LatentGrid, sched: &NoiseSchedule) -> Result<LatentGrid> {
    sched.check_step(t)?;
    if !z0.same_shape(eps) {
        return Err(Error::config("noise shape differs from latent shape"));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = z0.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// One ancestral step from `t` to `t − 1`: the posterior mean from the
/// predicted noise plus `σ_t·noise` (no noise at `t = 1`).
pub fn reverse_step(
    denoiser: &dyn Denoiser,
    z_t: &LatentGrid,
    t: usize,
    label: Option<DensityLabel>,
    noise: &LatentGrid,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    sched.check_step(t)?;
    let eps = denoiser.predict_noise(z_t, sched.model_timestep(t), label)?;
    if !eps.same_shape(z_t) || eps.data.len() != z_t.data.len() {
        return Err(Error::Protocol(format!(
            "denoiser returned {:?} for a {:?} latent",
            eps.shape(),
            z_t.shape()
        )));
    }
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = if t == 1 {
        0.0
    } else {
        sched.posterior_variance(t).sqrt()
    };
    let mut out = z_t.clone();
    for i in 0..out.data.len() {
        out.data[i] = inv_sqrt_alpha * (z_t.data[i] - coef * eps.data[i]) + sigma * noise.data[i];
    }
    Ok(out)
}

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Full ancestral sampling from `z_T ~ N(0, I)` down to `z_0`.
pub fn sample(
    denoiser: &dyn Denoiser,
    shape: (usize, usize, usize),
    label: Option<DensityLabel>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<LatentGrid> {
    let (h, w, c) = shape;
    let mut rng = stream(seed, 0);
    let mut z = LatentGrid::gaussian(h, w, c, &mut rng);
    for t in (1..=sched.len()).rev() {
        let noise = LatentGrid::gaussian(h, w, c, &mut rng);
        z = reverse_step(denoiser, &z, t, label, &noise, sched)?;
    }
    Ok(z)
}

/// Independent chains, one per seed, run in parallel.
pub fn sample_batch(
    denoiser: &dyn Denoiser,
    shape: (usize, usize, usize),
    label: Option<DensityLabel>,
    sched: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<LatentGrid>> {
    use rayon::prelude::*;
    seeds
        .par_iter()
        .map(|&s| sample(denoiser, shape, label, sched, s))
        .collect()
}

// ---------------------------------------------------------------------------
// Latent file

const LATENT_MAGIC: &[u8; 8] = b"PSLATENT";
pub const LATENT_VERSION: u32 = 1;

/// Header (magic, version, `h`, `w`, `c`, `split` as u64) then f32 values.
pub fn latent_to_bytes(z: &LatentGrid) -> Vec<u8> {
    let mut w = Writer::with_header(LATENT_MAGIC, LATENT_VERSION);
    for d in [z.h, z.w, z.c, z.split] {
        w.u64(d as u64);
    }
    for v in &z.data {
        w.f32(*v as f32);
    }
    w.buf
}

pub fn latent_from_bytes(bytes: &[u8]) -> Result<LatentGrid> {
    let mut r = Reader::new(bytes, "latent file");
    r.header(LATENT_MAGIC, LATENT_VERSION)?;
    let (h, w, c, split) = (
        r.u64()? as usize,
        r.u64()? as usize,
        r.u64()? as usize,
        r.u64()? as usize,
    );
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format("latent file", "size overflow"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    if split > c {
        return Err(Error::format(
            "latent file",
            format!("split {split} exceeds {c} channels"),
        ));
    }
    let mut z = LatentGrid::from_data(h, w, c, data.into_iter().map(f64::from).collect())?;
    z.split = split;
    Ok(z)
}

pub fn save_latent(z: &LatentGrid, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &latent_to_bytes(z))
}

pub fn load_latent(path: impl AsRef<Path>) -> Result<LatentGrid> {
    latent_from_bytes(&read_file(path.as_ref())?)
}
