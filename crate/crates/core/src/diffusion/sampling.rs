use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::text::Condition;
use crate::unet::{CrossAttnCapture, UNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Ancestral sampling from the DDPM posterior.
    Ddpm,
    /// DDIM; deterministic for `eta = 0`.
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub sampler: SamplerKind,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 25, guidance_scale: 7.5, sampler: SamplerKind::Ddim, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.len() {
            return Err(Error::Domain(format!("{} sampling steps for a {}-step schedule", self.steps, schedule.len())));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Domain(format!("guidance scale must be >= 0, got {}", self.guidance_scale)));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Domain(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// `n` evenly spaced timesteps ending at `t_max`, in descending order.
pub fn timestep_grid(t_max: u32, n: usize) -> Vec<u32> {
    let n = n.min(t_max as usize).max(1);
    (0..n).rev().map(|i| (((i + 1) as u64 * t_max as u64) / n as u64) as u32).collect()
}

/// Cross-attention maps of the conditional branch at one sampling step.
#[derive(Debug, Clone)]
pub struct StepCapture {
    pub step: usize,
    pub timestep: u32,
    pub layers: Vec<CrossAttnCapture>,
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng, like: &Tensor) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, like.device())?.to_dtype(like.dtype())?)
}

/// Classifier-free guided noise prediction `eps_u + s (eps_c - eps_u)`.
///
/// `s = 1` evaluates only the conditional branch and `s = 0` only the
/// unconditional one, so both limits are exact.
pub fn guided_eps(
    model: &UNet,
    z: &Tensor,
    t: u32,
    conds: &[Condition],
    null: &Condition,
    scale: f64,
    capture: bool,
) -> Result<(Tensor, Vec<CrossAttnCapture>)> {
    let b = z.dim(0)?;
    let ts = vec![t; b];
    if scale == 1.0 {
        let out = model.forward_traced(z, &ts, &Condition::stack(conds)?, capture)?;
        return Ok((out.eps, out.cross_attention));
    }
    if scale == 0.0 {
        let out = model.forward_traced(z, &ts, &null.repeat(b)?, false)?;
        return Ok((out.eps, Vec::new()));
    }
    let ctx = Condition::stack(conds)?.concat(&null.repeat(b)?)?;
    let zz = Tensor::cat(&[z, z], 0)?;
    let out = model.forward_traced(&zz, &vec![t; 2 * b], &ctx, capture)?;
    let cond = out.eps.narrow(0, 0, b)?;
    let uncond = out.eps.narrow(0, b, b)?;
    let eps = (&uncond + ((cond - &uncond)? * scale)?)?;
    let layers = out
        .cross_attention
        .into_iter()
        .map(|c| Ok(CrossAttnCapture { probs: c.probs.narrow(0, 0, b)?, ..c }))
        .collect::<Result<Vec<_>>>()?;
    Ok((eps, layers))
}

/// One reverse step from `t` to `t_prev` (`t_prev = 0` means the clean sample).
fn reverse_step(
    z: &Tensor,
    eps: &Tensor,
    t: u32,
    t_prev: u32,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let a_t = schedule.alpha_bar(t);
    let a_prev = schedule.alpha_bar(t_prev);
    let x0 = ((z - (eps * (1.0 - a_t).sqrt())?)? / a_t.sqrt())?;
    match cfg.sampler {
        SamplerKind::Ddim => {
            let sigma = cfg.eta * ((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)).max(0.0).sqrt();
            let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
            let mut next = ((x0 * a_prev.sqrt())? + (eps * dir)?)?;
            if sigma > 0.0 && t_prev > 0 {
                next = (next + (gaussian(z.dims(), rng, z)? * sigma)?)?;
            }
            Ok(next)
        }
        SamplerKind::Ddpm => {
            let ratio = a_t / a_prev;
            let beta = 1.0 - ratio;
            let c0 = a_prev.sqrt() * beta / (1.0 - a_t);
            let ct = ratio.sqrt() * (1.0 - a_prev) / (1.0 - a_t);
            let mean = ((x0 * c0)? + (z * ct)?)?;
            if t_prev == 0 {
                return Ok(mean);
            }
            let var = (1.0 - a_prev) / (1.0 - a_t) * beta;
            Ok((mean + (gaussian(z.dims(), rng, z)? * var.sqrt())?)?)
        }
    }
}

/// Runs the reverse process over `grid` (descending timesteps) starting from `z`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_from(
    model: &UNet,
    mut z: Tensor,
    grid: &[u32],
    conds: &[Condition],
    null: &Condition,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    mut observer: Option<&mut dyn FnMut(StepCapture)>,
) -> Result<Tensor> {
    for (step, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(step + 1).copied().unwrap_or(0);
        let (eps, layers) = guided_eps(model, &z, t, conds, null, cfg.guidance_scale, observer.is_some())?;
        if let Some(obs) = observer.as_mut() {
            obs(StepCapture { step, timestep: t, layers });
        }
        z = reverse_step(&z, &eps, t, t_prev, cfg, schedule, rng)?;
    }
    Ok(z)
}

fn check_batch(model: &UNet, conds: &[Condition], schedule: &NoiseSchedule, cfg: &SamplerConfig) -> Result<()> {
    cfg.validate(schedule)?;
    if conds.is_empty() {
        return Err(Error::Domain("no conditions to sample".into()));
    }
    if model.max_timestep() as usize != schedule.len() {
        return Err(Error::Domain(format!(
            "model accepts timesteps up to {}, schedule has {}",
            model.max_timestep(),
            schedule.len()
        )));
    }
    Ok(())
}

/// Generates one latent per condition, `[B, C, H, W]`, from seeded noise.
pub fn sample(
    model: &UNet,
    conds: &[Condition],
    null: &Condition,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    hw: (usize, usize),
) -> Result<Tensor> {
    sample_traced(model, conds, null, cfg, schedule, hw, None)
}

/// [`sample`] that reports the conditional cross-attention maps of every step.
pub fn sample_traced(
    model: &UNet,
    conds: &[Condition],
    null: &Condition,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
    hw: (usize, usize),
    observer: Option<&mut dyn FnMut(StepCapture)>,
) -> Result<Tensor> {
    check_batch(model, conds, schedule, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let like = model.params().iter().next().map(|(_, v)| v.as_tensor().clone()).ok_or_else(|| Error::Domain("model has no parameters".into()))?;
    let shape = [conds.len(), model.config().in_channels, hw.0, hw.1];
    let z = gaussian(&shape, &mut rng, &like)?;
    let grid = timestep_grid(schedule.max_timestep(), cfg.steps);
    denoise_from(model, z, &grid, conds, null, cfg, schedule, &mut rng, observer)
}

/// Image-to-image translation: noise `input` to `floor(strength * T)` and
/// denoise it under the new condition with `round(strength * steps)` steps.
pub fn sdedit(
    model: &UNet,
    input: &Tensor,
    strength: f64,
    conds: &[Condition],
    null: &Condition,
    cfg: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Domain(format!("strength must lie in [0, 1], got {strength}")));
    }
    check_batch(model, conds, schedule, cfg)?;
    let (b, _, h, w) = input.dims4()?;
    if b != conds.len() {
        return Err(Error::Dimension(format!("{b} inputs for {} conditions", conds.len())));
    }
    let t_start = (strength * schedule.len() as f64).floor() as u32;
    if t_start == 0 {
        return Ok(input.clone());
    }
    if t_start as usize == schedule.len() {
        return sample(model, conds, null, cfg, schedule, (h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = gaussian(input.dims(), &mut rng, input)?;
    let z = forward_diffuse(input, &noise, &[t_start], schedule)?;
    let n = ((strength * cfg.steps as f64).round() as usize).max(1);
    let grid = timestep_grid(t_start, n);
    denoise_from(model, z, &grid, conds, null, cfg, schedule, &mut rng, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_descending_and_ends_at_t_max() {
        assert_eq!(timestep_grid(1000, 4), vec![1000, 750, 500, 250]);
        assert_eq!(timestep_grid(200, 25).first(), Some(&200));
        assert_eq!(timestep_grid(200, 25).last(), Some(&8));
        assert_eq!(timestep_grid(3, 10), vec![3, 2, 1]);
        let g = timestep_grid(160, 20);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }
}
