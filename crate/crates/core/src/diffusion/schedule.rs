use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Linear in `sqrt(beta)`.
    ScaledLinear,
}

/// `beta[t-1]` and `alpha_bar[t-1]` hold the values for timestep `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Domain(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (steps - 1) as f64
        }
    };
    let beta: Vec<f64> = (0..steps)
        .map(|i| match kind {
            ScheduleKind::Linear => lerp(beta_start, beta_end, i),
            ScheduleKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, beta_start, beta_end, beta, alpha_bar })
}

impl NoiseSchedule {
    /// Linear 1e-4 to 0.02 over `steps` timesteps.
    pub fn linear(steps: usize) -> Self {
        make_schedule(ScheduleKind::Linear, steps, 1e-4, 0.02).expect("valid constants")
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn max_timestep(&self) -> u32 {
        self.len() as u32
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: u32) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t as usize - 1]
        }
    }

    pub fn beta(&self, t: u32) -> f64 {
        self.beta[t as usize - 1]
    }

    pub fn check_timestep(&self, t: u32) -> Result<()> {
        if t == 0 || t as usize > self.len() {
            return Err(Error::Domain(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }
}

/// Per-sample coefficients broadcast to `[B, 1, 1, ...]`.
pub(crate) fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1usize; like.rank()];
    shape[0] = values.len();
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

/// `z_t = sqrt(alpha_bar_t) z + sqrt(1 - alpha_bar_t) eps`, one timestep per
/// batch element (or one shared timestep).
pub fn forward_diffuse(z: &Tensor, eps: &Tensor, t: &[u32], schedule: &NoiseSchedule) -> Result<Tensor> {
    if z.dims() != eps.dims() {
        return Err(Error::Dimension(format!("latent {:?} and noise {:?} differ", z.dims(), eps.dims())));
    }
    let b = z.dim(0)?;
    if t.len() != b && t.len() != 1 {
        return Err(Error::Dimension(format!("{} timesteps for batch of {b}", t.len())));
    }
    for &ti in t {
        schedule.check_timestep(ti)?;
    }
    let ts: Vec<u32> = if t.len() == b { t.to_vec() } else { vec![t[0]; b] };
    let a: Vec<f64> = ts.iter().map(|&ti| schedule.alpha_bar(ti).sqrt()).collect();
    let s: Vec<f64> = ts.iter().map(|&ti| (1.0 - schedule.alpha_bar(ti)).sqrt()).collect();
    Ok((z.broadcast_mul(&per_sample(&a, z)?)? + eps.broadcast_mul(&per_sample(&s, z)?)?)?)
}
