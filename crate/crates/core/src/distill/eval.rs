//! Held-out metrics: denoising loss and distance to the teacher's prediction
//! on a fixed set of noised probes.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::pipeline::Pipeline;
use crate::data::Dataset;
use crate::diffusion::{forward_diffuse, mse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ops::scalar_f64;
use crate::text::Condition;

const EVAL_CHUNK: usize = 32;

/// Fixed `(z_t, t, eps, caption)` probes.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub z_t: Tensor,
    pub eps: Tensor,
    pub t: Vec<u32>,
    pub tokens: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub denoise_loss: f64,
    pub teacher_mse: Option<f64>,
}

impl EvalSet {
    /// `size` probes cycling over the validation split (the training split if
    /// there is no validation data).
    pub fn from_dataset(data: &Dataset, size: usize, seed: u64, schedule: &NoiseSchedule, pipeline: &Pipeline) -> Result<Self> {
        let pool: Vec<usize> = if data.val_indices().is_empty() { data.train_indices().collect() } else { data.val_indices().collect() };
        if pool.is_empty() || size == 0 {
            return Err(Error::Domain("no records to build an evaluation set from".into()));
        }
        let indices: Vec<usize> = (0..size).map(|i| pool[i % pool.len()]).collect();
        let device = pipeline.unet.device();
        let dtype = pipeline.unet.dtype();
        let z0 = data.batch(&indices, &[], device, dtype)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<u32> = (0..size).map(|_| rng.random_range(1..=schedule.max_timestep())).collect();
        let noise: Vec<f32> = (0..z0.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::from_vec(noise, z0.dims(), device)?.to_dtype(dtype)?;
        let z_t = forward_diffuse(&z0, &eps, &t, schedule)?;
        let tokens = indices.iter().map(|&i| data.records[i].tokens.clone()).collect();
        Ok(Self { z_t, eps, t, tokens })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn predict(p: &Pipeline, set: &EvalSet, start: usize, len: usize) -> Result<Tensor> {
    let conds = set.tokens[start..start + len].iter().map(|t| p.text.condition(t)).collect::<Result<Vec<_>>>()?;
    let ctx = Condition::stack(&conds)?.detach();
    let z = set.z_t.narrow(0, start, len)?;
    Ok(p.unet.forward(&z, &set.t[start..start + len], &ctx)?.0.detach())
}

/// Denoising loss of `model` on the probes, and its MSE to `teacher`'s
/// predictions when a teacher is given.
pub fn evaluate(model: &Pipeline, teacher: Option<&Pipeline>, set: &EvalSet) -> Result<EvalMetrics> {
    let n = set.len();
    let (mut denoise, mut teacher_mse) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let pred = predict(model, set, start, len)?;
        let weight = len as f64 / n as f64;
        denoise += scalar_f64(&mse(&pred, &set.eps.narrow(0, start, len)?)?)? * weight;
        if let Some(tp) = teacher {
            teacher_mse += scalar_f64(&mse(&pred, &predict(tp, set, start, len)?)?)? * weight;
        }
        start += len;
    }
    Ok(EvalMetrics { denoise_loss: denoise, teacher_mse: teacher.map(|_| teacher_mse) })
}
