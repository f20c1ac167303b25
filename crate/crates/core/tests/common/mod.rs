//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use bkd_core::config::{AttentionHeads, StandardLayout};
use bkd_core::diffusion::LossWeights;
use bkd_core::distill::distill_loss;
use bkd_core::{Context, UNet, UNetConfig};
use candle_core::{DType, Device, Tensor};

/// Two-stage RGB config (attention in the outer stage only).
pub fn small_config(channels: [usize; 2], context_dim: usize, groups: usize, time_dim: usize) -> UNetConfig {
    UNetConfig::standard(StandardLayout {
        stage_channels: channels.to_vec(),
        stage_attention: vec![true, false],
        layers_per_stage: 2,
        attention_heads: AttentionHeads::Uniform(2),
        context_dim,
        context_len: 8,
        norm_groups: groups,
        time_embed_dim: time_dim,
        latent_channels: 3,
    })
}

/// Small enough to train for a few iterations inside a unit test.
pub fn tiny_rgb() -> UNetConfig {
    small_config([8, 16], 8, 4, 16)
}

pub struct GradCheck {
    pub params: usize,
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Compares backprop gradients of the full distillation loss with central
/// differences on `n` evenly spaced scalar parameters, in f64.
pub fn gradient_check(n: usize, tolerance: f64) -> GradCheck {
    let mut cfg = small_config([2, 4], 4, 2, 8);
    cfg.ffn_mult = 2;
    let dev = Device::Cpu;
    let student = UNet::build_on(&cfg, 1, &dev, DType::F64).unwrap();
    let teacher = UNet::build_on(&cfg, 2, &dev, DType::F64).unwrap();
    let z = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &dev).unwrap();
    let eps = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &dev).unwrap();
    let ctx = Context { embedding: Tensor::randn(0f64, 1.0, (2, 8, 4), &dev).unwrap(), key_bias: None };
    let t = [17u32, 640];
    let w = LossWeights { lambda_out: 1.0, lambda_feat: 1.0 };
    let loss = || distill_loss(&student, Some(&teacher), &ctx, &z, &t, &eps, &w).unwrap().0;

    let sizes: Vec<(String, usize)> = student.params().iter().map(|(k, v)| (k.to_string(), v.elem_count())).collect();
    let total: usize = sizes.iter().map(|(_, s)| s).sum();
    let mut picks = Vec::new();
    let mut offset = 0;
    for (name, size) in &sizes {
        for k in 0..n {
            let flat = k * total / n + 7;
            if flat >= offset && flat < offset + size {
                picks.push((name.clone(), flat - offset));
            }
        }
        offset += size;
    }

    let grads = loss().backward().unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (name, i) in &picks {
        let var = student.params().get(name).unwrap();
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[*i])
            .unwrap_or(0.0);
        let original = var.as_tensor().copy().unwrap();
        let shape = original.dims().to_vec();
        let at = |delta: f64| {
            let mut v = original.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            v[*i] += delta;
            student.params().assign(name, &Tensor::from_vec(v, shape.as_slice(), &dev).unwrap()).unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        student.params().assign(name, &original).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        if rel >= tolerance {
            failures.push(format!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}"));
        }
    }
    GradCheck { params: student.num_params(), checked: picks.len(), worst, failures }
}
