use candle_core::{Tensor, D};

use crate::error::Result;
use crate::ops;
use crate::params::{Init, ParamBuilder};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.var("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
        let bias = if bias { Some(pb.var("bias", &[out_dim], Init::Uniform(bound))?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut dims = x.dims().to_vec();
        let in_dim = dims.pop().unwrap_or(1);
        let rows = x.elem_count() / in_dim.max(1);
        let mut y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        dims.push(self.weight.dim(0)?);
        Ok(y.reshape(dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = pb.var("weight", &[c_out, c_in, kernel, kernel], Init::Uniform(bound))?;
        let bias = pb.var("bias", &[c_out], Init::Uniform(bound))?;
        Ok(Self { weight, bias, stride, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, groups: usize, channels: usize, eps: f64) -> Result<Self> {
        let weight = pb.var("weight", &[channels], Init::Const(1.0))?;
        let bias = pb.var("bias", &[channels], Init::Const(0.0))?;
        Ok(Self { weight, bias, groups, eps })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::group_norm(x, self.groups, &self.weight, &self.bias, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        let weight = pb.var("weight", &[dim], Init::Const(1.0))?;
        let bias = pb.var("bias", &[dim], Init::Const(0.0))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.weight, &self.bias, 1e-5)
    }
}

/// Sinusoidal features (cos half first) of integer timesteps.
pub fn timestep_features(timesteps: &[u32], dim: usize, device: &candle_core::Device, dtype: candle_core::DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let args: Vec<f64> = freqs.collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Splits the last axis in two halves and returns `a * gelu(b)`.
pub fn geglu(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(D::Minus1)? / 2;
    let a = x.narrow(D::Minus1, 0, n)?;
    let b = x.narrow(D::Minus1, n, n)?;
    Ok((a * gelu(&b)?)?)
}
