//! Conditional U-Net noise predictor.
//!
//! The network is assembled from a [`UNetConfig`]; the wiring (which blocks
//! push or pop skip tensors, where feature taps sit) comes from
//! [`UNetConfig::walk`], so compressed configs need no special casing here.

mod blocks;
mod layers;
pub mod layout;

use std::path::Path;

use candle_core::{DType, Device, Tensor};

pub use blocks::{AttnBlock, Block, ResBlock};
pub use layers::timestep_features;

use crate::archive::Archive;
use crate::config::{BlockPath, BlockSite, UNetConfig, Walk};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use layers::{silu, Conv2d, GroupNorm, Linear};

/// Batched text conditioning: `[B, L, D]` embeddings plus an optional additive
/// key bias `[B, 1, 1, L]` that masks padding tokens.
#[derive(Debug, Clone)]
pub struct Context {
    pub embedding: Tensor,
    pub key_bias: Option<Tensor>,
}

impl Context {
    pub fn batch(&self) -> Result<usize> {
        Ok(self.embedding.dim(0)?)
    }

    /// Concatenates two contexts along the batch axis.
    pub fn concat(&self, other: &Context) -> Result<Context> {
        let embedding = Tensor::cat(&[&self.embedding, &other.embedding], 0)?;
        let key_bias = match (&self.key_bias, &other.key_bias) {
            (None, None) => None,
            (a, b) => {
                let fill = |bias: &Option<Tensor>, ctx: &Context| -> Result<Tensor> {
                    match bias {
                        Some(t) => Ok(t.clone()),
                        None => {
                            let (b, l, _) = ctx.embedding.dims3()?;
                            Ok(Tensor::zeros((b, 1, 1, l), ctx.embedding.dtype(), ctx.embedding.device())?)
                        }
                    }
                };
                Some(Tensor::cat(&[&fill(a, self)?, &fill(b, other)?], 0)?)
            }
        };
        Ok(Context { embedding, key_bias })
    }

    pub fn detach(&self) -> Context {
        Context { embedding: self.embedding.detach(), key_bias: self.key_bias.as_ref().map(Tensor::detach) }
    }
}

/// Stage-boundary feature maps in forward order (outer down -> mid -> outer up).
#[derive(Debug, Clone, Default)]
pub struct FeatureTapSet {
    pub taps: Vec<(String, Tensor)>,
}

impl FeatureTapSet {
    pub fn get(&self, tap_id: &str) -> Option<&Tensor> {
        self.taps.iter().find(|(id, _)| id == tap_id).map(|(_, t)| t)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.taps.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn detach(&self) -> FeatureTapSet {
        FeatureTapSet { taps: self.taps.iter().map(|(id, t)| (id.clone(), t.detach())).collect() }
    }
}

/// Cross-attention probabilities of one attention block, `[B, heads, H*W, L]`.
#[derive(Debug, Clone)]
pub struct CrossAttnCapture {
    pub path: BlockPath,
    pub height: usize,
    pub width: usize,
    pub probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Tensor,
    pub taps: FeatureTapSet,
    pub cross_attention: Vec<CrossAttnCapture>,
}

#[derive(Debug, Clone)]
struct TimeEmbedding {
    features: usize,
    linear_1: Linear,
    linear_2: Linear,
}

/// The noise predictor. Weights are shared `Var`s owned by [`ParamStore`];
/// forward passes only read them.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    walk: Walk,
    params: ParamStore,
    time_embed: TimeEmbedding,
    conv_in: Conv2d,
    blocks: Vec<(BlockSite, Block)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    max_timestep: u32,
}

pub const DEFAULT_MAX_TIMESTEP: u32 = 1000;

impl UNet {
    /// Builds the network with f32 weights on the CPU.
    pub fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        Self::build_on(config, seed, &Device::Cpu, DType::F32)
    }

    pub fn build_on(config: &UNetConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        let walk = config.check()?;
        let mut params = ParamStore::new(device.clone(), dtype);
        let mut pb = ParamBuilder::new(&mut params, seed);
        let c0 = config.stage_channels[0];
        let features = config.time_embed_dim / 4;
        let time_embed = TimeEmbedding {
            features,
            linear_1: Linear::new(&mut pb.push("time_embed.linear_1"), features, config.time_embed_dim, true)?,
            linear_2: Linear::new(&mut pb.push("time_embed.linear_2"), config.time_embed_dim, config.time_embed_dim, true)?,
        };
        let conv_in = Conv2d::new(&mut pb.push("conv_in"), config.in_channels, c0, 3, 1)?;
        let mut blocks = Vec::with_capacity(walk.sites.len());
        for site in &walk.sites {
            let heads = config.heads_for(&site.path);
            let block = Block::new(&mut pb.push(&site.path.to_string()), config, &site.spec, heads)?;
            blocks.push((site.clone(), block));
        }
        let norm_out = GroupNorm::new(&mut pb.push("norm_out"), config.norm_groups, c0, 1e-5)?;
        let conv_out = Conv2d::new(&mut pb.push("conv_out"), c0, config.out_channels, 3, 1)?;
        Ok(Self {
            config: config.clone(),
            walk,
            params,
            time_embed,
            conv_in,
            blocks,
            norm_out,
            conv_out,
            max_timestep: DEFAULT_MAX_TIMESTEP,
        })
    }

    /// Sets the largest accepted timestep (the schedule length `T`).
    pub fn with_max_timestep(mut self, t: u32) -> Self {
        self.max_timestep = t;
        self
    }

    pub fn max_timestep(&self) -> u32 {
        self.max_timestep
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn walk(&self) -> &Walk {
        &self.walk
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn num_params(&self) -> usize {
        self.params.total_elements()
    }

    /// Noise prediction and stage-boundary features.
    pub fn forward(&self, z_t: &Tensor, t: &[u32], ctx: &Context) -> Result<(Tensor, FeatureTapSet)> {
        let out = self.forward_traced(z_t, t, ctx, false)?;
        Ok((out.eps, out.taps))
    }

    /// Like [`UNet::forward`], optionally keeping every cross-attention map.
    pub fn forward_traced(&self, z_t: &Tensor, t: &[u32], ctx: &Context, capture: bool) -> Result<ForwardOutput> {
        let (b, c, h, w) = z_t
            .dims4()
            .map_err(|_| Error::Dimension(format!("latent must be [B, C, H, W], got {:?}", z_t.dims())))?;
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!("latent has {c} channels, model expects {}", self.config.in_channels)));
        }
        let s = self.walk.max_scale;
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("latent {h}x{w} is not divisible by the downsampling factor {s}")));
        }
        if t.len() != b {
            return Err(Error::Dimension(format!("{} timesteps for batch of {b}", t.len())));
        }
        if let Some(bad) = t.iter().find(|&&v| v < 1 || v > self.max_timestep) {
            return Err(Error::Domain(format!("timestep {bad} outside [1, {}]", self.max_timestep)));
        }
        let (cb, cl, cd) = ctx.embedding.dims3()?;
        if cb != b || cd != self.config.context_dim {
            return Err(Error::Dimension(format!(
                "context {:?} does not match batch {b} and context_dim {}",
                [cb, cl, cd],
                self.config.context_dim
            )));
        }

        let tf = timestep_features(t, self.time_embed.features, self.device(), self.dtype())?;
        let temb = self.time_embed.linear_2.forward(&silu(&self.time_embed.linear_1.forward(&tf)?)?)?;

        let mut hidden = self.conv_in.forward(z_t)?;
        let mut skips = vec![hidden.clone()];
        let mut taps = FeatureTapSet::default();
        let mut cross_attention = Vec::new();
        for (site, block) in &self.blocks {
            if site.skip_channels.is_some() {
                let skip = skips.pop().ok_or_else(|| Error::structure(site.path, "skip stack exhausted"))?;
                hidden = Tensor::cat(&[&hidden, &skip], 1)?;
            }
            let (out, probs) = block.forward(&hidden, &temb, &ctx.embedding, ctx.key_bias.as_ref())?;
            hidden = out;
            if capture {
                if let Some(p) = probs {
                    cross_attention.push(CrossAttnCapture {
                        path: site.path,
                        height: h / site.in_scale,
                        width: w / site.in_scale,
                        probs: p.detach(),
                    });
                }
            }
            if site.pushes_skip {
                skips.push(hidden.clone());
            }
            if let Some(tap) = &site.spec.tap_id {
                taps.taps.push((tap.clone(), hidden.clone()));
            }
        }
        let eps = self.conv_out.forward(&silu(&self.norm_out.forward(&hidden)?)?)?;
        Ok(ForwardOutput { eps, taps, cross_attention })
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        Archive::from_store(&self.params)?.write(path)
    }

    /// Loads every parameter from an archive. Names and shapes must match the
    /// model exactly; all offenders are reported together.
    pub fn load_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        Archive::read(path)?.load_into(&self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(cfg: &UNetConfig, b: usize, seed: u64) -> Context {
        let _ = seed;
        let emb = Tensor::randn(0f32, 1.0, (b, cfg.context_len, cfg.context_dim), &Device::Cpu).unwrap();
        Context { embedding: emb, key_bias: None }
    }

    #[test]
    fn micro_forward_preserves_shape_and_emits_taps() {
        let cfg = UNetConfig::micro();
        let model = UNet::build(&cfg, 0).unwrap();
        let z = Tensor::randn(0f32, 1.0, (2, 2, 8, 8), &Device::Cpu).unwrap();
        let out = model.forward_traced(&z, &[1, 500], &ctx(&cfg, 2, 0), true).unwrap();
        assert_eq!(out.eps.dims(), z.dims());
        assert_eq!(out.taps.ids(), vec!["down0", "down1", "mid", "up0", "up1"]);
        // down0 has 2 attention blocks, up1 has 3
        assert_eq!(out.cross_attention.len(), 2 + 1 + 3);
        let rows = out.cross_attention[0].probs.sum_keepdim(3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(rows.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = UNetConfig::micro();
        let model = UNet::build(&cfg, 0).unwrap();
        let c = ctx(&cfg, 1, 0);
        let z = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(model.forward(&z, &[1], &c), Err(Error::Dimension(_))));
        let z = Tensor::zeros((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(model.forward(&z, &[0], &c), Err(Error::Domain(_))));
        assert!(matches!(model.forward(&z, &[1001], &c), Err(Error::Domain(_))));
        let z = Tensor::zeros((1, 2, 7, 7), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(model.forward(&z, &[3], &c), Err(Error::Dimension(_))));
    }
}
