use candle_core::Tensor;

use super::layers::{geglu, gelu, silu, Conv2d, GroupNorm, LayerNorm, Linear};
use crate::config::{BlockKind, BlockSpec, FeedForward, UNetConfig};
use crate::error::Result;
use crate::ops;
use crate::params::ParamBuilder;

/// GroupNorm -> SiLU -> 3x3 conv -> (+ time projection) -> GroupNorm -> SiLU
/// -> 3x3 conv, with a 1x1 shortcut when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, cfg: &UNetConfig, c_in: usize, c_out: usize) -> Result<Self> {
        let g = cfg.norm_groups;
        Ok(Self {
            norm1: GroupNorm::new(&mut pb.push("norm1"), g, c_in, 1e-5)?,
            conv1: Conv2d::new(&mut pb.push("conv1"), c_in, c_out, 3, 1)?,
            time_proj: Linear::new(&mut pb.push("time_proj"), cfg.time_embed_dim, c_out, true)?,
            norm2: GroupNorm::new(&mut pb.push("norm2"), g, c_out, 1e-5)?,
            conv2: Conv2d::new(&mut pb.push("conv2"), c_out, c_out, 3, 1)?,
            shortcut: if c_in != c_out { Some(Conv2d::new(&mut pb.push("shortcut"), c_in, c_out, 1, 1)?) } else { None },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let t = self.time_proj.forward(&silu(temb)?)?;
        let h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl Attention {
    fn new(pb: &mut ParamBuilder, query_dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            to_q: Linear::new(&mut pb.push("to_q"), query_dim, query_dim, false)?,
            to_k: Linear::new(&mut pb.push("to_k"), context_dim, query_dim, false)?,
            to_v: Linear::new(&mut pb.push("to_v"), context_dim, query_dim, false)?,
            to_out: Linear::new(&mut pb.push("to_out"), query_dim, query_dim, true)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Returns the attended output and the attention probabilities
    /// `[B, heads, N, L]`.
    fn forward(&self, x: &Tensor, context: &Tensor, key_bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = x.dims3()?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let q = self.split_heads(&(self.to_q.forward(x)? * scale)?)?;
        let k = self.split_heads(&self.to_k.forward(context)?)?;
        let v = self.split_heads(&self.to_v.forward(context)?)?;
        let mut scores = q.matmul(&k.t()?)?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let probs = ops::softmax_last(&scores)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        Ok((self.to_out.forward(&out)?, probs))
    }
}

#[derive(Debug, Clone)]
struct FeedForwardNet {
    proj: Linear,
    out: Linear,
    kind: FeedForward,
}

impl FeedForwardNet {
    fn new(pb: &mut ParamBuilder, dim: usize, kind: FeedForward, mult: usize) -> Result<Self> {
        let hidden = mult * dim;
        let proj_out = match kind {
            FeedForward::Geglu => 2 * hidden,
            FeedForward::Gelu => hidden,
        };
        Ok(Self {
            proj: Linear::new(&mut pb.push("proj"), dim, proj_out, true)?,
            out: Linear::new(&mut pb.push("out"), hidden, dim, true)?,
            kind,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.proj.forward(x)?;
        let h = match self.kind {
            FeedForward::Geglu => geglu(&h)?,
            FeedForward::Gelu => gelu(&h)?,
        };
        self.out.forward(&h)
    }
}

/// Spatial transformer of depth one: self-attention, cross-attention on the
/// text context, feed-forward; wrapped in GroupNorm + 1x1 projections.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForwardNet,
    proj_out: Conv2d,
}

impl AttnBlock {
    pub fn new(pb: &mut ParamBuilder, cfg: &UNetConfig, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut pb.push("norm"), cfg.norm_groups, channels, 1e-6)?,
            proj_in: Conv2d::new(&mut pb.push("proj_in"), channels, channels, 1, 1)?,
            ln1: LayerNorm::new(&mut pb.push("ln1"), channels)?,
            self_attn: Attention::new(&mut pb.push("attn1"), channels, channels, heads)?,
            ln2: LayerNorm::new(&mut pb.push("ln2"), channels)?,
            cross_attn: Attention::new(&mut pb.push("attn2"), channels, cfg.context_dim, heads)?,
            ln3: LayerNorm::new(&mut pb.push("ln3"), channels)?,
            ff: FeedForwardNet::new(&mut pb.push("ff"), channels, cfg.ffn, cfg.ffn_mult)?,
            proj_out: Conv2d::new(&mut pb.push("proj_out"), channels, channels, 1, 1)?,
        })
    }

    /// Returns the block output and the cross-attention probabilities.
    pub fn forward(&self, x: &Tensor, context: &Tensor, key_bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let hidden = self.proj_in.forward(&self.norm.forward(x)?)?;
        let mut seq = hidden.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let n1 = self.ln1.forward(&seq)?;
        seq = (&seq + self.self_attn.forward(&n1, &n1, None)?.0)?;
        let (cross, probs) = self.cross_attn.forward(&self.ln2.forward(&seq)?, context, key_bias)?;
        seq = (seq + cross)?;
        seq = (&seq + self.ff.forward(&self.ln3.forward(&seq)?)?)?;
        let hidden = seq.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok(((x + self.proj_out.forward(&hidden)?)?, probs))
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Res(ResBlock),
    Attn(AttnBlock),
    Down(Conv2d),
    Up(Conv2d),
    Interp { out_channels: usize },
}

impl Block {
    pub fn new(pb: &mut ParamBuilder, cfg: &UNetConfig, spec: &BlockSpec, heads: usize) -> Result<Self> {
        Ok(match spec.kind {
            BlockKind::Residual => Block::Res(ResBlock::new(pb, cfg, spec.in_channels, spec.out_channels)?),
            BlockKind::Attention => Block::Attn(AttnBlock::new(pb, cfg, spec.in_channels, heads)?),
            BlockKind::Downsample => Block::Down(Conv2d::new(&mut pb.push("conv"), spec.in_channels, spec.out_channels, 3, 2)?),
            BlockKind::Upsample => Block::Up(Conv2d::new(&mut pb.push("conv"), spec.in_channels, spec.out_channels, 3, 1)?),
            BlockKind::ChannelInterp => Block::Interp { out_channels: spec.out_channels },
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        temb: &Tensor,
        context: &Tensor,
        key_bias: Option<&Tensor>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        Ok(match self {
            Block::Res(b) => (b.forward(x, temb)?, None),
            Block::Attn(b) => {
                let (y, probs) = b.forward(x, context, key_bias)?;
                (y, Some(probs))
            }
            Block::Down(c) => (c.forward(x)?, None),
            Block::Up(c) => (c.forward(&ops::upsample_nearest2x(x)?)?, None),
            Block::Interp { out_channels } => (ops::channel_interp(x, *out_channels)?, None),
        })
    }
}
