//! Closed-form parameter names and shapes, mirroring what [`super::UNet::build`]
//! allocates. Used for analytic counting and inheritance maps without
//! instantiating a model.

use crate::config::{BlockKind, BlockSpec, FeedForward, UNetConfig};
use crate::error::Result;

pub type ParamShape = (String, Vec<usize>);

fn linear(out: &mut Vec<ParamShape>, prefix: &str, i: usize, o: usize, bias: bool) {
    out.push((format!("{prefix}.weight"), vec![o, i]));
    if bias {
        out.push((format!("{prefix}.bias"), vec![o]));
    }
}

fn conv(out: &mut Vec<ParamShape>, prefix: &str, i: usize, o: usize, k: usize) {
    out.push((format!("{prefix}.weight"), vec![o, i, k, k]));
    out.push((format!("{prefix}.bias"), vec![o]));
}

fn norm(out: &mut Vec<ParamShape>, prefix: &str, c: usize) {
    out.push((format!("{prefix}.weight"), vec![c]));
    out.push((format!("{prefix}.bias"), vec![c]));
}

/// Parameters of one block, names relative to the block path.
pub fn block_parameters(config: &UNetConfig, spec: &BlockSpec) -> Vec<ParamShape> {
    let mut out = Vec::new();
    let (ci, co) = (spec.in_channels, spec.out_channels);
    match spec.kind {
        BlockKind::Residual => {
            norm(&mut out, "norm1", ci);
            conv(&mut out, "conv1", ci, co, 3);
            linear(&mut out, "time_proj", config.time_embed_dim, co, true);
            norm(&mut out, "norm2", co);
            conv(&mut out, "conv2", co, co, 3);
            if ci != co {
                conv(&mut out, "shortcut", ci, co, 1);
            }
        }
        BlockKind::Attention => {
            let c = ci;
            norm(&mut out, "norm", c);
            conv(&mut out, "proj_in", c, c, 1);
            for (ln, attn, kv) in [("ln1", "attn1", c), ("ln2", "attn2", config.context_dim)] {
                norm(&mut out, ln, c);
                linear(&mut out, &format!("{attn}.to_q"), c, c, false);
                linear(&mut out, &format!("{attn}.to_k"), kv, c, false);
                linear(&mut out, &format!("{attn}.to_v"), kv, c, false);
                linear(&mut out, &format!("{attn}.to_out"), c, c, true);
            }
            norm(&mut out, "ln3", c);
            let hidden = config.ffn_mult * c;
            let proj = match config.ffn {
                FeedForward::Geglu => 2 * hidden,
                FeedForward::Gelu => hidden,
            };
            linear(&mut out, "ff.proj", c, proj, true);
            linear(&mut out, "ff.out", hidden, c, true);
            conv(&mut out, "proj_out", c, c, 1);
        }
        BlockKind::Downsample | BlockKind::Upsample => conv(&mut out, "conv", ci, co, 3),
        BlockKind::ChannelInterp => {}
    }
    out
}

/// Parameters outside the block lists: time embedding, input and output heads.
pub fn stem_parameters(config: &UNetConfig) -> Vec<ParamShape> {
    let mut out = Vec::new();
    let c0 = config.stage_channels.first().copied().unwrap_or(0);
    let t = config.time_embed_dim;
    linear(&mut out, "time_embed.linear_1", t / 4, t, true);
    linear(&mut out, "time_embed.linear_2", t, t, true);
    conv(&mut out, "conv_in", config.in_channels, c0, 3);
    norm(&mut out, "norm_out", c0);
    conv(&mut out, "conv_out", c0, config.out_channels, 3);
    out
}

/// Every parameter of the network with its full name.
pub fn parameter_layout(config: &UNetConfig) -> Result<Vec<ParamShape>> {
    config.validate()?;
    let mut out = stem_parameters(config);
    for (path, spec) in config.blocks() {
        out.extend(block_parameters(config, spec).into_iter().map(|(n, s)| (format!("{path}.{n}"), s)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNet;

    #[test]
    fn layout_matches_built_model_exactly() {
        for cfg in [UNetConfig::micro(), UNetConfig::toy()] {
            let mut want = parameter_layout(&cfg).unwrap();
            want.sort();
            let model = UNet::build(&cfg, 3).unwrap();
            let mut got: Vec<ParamShape> =
                model.params().iter().map(|(n, v)| (n.to_string(), v.dims().to_vec())).collect();
            got.sort();
            assert_eq!(got, want);
        }
    }
}
