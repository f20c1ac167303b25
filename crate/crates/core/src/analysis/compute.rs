//! Closed-form parameter and MAC accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{BlockKind, BlockSpec, FeedForward, UNetConfig};
use crate::error::{Error, Result};
use crate::unet::layout::{block_parameters, stem_parameters};

/// Counting rules, stored in every report.
pub const MAC_CONVENTION: &str = "1 MAC = one multiply-add. conv: k*k*Cin*Cout*Hout*Wout; linear: in*out*tokens; \
time projection: once per sample. Norms, activations, softmax and elementwise ops are free. \
`macs` covers conv and linear layers; `attn_macs` holds the two attention matmuls (QK^T and AV, N*M*C each) separately.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeRow {
    pub path: String,
    pub stage: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub attn_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeReport {
    pub convention: String,
    /// Latent resolution the MACs refer to; `None` for parameter-only reports.
    pub latent_hw: Option<(usize, usize)>,
    pub rows: Vec<ComputeRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTotal {
    pub stage: String,
    pub params: u64,
    pub macs: u64,
    pub attn_macs: u64,
}

impl ComputeReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// One U-Net evaluation, conv and linear layers.
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_attn_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.attn_macs).sum()
    }

    pub fn macs_with_attention(&self) -> u64 {
        self.total_macs() + self.total_attn_macs()
    }

    /// MACs of `steps` U-Net evaluations.
    pub fn steps_macs(&self, steps: u64) -> u64 {
        steps * self.total_macs()
    }

    /// Totals per stage in forward order (`stem`, `down.0`, ..., `mid`, `up.0`, ...).
    pub fn stage_totals(&self) -> Vec<StageTotal> {
        let mut order: Vec<String> = Vec::new();
        let mut acc: BTreeMap<String, StageTotal> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.stage.clone()).or_insert_with(|| {
                order.push(r.stage.clone());
                StageTotal { stage: r.stage.clone(), params: 0, macs: 0, attn_macs: 0 }
            });
            e.params += r.params;
            e.macs += r.macs;
            e.attn_macs += r.attn_macs;
        }
        order.into_iter().map(|s| acc.remove(&s).expect("inserted above")).collect()
    }

    pub fn row(&self, path: &str) -> Option<&ComputeRow> {
        self.rows.iter().find(|r| r.path == path)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Domain(e.to_string()))?;
        }
        w.serialize(ComputeRow {
            path: "total".into(),
            stage: "total".into(),
            kind: String::new(),
            params: self.total_params(),
            macs: self.total_macs(),
            attn_macs: self.total_attn_macs(),
        })
        .map_err(|e| Error::Domain(e.to_string()))?;
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Domain(e.to_string()))?).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            report: &'a ComputeReport,
            total_params: u64,
            total_macs: u64,
            total_attn_macs: u64,
            stages: Vec<StageTotal>,
        }
        Ok(serde_json::to_string_pretty(&Out {
            report: self,
            total_params: self.total_params(),
            total_macs: self.total_macs(),
            total_attn_macs: self.total_attn_macs(),
            stages: self.stage_totals(),
        })?)
    }
}

fn count(shapes: &[(String, Vec<usize>)]) -> u64 {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum()
}

fn kind_name(spec: &BlockSpec) -> String {
    format!("{:?}", spec.kind).to_lowercase()
}

fn stem_rows(config: &UNetConfig) -> (Vec<ComputeRow>, Vec<ComputeRow>) {
    let shapes = stem_parameters(config);
    let group = |prefixes: &[&str]| -> u64 {
        count(&shapes.iter().filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p))).cloned().collect::<Vec<_>>())
    };
    let row = |path: &str, kind: &str, params: u64| ComputeRow {
        path: path.into(),
        stage: "stem".into(),
        kind: kind.into(),
        params,
        macs: 0,
        attn_macs: 0,
    };
    (
        vec![row("time_embed", "linear", group(&["time_embed."])), row("conv_in", "conv", group(&["conv_in."]))],
        vec![row("norm_out", "norm", group(&["norm_out."])), row("conv_out", "conv", group(&["conv_out."]))],
    )
}

/// Closed-form parameter totals; no model is built.
pub fn count_params(config: &UNetConfig) -> Result<ComputeReport> {
    config.validate()?;
    let (head, tail) = stem_rows(config);
    let mut rows = head;
    for (path, spec) in config.blocks() {
        rows.push(ComputeRow {
            path: path.to_string(),
            stage: format!("{}.{}", path.stage.as_str(), path.stage_index).replace("mid.0", "mid"),
            kind: kind_name(spec),
            params: count(&block_parameters(config, spec)),
            macs: 0,
            attn_macs: 0,
        });
    }
    rows.extend(tail);
    Ok(ComputeReport { convention: MAC_CONVENTION.into(), latent_hw: None, rows })
}

/// Multiply-adds of a `k x k` convolution producing an `h_out x w_out` map.
pub fn conv_macs(k: u64, c_in: u64, c_out: u64, h_out: u64, w_out: u64) -> u64 {
    k * k * c_in * c_out * h_out * w_out
}

/// Multiply-adds of a linear map applied to `tokens` positions.
pub fn linear_macs(d_in: u64, d_out: u64, tokens: u64) -> u64 {
    d_in * d_out * tokens
}

/// `(macs, attn_macs)` of one block on a `h x w` input grid.
fn block_macs(config: &UNetConfig, spec: &BlockSpec, h_in: u64, w_in: u64, h_out: u64, w_out: u64) -> (u64, u64) {
    let (ci, co) = (spec.in_channels as u64, spec.out_channels as u64);
    match spec.kind {
        BlockKind::Residual => {
            let shortcut = if ci != co { conv_macs(1, ci, co, h_out, w_out) } else { 0 };
            let convs = conv_macs(3, ci, co, h_out, w_out) + conv_macs(3, co, co, h_out, w_out);
            (convs + linear_macs(config.time_embed_dim as u64, co, 1) + shortcut, 0)
        }
        BlockKind::Attention => {
            let c = ci;
            let n = h_in * w_in;
            let (d, l) = (config.context_dim as u64, config.context_len as u64);
            let hidden = config.ffn_mult as u64 * c;
            let proj = match config.ffn {
                FeedForward::Geglu => 2 * hidden,
                FeedForward::Gelu => hidden,
            };
            let linear = c * c * n // proj_in
                + 4 * c * c * n // self-attention q, k, v, out
                + 2 * c * c * n + 2 * d * c * l // cross-attention q, out; k, v over the context
                + (c * proj + hidden * c) * n // feed-forward
                + c * c * n; // proj_out
            (linear, 2 * n * n * c + 2 * n * l * c)
        }
        BlockKind::Downsample | BlockKind::Upsample => (conv_macs(3, ci, co, h_out, w_out), 0),
        BlockKind::ChannelInterp => (0, 0),
    }
}

/// Parameters and one-step MACs at latent resolution `latent_hw`.
pub fn count_macs(config: &UNetConfig, latent_hw: (usize, usize)) -> Result<ComputeReport> {
    let walk = config.check()?;
    let (h, w) = latent_hw;
    if h == 0 || w == 0 || h % walk.max_scale != 0 || w % walk.max_scale != 0 {
        return Err(Error::Dimension(format!(
            "latent {h}x{w} is not divisible by the downsampling factor {}",
            walk.max_scale
        )));
    }
    let mut report = count_params(config)?;
    report.latent_hw = Some(latent_hw);
    let full = (h * w) as u64;
    let t = config.time_embed_dim as u64;
    let (c0, cin, cout) = (config.stage_channels[0] as u64, config.in_channels as u64, config.out_channels as u64);
    for row in &mut report.rows {
        row.macs = match row.path.as_str() {
            "time_embed" => (t / 4) * t + t * t,
            "conv_in" => 9 * cin * c0 * full,
            "conv_out" => 9 * c0 * cout * full,
            _ => 0,
        };
    }
    for site in &walk.sites {
        let (hi, wi) = ((h / site.in_scale) as u64, (w / site.in_scale) as u64);
        let (ho, wo) = ((h / site.out_scale) as u64, (w / site.out_scale) as u64);
        let (macs, attn) = block_macs(config, &site.spec, hi, wi, ho, wo);
        let path = site.path.to_string();
        let row = report.rows.iter_mut().find(|r| r.path == path).expect("every block has a row");
        row.macs = macs;
        row.attn_macs = attn;
    }
    Ok(report)
}
