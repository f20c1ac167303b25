//! Block-importance probes: replace a block (or a layer group) by an identity
//! or channel interpolation and measure how the metrics move.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compression::{apply_plan, inherit_weights, CompressionPlan, Substitution};
use crate::config::{BlockPath, StageKind, UNetConfig};
use crate::distill::{evaluate, EvalSet, Pipeline};
use crate::error::{Error, Result};
use crate::unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Block,
    Group,
}

/// How a probed block was taken out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Identity stand-in (input and output channels agree).
    Removal,
    /// Parameter-free channel interpolation stand-in.
    ChannelInterp,
    /// A group mixing both.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub target: String,
    pub blocks: Vec<BlockPath>,
    pub kind: ProbeKind,
    pub scores: BTreeMap<String, f64>,
    pub deltas: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub granularity: Granularity,
    pub baseline: BTreeMap<String, f64>,
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityReport {
    /// Successful rows by decreasing delta of `metric`.
    pub fn ranked(&self, metric: &str) -> Vec<&SensitivityRow> {
        let mut rows: Vec<&SensitivityRow> = self.rows.iter().filter(|r| r.deltas.contains_key(metric)).collect();
        rows.sort_by(|a, b| b.deltas[metric].total_cmp(&a.deltas[metric]));
        rows
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let metrics: Vec<&String> = self.baseline.keys().collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["target".to_string(), "kind".to_string()];
        for m in &metrics {
            header.push(m.to_string());
            header.push(format!("delta_{m}"));
        }
        header.push("error".into());
        w.write_record(&header).map_err(|e| Error::Domain(e.to_string()))?;
        let fmt = |v: Option<&f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.target.clone(), serde_json::to_value(r.kind)?.as_str().unwrap_or_default().to_string()];
            for m in &metrics {
                rec.push(fmt(r.scores.get(*m)));
                rec.push(fmt(r.deltas.get(*m)));
            }
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(|e| Error::Domain(e.to_string()))?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Domain(e.to_string()))?).expect("csv output is UTF-8"))
    }
}

/// Scores a model; keys name the metrics.
pub type MetricFn<'a> = dyn Fn(&Pipeline) -> Result<BTreeMap<String, f64>> + 'a;

/// Teacher-output MSE and denoising loss on `eval`.
pub fn default_metrics<'a>(teacher: &'a Pipeline, eval: &'a EvalSet) -> impl Fn(&Pipeline) -> Result<BTreeMap<String, f64>> + 'a {
    move |model| {
        let m = evaluate(model, Some(teacher), eval)?;
        Ok(BTreeMap::from([
            ("denoise_loss".to_string(), m.denoise_loss),
            ("teacher_mse".to_string(), m.teacher_mse.unwrap_or(0.0)),
        ]))
    }
}

fn stand_in(config: &UNetConfig, path: &BlockPath) -> Substitution {
    let spec = config.block(path).expect("probe targets come from the config");
    if spec.in_channels == spec.out_channels {
        Substitution::Bypass
    } else {
        Substitution::ChannelInterp
    }
}

/// Probe targets: each removable block, or each residual/attention layer of
/// every down and up stage plus the whole mid stage.
pub fn probe_targets(config: &UNetConfig, granularity: Granularity) -> Vec<(String, Vec<BlockPath>)> {
    match granularity {
        Granularity::Block => config.blocks().filter(|(_, s)| s.removable).map(|(p, _)| (p.to_string(), vec![p])).collect(),
        Granularity::Group => {
            let mut out = Vec::new();
            let stage_groups = |kind: StageKind, n: usize, out: &mut Vec<(String, Vec<BlockPath>)>| {
                for s in 0..n {
                    for (i, layer) in config.stage_layers(kind, s).into_iter().enumerate() {
                        let paths: Vec<BlockPath> = layer.into_iter().map(|b| BlockPath::new(kind, s, b)).collect();
                        if paths.iter().all(|p| config.block(p).is_some_and(|b| b.removable)) {
                            out.push((format!("{}.{s}.layer{i}", kind.as_str()), paths));
                        }
                    }
                }
            };
            stage_groups(StageKind::Down, config.blocks_per_down_stage.len(), &mut out);
            if !config.mid_blocks.is_empty() {
                out.push(("mid".to_string(), (0..config.mid_blocks.len()).map(BlockPath::mid).collect()));
            }
            stage_groups(StageKind::Up, config.blocks_per_up_stage.len(), &mut out);
            out
        }
    }
}

/// The teacher with the given blocks substituted, as a separate model.
pub fn probe_variant(teacher: &Pipeline, blocks: &[BlockPath]) -> Result<Pipeline> {
    let cfg = teacher.unet.config();
    let plan = CompressionPlan {
        substitutions: blocks.iter().map(|p| (*p, stand_in(cfg, p))).collect(),
        ..Default::default()
    };
    let (vcfg, map) = apply_plan(cfg, &plan)?;
    let unet = UNet::build_on(&vcfg, 0, teacher.unet.device(), teacher.unet.dtype())?.with_max_timestep(teacher.unet.max_timestep());
    inherit_weights(&teacher.unet, &unet, &map)?;
    Ok(teacher.with_unet(unet))
}

/// Runs every probe of `granularity`. Failures of one probe are recorded in
/// its row; the sweep continues. The teacher is only read.
pub fn sensitivity_analysis(
    teacher: &Pipeline,
    granularity: Granularity,
    metric: &MetricFn<'_>,
) -> Result<SensitivityReport> {
    let baseline = metric(teacher)?;
    let cfg = teacher.unet.config();
    let mut rows = Vec::new();
    for (target, blocks) in probe_targets(cfg, granularity) {
        let kinds: Vec<Substitution> = blocks.iter().map(|p| stand_in(cfg, p)).collect();
        let kind = if kinds.iter().all(|k| *k == Substitution::Bypass) {
            ProbeKind::Removal
        } else if kinds.iter().all(|k| *k == Substitution::ChannelInterp) {
            ProbeKind::ChannelInterp
        } else {
            ProbeKind::Mixed
        };
        let mut row = SensitivityRow { target, blocks: blocks.clone(), kind, scores: BTreeMap::new(), deltas: BTreeMap::new(), error: None };
        match probe_variant(teacher, &blocks).and_then(|v| metric(&v)) {
            Ok(scores) => {
                row.deltas = scores.iter().filter_map(|(k, v)| baseline.get(k).map(|b| (k.clone(), v - b))).collect();
                row.scores = scores;
            }
            Err(e) => {
                log::warn!("probe {} failed: {e}", row.target);
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    Ok(SensitivityReport { granularity, baseline, rows })
}
