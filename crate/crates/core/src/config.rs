//! Declarative U-Net architecture description.
//!
//! A [`UNetConfig`] lists every block of every stage explicitly, so compressed
//! variants are ordinary configs. [`UNetConfig::walk`] replays the skip-stack
//! wiring over the block lists and is the single source of truth for channel
//! flow, resolutions, skip pairing and feature-tap placement.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Residual,
    Attention,
    Downsample,
    Upsample,
    ChannelInterp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub removable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_id: Option<String>,
    /// For a `ChannelInterp` stand-in: the kind of block it replaced. Skip
    /// wiring follows the replaced block's role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaces: Option<BlockKind>,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        let removable = matches!(kind, BlockKind::Residual | BlockKind::Attention);
        Self { kind, in_channels, out_channels, removable, tap_id: None, replaces: None }
    }

    pub fn residual(in_channels: usize, out_channels: usize) -> Self {
        Self::new(BlockKind::Residual, in_channels, out_channels)
    }

    pub fn attention(channels: usize) -> Self {
        Self::new(BlockKind::Attention, channels, channels)
    }

    /// The role this block plays in the skip wiring.
    pub fn role(&self) -> BlockKind {
        match self.kind {
            BlockKind::ChannelInterp => self.replaces.unwrap_or(BlockKind::Residual),
            k => k,
        }
    }

    pub fn is_resampler(&self) -> bool {
        matches!(self.kind, BlockKind::Downsample | BlockKind::Upsample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Down,
    Mid,
    Up,
}

impl StageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageKind::Down => "down",
            StageKind::Mid => "mid",
            StageKind::Up => "up",
        }
    }
}

/// Address of a block: `down.<stage>.<block>`, `mid.0.<block>` or `up.<stage>.<block>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlockPath {
    pub stage: StageKind,
    pub stage_index: usize,
    pub block_index: usize,
}

impl BlockPath {
    pub fn new(stage: StageKind, stage_index: usize, block_index: usize) -> Self {
        Self { stage, stage_index, block_index }
    }

    pub fn down(stage_index: usize, block_index: usize) -> Self {
        Self::new(StageKind::Down, stage_index, block_index)
    }

    pub fn mid(block_index: usize) -> Self {
        Self::new(StageKind::Mid, 0, block_index)
    }

    pub fn up(stage_index: usize, block_index: usize) -> Self {
        Self::new(StageKind::Up, stage_index, block_index)
    }
}

impl fmt::Display for BlockPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.stage.as_str(), self.stage_index, self.block_index)
    }
}

impl FromStr for BlockPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Plan(format!("malformed block path {s:?}, expected e.g. down.0.1"));
        let mut parts = s.split('.');
        let stage = match parts.next() {
            Some("down") => StageKind::Down,
            Some("mid") => StageKind::Mid,
            Some("up") => StageKind::Up,
            _ => return Err(bad()),
        };
        let stage_index = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let block_index = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { stage, stage_index, block_index })
    }
}

impl TryFrom<String> for BlockPath {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BlockPath> for String {
    fn from(p: BlockPath) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttentionHeads {
    Uniform(usize),
    PerStage(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedForward {
    /// Gated GELU: `C -> 2*mult*C`, gate, `mult*C -> C`.
    #[default]
    Geglu,
    /// Plain GELU MLP: `C -> mult*C -> C`.
    Gelu,
}

fn default_ffn_mult() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_down_stage: Vec<Vec<BlockSpec>>,
    pub mid_blocks: Vec<BlockSpec>,
    pub blocks_per_up_stage: Vec<Vec<BlockSpec>>,
    pub attention_heads: AttentionHeads,
    pub context_dim: usize,
    pub context_len: usize,
    pub norm_groups: usize,
    pub time_embed_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub ffn: FeedForward,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

/// Inputs for [`UNetConfig::standard`]: the SD-style layout where every down
/// stage holds `layers_per_stage` residual(+attention) layers and every up
/// stage holds one more.
#[derive(Debug, Clone)]
pub struct StandardLayout {
    pub stage_channels: Vec<usize>,
    pub stage_attention: Vec<bool>,
    pub layers_per_stage: usize,
    pub attention_heads: AttentionHeads,
    pub context_dim: usize,
    pub context_len: usize,
    pub norm_groups: usize,
    pub time_embed_dim: usize,
    pub latent_channels: usize,
}

pub(crate) fn tag_last_non_resampler(blocks: &mut [BlockSpec], tap: String) {
    if let Some(b) = blocks.iter_mut().rev().find(|b| !b.is_resampler()) {
        b.tap_id = Some(tap);
    }
}

impl UNetConfig {
    pub fn standard(layout: StandardLayout) -> Self {
        let ch = &layout.stage_channels;
        let n = ch.len();
        let mut skips = vec![ch[0]];
        let mut prev = ch[0];
        let mut down = Vec::with_capacity(n);
        for (i, &c) in ch.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..layout.layers_per_stage {
                blocks.push(BlockSpec::residual(if j == 0 { prev } else { c }, c));
                if layout.stage_attention[i] {
                    blocks.push(BlockSpec::attention(c));
                }
                skips.push(c);
            }
            if i + 1 < n {
                blocks.push(BlockSpec::new(BlockKind::Downsample, c, c));
                skips.push(c);
            }
            tag_last_non_resampler(&mut blocks, format!("down{i}"));
            down.push(blocks);
            prev = c;
        }

        let inner = ch[n - 1];
        let mut mid = vec![BlockSpec::residual(inner, inner), BlockSpec::attention(inner), BlockSpec::residual(inner, inner)];
        tag_last_non_resampler(&mut mid, "mid".into());

        let mut up = Vec::with_capacity(n);
        let mut prev = inner;
        for i in 0..n {
            let stage = n - 1 - i;
            let c = ch[stage];
            let mut blocks = Vec::new();
            for j in 0..=layout.layers_per_stage {
                let skip = skips.pop().expect("balanced skips");
                let input = if j == 0 { prev } else { c };
                blocks.push(BlockSpec::residual(input + skip, c));
                if layout.stage_attention[stage] {
                    blocks.push(BlockSpec::attention(c));
                }
            }
            if i + 1 < n {
                blocks.push(BlockSpec::new(BlockKind::Upsample, c, c));
            }
            tag_last_non_resampler(&mut blocks, format!("up{i}"));
            up.push(blocks);
            prev = c;
        }

        Self {
            stage_channels: ch.clone(),
            blocks_per_down_stage: down,
            mid_blocks: mid,
            blocks_per_up_stage: up,
            attention_heads: layout.attention_heads,
            context_dim: layout.context_dim,
            context_len: layout.context_len,
            norm_groups: layout.norm_groups,
            time_embed_dim: layout.time_embed_dim,
            in_channels: layout.latent_channels,
            out_channels: layout.latent_channels,
            ffn: FeedForward::Geglu,
            ffn_mult: 4,
        }
    }

    /// The v1-style full-size denoiser (77x768 text context, 8 heads everywhere).
    pub fn fullsize_v1() -> Self {
        Self::standard(StandardLayout {
            stage_channels: vec![320, 640, 1280, 1280],
            stage_attention: vec![true, true, true, false],
            layers_per_stage: 2,
            attention_heads: AttentionHeads::Uniform(8),
            context_dim: 768,
            context_len: 77,
            norm_groups: 32,
            time_embed_dim: 1280,
            latent_channels: 4,
        })
    }

    /// The v2-style full-size denoiser (77x1024 text context, per-stage heads).
    pub fn fullsize_v2() -> Self {
        Self::standard(StandardLayout {
            attention_heads: AttentionHeads::PerStage(vec![5, 10, 20, 20]),
            context_dim: 1024,
            ..Self::fullsize_v1_layout()
        })
    }

    fn fullsize_v1_layout() -> StandardLayout {
        StandardLayout {
            stage_channels: vec![320, 640, 1280, 1280],
            stage_attention: vec![true, true, true, false],
            layers_per_stage: 2,
            attention_heads: AttentionHeads::Uniform(8),
            context_dim: 768,
            context_len: 77,
            norm_groups: 32,
            time_embed_dim: 1280,
            latent_channels: 4,
        }
    }

    /// Desk-scale denoiser for 16x16 RGB pixel-space training.
    pub fn toy() -> Self {
        Self::standard(StandardLayout {
            stage_channels: vec![16, 32, 32, 32],
            stage_attention: vec![true, true, true, false],
            layers_per_stage: 2,
            attention_heads: AttentionHeads::Uniform(2),
            context_dim: 32,
            context_len: 8,
            norm_groups: 8,
            time_embed_dim: 64,
            latent_channels: 3,
        })
    }

    /// Smallest config used in unit tests: two stages, 8x8 latents.
    pub fn micro() -> Self {
        Self::standard(StandardLayout {
            stage_channels: vec![8, 16],
            stage_attention: vec![true, false],
            layers_per_stage: 2,
            attention_heads: AttentionHeads::Uniform(2),
            context_dim: 8,
            context_len: 4,
            norm_groups: 4,
            time_embed_dim: 16,
            latent_channels: 2,
        })
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "fullsize_v1" => Some(Self::fullsize_v1()),
            "fullsize_v2" => Some(Self::fullsize_v2()),
            "toy" => Some(Self::toy()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn heads_for(&self, path: &BlockPath) -> usize {
        let stage = match path.stage {
            StageKind::Down => path.stage_index,
            StageKind::Mid => self.stages() - 1,
            StageKind::Up => self.stages() - 1 - path.stage_index,
        };
        match &self.attention_heads {
            AttentionHeads::Uniform(h) => *h,
            AttentionHeads::PerStage(v) => v.get(stage).or(v.last()).copied().unwrap_or(1),
        }
    }

    pub fn stage_blocks(&self, stage: StageKind, index: usize) -> Option<&Vec<BlockSpec>> {
        match stage {
            StageKind::Down => self.blocks_per_down_stage.get(index),
            StageKind::Mid => (index == 0).then_some(&self.mid_blocks),
            StageKind::Up => self.blocks_per_up_stage.get(index),
        }
    }

    pub fn block(&self, path: &BlockPath) -> Option<&BlockSpec> {
        self.stage_blocks(path.stage, path.stage_index)?.get(path.block_index)
    }

    pub fn block_mut(&mut self, path: &BlockPath) -> Option<&mut BlockSpec> {
        let stage = match path.stage {
            StageKind::Down => self.blocks_per_down_stage.get_mut(path.stage_index)?,
            StageKind::Mid if path.stage_index == 0 => &mut self.mid_blocks,
            StageKind::Mid => return None,
            StageKind::Up => self.blocks_per_up_stage.get_mut(path.stage_index)?,
        };
        stage.get_mut(path.block_index)
    }

    /// Block indices of a stage grouped into layers: a residual block plus the
    /// attention block(s) following it. Resamplers belong to no layer.
    pub fn stage_layers(&self, stage: StageKind, index: usize) -> Vec<Vec<usize>> {
        let mut layers: Vec<Vec<usize>> = Vec::new();
        for (b, spec) in self.stage_blocks(stage, index).into_iter().flatten().enumerate() {
            if spec.is_resampler() {
                continue;
            }
            match (spec.role(), layers.last_mut()) {
                (BlockKind::Attention, Some(layer)) => layer.push(b),
                _ => layers.push(vec![b]),
            }
        }
        layers
    }

    /// Every block in forward order with its address.
    pub fn blocks(&self) -> impl Iterator<Item = (BlockPath, &BlockSpec)> {
        let down = self.blocks_per_down_stage.iter().enumerate().flat_map(|(s, blocks)| {
            blocks.iter().enumerate().map(move |(b, spec)| (BlockPath::down(s, b), spec))
        });
        let mid = self.mid_blocks.iter().enumerate().map(|(b, spec)| (BlockPath::mid(b), spec));
        let up = self.blocks_per_up_stage.iter().enumerate().flat_map(|(s, blocks)| {
            blocks.iter().enumerate().map(move |(b, spec)| (BlockPath::up(s, b), spec))
        });
        down.chain(mid).chain(up)
    }

    /// Field-level checks. Reports every problem rather than the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let n = self.stages();
        if n == 0 {
            problems.push("stage_channels: must list at least one stage".to_string());
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            problems.push("stage_channels: channel counts must be positive".to_string());
        }
        if self.blocks_per_down_stage.len() != n {
            problems.push(format!(
                "blocks_per_down_stage: {} stages listed, stage_channels has {n}",
                self.blocks_per_down_stage.len()
            ));
        }
        if self.blocks_per_up_stage.len() != self.blocks_per_down_stage.len() {
            problems.push(format!(
                "blocks_per_up_stage: {} stages listed, blocks_per_down_stage has {}",
                self.blocks_per_up_stage.len(),
                self.blocks_per_down_stage.len()
            ));
        }
        for (kind, stages) in [("blocks_per_down_stage", &self.blocks_per_down_stage), ("blocks_per_up_stage", &self.blocks_per_up_stage)] {
            for (i, blocks) in stages.iter().enumerate() {
                if blocks.is_empty() {
                    problems.push(format!("{kind}[{i}]: every stage needs at least one block"));
                }
            }
        }
        for (name, v) in [
            ("context_dim", self.context_dim),
            ("context_len", self.context_len),
            ("norm_groups", self.norm_groups),
            ("time_embed_dim", self.time_embed_dim),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                problems.push(format!("{name}: must be positive"));
            }
        }
        if self.time_embed_dim % 8 != 0 {
            problems.push(format!(
                "time_embed_dim: {} must be a multiple of 8 (sinusoidal width is time_embed_dim/4, split into sin and cos)",
                self.time_embed_dim
            ));
        }
        match &self.attention_heads {
            AttentionHeads::Uniform(0) => problems.push("attention_heads: must be positive".to_string()),
            AttentionHeads::PerStage(v) if v.len() != n || v.contains(&0) => problems.push(format!(
                "attention_heads: per-stage list must have {n} positive entries, got {v:?}"
            )),
            _ => {}
        }
        let groups = self.norm_groups.max(1);
        if let Some(&c0) = self.stage_channels.first() {
            if c0 % groups != 0 {
                problems.push(format!("norm_groups: {groups} does not divide stage_channels[0] = {c0}"));
            }
        }
        for (path, spec) in self.blocks() {
            if spec.in_channels == 0 || spec.out_channels == 0 {
                problems.push(format!("{path}: channel counts must be positive"));
                continue;
            }
            match spec.kind {
                BlockKind::Residual => {
                    for c in [spec.in_channels, spec.out_channels] {
                        if c % groups != 0 {
                            problems.push(format!("norm_groups: {groups} does not divide {c} channels of residual block {path}"));
                        }
                    }
                }
                BlockKind::Attention => {
                    if spec.in_channels != spec.out_channels {
                        problems.push(format!("{path}: attention block must keep its channel count"));
                    }
                    if spec.in_channels % groups != 0 {
                        problems.push(format!(
                            "norm_groups: {groups} does not divide {} channels of attention block {path}",
                            spec.in_channels
                        ));
                    }
                    let heads = self.heads_for(&path).max(1);
                    if spec.in_channels % heads != 0 {
                        problems.push(format!(
                            "attention_heads: {heads} heads do not divide {} channels of {path}",
                            spec.in_channels
                        ));
                    }
                }
                BlockKind::Downsample | BlockKind::Upsample => {
                    if spec.in_channels != spec.out_channels {
                        problems.push(format!("{path}: resampling block must keep its channel count"));
                    }
                    if path.stage == StageKind::Mid {
                        problems.push(format!("{path}: resampling blocks are not allowed in the mid-stage"));
                    }
                }
                BlockKind::ChannelInterp => {
                    if spec.removable {
                        problems.push(format!("{path}: channel interpolation stand-ins are not removable"));
                    }
                }
            }
            if spec.kind == BlockKind::Downsample && path.stage != StageKind::Down {
                problems.push(format!("{path}: downsampling only allowed in down stages"));
            }
            if spec.kind == BlockKind::Upsample && path.stage != StageKind::Up {
                problems.push(format!("{path}: upsampling only allowed in up stages"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (path, spec) in self.blocks() {
            if let Some(tap) = &spec.tap_id {
                if !seen.insert(tap.clone()) {
                    problems.push(format!("{path}: duplicate tap_id {tap:?}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }

    /// Replays the forward wiring: channel signatures, skip pushes/pops and
    /// resolution changes. Fails with a structural error naming the first
    /// block that does not fit.
    pub fn walk(&self) -> Result<Walk> {
        let mut sites = Vec::new();
        let mut taps = Vec::new();
        let c0 = *self.stage_channels.first().ok_or_else(|| Error::config("stage_channels: empty"))?;
        let mut skips: Vec<SkipEntry> = vec![SkipEntry { channels: c0, scale: 1 }];
        let mut pushed = 1;
        let mut popped = 0;
        let mut channels = c0;
        let mut scale = 1usize;
        let mut max_scale = 1usize;

        let mut visit = |path: BlockPath, spec: &BlockSpec, next_role: Option<BlockKind>, channels: &mut usize, scale: &mut usize| -> Result<()> {
            let mut skip = None;
            match (path.stage, spec.role()) {
                (StageKind::Up, BlockKind::Residual) => {
                    let entry = skips.pop().ok_or_else(|| {
                        Error::structure(path, "up-stage residual block has no skip tensor left to consume")
                    })?;
                    popped += 1;
                    if entry.scale != *scale {
                        return Err(Error::structure(
                            path,
                            format!("skip tensor at 1/{} resolution meets features at 1/{}", entry.scale, *scale),
                        ));
                    }
                    if spec.in_channels != *channels + entry.channels {
                        return Err(Error::structure(
                            path,
                            format!(
                                "expects {} input channels but receives {} + {} skip channels",
                                spec.in_channels, *channels, entry.channels
                            ),
                        ));
                    }
                    skip = Some(entry.channels);
                }
                _ => {
                    if spec.in_channels != *channels {
                        return Err(Error::structure(
                            path,
                            format!("expects {} input channels but receives {}", spec.in_channels, *channels),
                        ));
                    }
                }
            }
            let in_scale = *scale;
            match spec.kind {
                BlockKind::Downsample => *scale *= 2,
                BlockKind::Upsample => {
                    if *scale == 1 {
                        return Err(Error::structure(path, "upsampling past the input resolution"));
                    }
                    *scale /= 2;
                }
                _ => {}
            }
            *channels = spec.out_channels;
            let push = path.stage == StageKind::Down
                && (spec.kind == BlockKind::Downsample || next_role != Some(BlockKind::Attention));
            if push {
                skips.push(SkipEntry { channels: *channels, scale: *scale });
                pushed += 1;
            }
            if let Some(tap) = &spec.tap_id {
                taps.push(TapSite { tap_id: tap.clone(), channels: *channels, scale: *scale });
            }
            sites.push(BlockSite {
                path,
                spec: spec.clone(),
                skip_channels: skip,
                pushes_skip: push,
                in_scale,
                out_scale: *scale,
            });
            Ok(())
        };

        for (s, blocks) in self.blocks_per_down_stage.iter().enumerate() {
            for (b, spec) in blocks.iter().enumerate() {
                let next = blocks.get(b + 1).map(BlockSpec::role);
                visit(BlockPath::down(s, b), spec, next, &mut channels, &mut scale)?;
                max_scale = max_scale.max(scale);
            }
        }
        for (b, spec) in self.mid_blocks.iter().enumerate() {
            visit(BlockPath::mid(b), spec, None, &mut channels, &mut scale)?;
        }
        for (s, blocks) in self.blocks_per_up_stage.iter().enumerate() {
            for (b, spec) in blocks.iter().enumerate() {
                visit(BlockPath::up(s, b), spec, None, &mut channels, &mut scale)?;
            }
        }
        drop(visit);

        if !skips.is_empty() {
            return Err(Error::structure(
                "up path",
                format!("skip imbalance: {pushed} skip tensors pushed, {popped} consumed"),
            ));
        }
        if scale != 1 {
            return Err(Error::structure("up path", format!("output left at 1/{scale} resolution")));
        }
        if channels != c0 {
            return Err(Error::structure(
                "up path",
                format!("final features have {channels} channels, output head expects {c0}"),
            ));
        }
        Ok(Walk { sites, taps, skips_pushed: pushed, skips_popped: popped, max_scale })
    }

    /// Field validation followed by the wiring walk.
    pub fn check(&self) -> Result<Walk> {
        self.validate()?;
        self.walk()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct SkipEntry {
    channels: usize,
    scale: usize,
}

/// One block as seen by the forward pass.
#[derive(Debug, Clone)]
pub struct BlockSite {
    pub path: BlockPath,
    pub spec: BlockSpec,
    /// Channels of the skip tensor concatenated before this block (up-stage residuals).
    pub skip_channels: Option<usize>,
    pub pushes_skip: bool,
    /// Spatial downscale factor of the block input relative to the latent.
    pub in_scale: usize,
    pub out_scale: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapSite {
    pub tap_id: String,
    pub channels: usize,
    pub scale: usize,
}

#[derive(Debug, Clone)]
pub struct Walk {
    pub sites: Vec<BlockSite>,
    pub taps: Vec<TapSite>,
    pub skips_pushed: usize,
    pub skips_popped: usize,
    pub max_scale: usize,
}

impl Walk {
    /// `[C, H, W]` of every tap for a given latent size.
    pub fn tap_shapes(&self, h: usize, w: usize) -> Vec<(String, [usize; 3])> {
        self.taps.iter().map(|t| (t.tap_id.clone(), [t.channels, h / t.scale, w / t.scale])).collect()
    }
}
