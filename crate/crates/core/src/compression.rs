//! Block-removal plans, the Base/Small/Tiny presets and teacher-to-student
//! weight inheritance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::config::{tag_last_non_resampler, AttentionHeads, BlockKind, BlockPath, BlockSpec, StageKind, UNetConfig};
use crate::error::{Error, Result};
use crate::unet::layout::{block_parameters, stem_parameters};
use crate::unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Base,
    Small,
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Base, Preset::Small, Preset::Tiny];

    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Base => "base",
            Preset::Small => "small",
            Preset::Tiny => "tiny",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Preset::Base),
            "small" => Ok(Preset::Small),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Plan(format!("unknown preset {s:?}, expected base, small or tiny"))),
        }
    }
}

/// What a substituted block becomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Substitution {
    /// Parameter-free channel resampler for a block whose channel count changes.
    ChannelInterp,
    /// Identity stand-in for a block with equal in/out channels. Keeps the skip
    /// wiring intact, so any single block can be knocked out.
    Bypass,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPlan {
    #[serde(default)]
    pub removals: BTreeSet<BlockPath>,
    #[serde(default)]
    pub remove_mid_stage: bool,
    #[serde(default)]
    pub remove_innermost_stages: bool,
    #[serde(default)]
    pub substitutions: BTreeMap<BlockPath, Substitution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
}

impl CompressionPlan {
    pub fn is_empty(&self) -> bool {
        self.removals.is_empty() && !self.remove_mid_stage && !self.remove_innermost_stages && self.substitutions.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Checks the plan against a teacher without building the student.
    pub fn validate_for(&self, teacher: &UNetConfig) -> Result<()> {
        if self.remove_innermost_stages && !self.remove_mid_stage {
            return Err(Error::Plan("innermost-stage removal requires mid-stage removal".into()));
        }
        if self.remove_innermost_stages && teacher.stages() < 2 {
            return Err(Error::Plan("innermost-stage removal needs at least two stages".into()));
        }
        for path in &self.removals {
            match teacher.block(path) {
                None => return Err(Error::Plan(format!("removal {path} names no block of the teacher"))),
                Some(spec) if !spec.removable => {
                    return Err(Error::Plan(format!("block {path} ({:?}) is not removable", spec.kind)))
                }
                Some(_) => {}
            }
            if self.substitutions.contains_key(path) {
                return Err(Error::Plan(format!("block {path} is both removed and substituted")));
            }
        }
        for (path, sub) in &self.substitutions {
            let spec = teacher
                .block(path)
                .ok_or_else(|| Error::Plan(format!("substitution {path} names no block of the teacher")))?;
            if spec.is_resampler() || spec.kind == BlockKind::ChannelInterp {
                return Err(Error::Misuse { block: path.to_string(), reason: format!("{:?} blocks cannot be substituted", spec.kind) });
            }
            match (sub, spec.in_channels == spec.out_channels) {
                (Substitution::ChannelInterp, true) => {
                    return Err(Error::Misuse {
                        block: path.to_string(),
                        reason: format!("block keeps {} channels; remove it instead", spec.in_channels),
                    })
                }
                (Substitution::Bypass, false) => {
                    return Err(Error::Misuse {
                        block: path.to_string(),
                        reason: format!(
                            "block maps {} to {} channels; use channel interpolation",
                            spec.in_channels, spec.out_channels
                        ),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Teacher-to-student correspondence for blocks and parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InheritanceMap {
    /// Retained blocks, teacher path to student path, in forward order.
    pub blocks: Vec<(BlockPath, BlockPath)>,
    /// Student parameter name to the teacher parameter it inherits.
    pub params: BTreeMap<String, String>,
}

impl InheritanceMap {
    /// `(teacher, student)` parameter pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.params.iter().map(|(s, t)| (t.as_str(), s.as_str()))
    }

    pub fn student_block(&self, teacher: &BlockPath) -> Option<BlockPath> {
        self.blocks.iter().find(|(t, _)| t == teacher).map(|(_, s)| *s)
    }

    pub fn teacher_block(&self, student: &BlockPath) -> Option<BlockPath> {
        self.blocks.iter().find(|(_, s)| s == student).map(|(t, _)| *t)
    }

    /// Fraction of the student's parameter tensors that have a teacher source.
    pub fn coverage(&self, student: &UNet) -> f64 {
        let total = student.params().len();
        if total == 0 {
            return 1.0;
        }
        let covered = student.params().names().filter(|n| self.params.contains_key(*n)).count();
        covered as f64 / total as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Applies the fixed preset recipe to a teacher with the standard layout:
/// two layers per down stage, three per up stage.
///
/// * Base drops the second layer of every down stage and the second layer of
///   every up stage, keeping the first and third.
/// * Small additionally drops the mid-stage.
/// * Tiny additionally drops the innermost down and up stages.
pub fn preset_plan(preset: Preset, teacher: &UNetConfig) -> Result<CompressionPlan> {
    teacher.validate()?;
    let mut plan = CompressionPlan { preset: Some(preset), ..Default::default() };
    for (stage, count, want) in [
        (StageKind::Down, teacher.blocks_per_down_stage.len(), 2),
        (StageKind::Up, teacher.blocks_per_up_stage.len(), 3),
    ] {
        for i in 0..count {
            let layers = teacher.stage_layers(stage, i);
            if layers.len() != want {
                return Err(Error::Plan(format!(
                    "{} stage {i} has {} layers, the preset recipe needs {want}",
                    stage.as_str(),
                    layers.len()
                )));
            }
            plan.removals.extend(layers[1].iter().map(|&b| BlockPath::new(stage, i, b)));
        }
    }
    if preset != Preset::Base {
        if teacher.mid_blocks.is_empty() {
            return Err(Error::Plan("teacher has no mid-stage to remove".into()));
        }
        plan.remove_mid_stage = true;
    }
    if preset == Preset::Tiny {
        if teacher.stages() < 2 {
            return Err(Error::Plan("innermost-stage removal needs at least two stages".into()));
        }
        plan.remove_innermost_stages = true;
    }
    Ok(plan)
}

fn stand_in(spec: &BlockSpec) -> BlockSpec {
    BlockSpec {
        kind: BlockKind::ChannelInterp,
        in_channels: spec.in_channels,
        out_channels: spec.out_channels,
        removable: false,
        tap_id: spec.tap_id.clone(),
        replaces: Some(spec.role()),
    }
}

/// Keeps the blocks of one stage that survive the plan, recording the block
/// correspondence. A tap carried by a removed block moves to the last
/// surviving non-resampler of the stage.
fn compact_stage(
    blocks: &[BlockSpec],
    teacher_stage: (StageKind, usize),
    student_index: usize,
    drop: impl Fn(usize, &BlockSpec) -> bool,
    plan: &CompressionPlan,
    map: &mut Vec<(BlockPath, BlockPath)>,
) -> Result<Vec<BlockSpec>> {
    let (kind, index) = teacher_stage;
    let mut kept = Vec::new();
    let mut orphan_tap = None;
    for (b, spec) in blocks.iter().enumerate() {
        let path = BlockPath::new(kind, index, b);
        if plan.removals.contains(&path) || drop(b, spec) {
            if spec.tap_id.is_some() {
                orphan_tap = spec.tap_id.clone();
            }
            continue;
        }
        let spec = match plan.substitutions.get(&path) {
            Some(_) => stand_in(spec),
            None => spec.clone(),
        };
        map.push((path, BlockPath::new(kind, student_index, kept.len())));
        kept.push(spec);
    }
    if kind != StageKind::Mid && kept.is_empty() {
        return Err(Error::structure(format!("{}.{index}", kind.as_str()), "removal leaves the stage without blocks"));
    }
    if let Some(tap) = orphan_tap {
        if !kept.iter().any(|b| b.tap_id.is_some()) {
            tag_last_non_resampler(&mut kept, tap);
        }
    }
    Ok(kept)
}

/// Builds the student config and the inheritance map for a plan.
///
/// Student block paths are compacted (indices renumbered after removal);
/// substituted blocks keep their position. Structural errors name the teacher
/// block at which the student's wiring breaks.
pub fn apply_plan(teacher: &UNetConfig, plan: &CompressionPlan) -> Result<(UNetConfig, InheritanceMap)> {
    teacher.check()?;
    plan.validate_for(teacher)?;
    let n = teacher.stages();
    let inner = plan.remove_innermost_stages;
    let mut blocks_map = Vec::new();

    let mut down = Vec::new();
    for (s, blocks) in teacher.blocks_per_down_stage.iter().enumerate() {
        if inner && s == n - 1 {
            continue;
        }
        let drop_resampler = inner && s + 2 == n;
        let student_index = down.len();
        down.push(compact_stage(
            blocks,
            (StageKind::Down, s),
            student_index,
            |_, spec| drop_resampler && spec.kind == BlockKind::Downsample,
            plan,
            &mut blocks_map,
        )?);
    }
    let mid = compact_stage(&teacher.mid_blocks, (StageKind::Mid, 0), 0, |_, _| plan.remove_mid_stage, plan, &mut blocks_map)?;
    let mut up = Vec::new();
    for (s, blocks) in teacher.blocks_per_up_stage.iter().enumerate() {
        if inner && s == 0 {
            continue;
        }
        let student_index = up.len();
        up.push(compact_stage(blocks, (StageKind::Up, s), student_index, |_, _| false, plan, &mut blocks_map)?);
    }

    let mut student = teacher.clone();
    student.blocks_per_down_stage = down;
    student.mid_blocks = mid;
    student.blocks_per_up_stage = up;
    if inner {
        student.stage_channels.truncate(n - 1);
        if let AttentionHeads::PerStage(v) = &mut student.attention_heads {
            v.truncate(n - 1);
        }
    }

    if let Err(err) = student.check() {
        return Err(match err {
            Error::Structure { block, reason } => {
                let teacher_block = block
                    .parse::<BlockPath>()
                    .ok()
                    .and_then(|p| blocks_map.iter().find(|(_, s)| *s == p).map(|(t, _)| t.to_string()))
                    .unwrap_or(block);
                Error::structure(teacher_block, reason)
            }
            other => other,
        });
    }

    let mut params = BTreeMap::new();
    for (name, _) in stem_parameters(&student) {
        params.insert(name.clone(), name);
    }
    for (tp, sp) in &blocks_map {
        let t_spec = teacher.block(tp).expect("mapped teacher block exists");
        let s_spec = student.block(sp).expect("mapped student block exists");
        if s_spec.kind == BlockKind::ChannelInterp && t_spec.kind != BlockKind::ChannelInterp {
            continue;
        }
        for (suffix, _) in block_parameters(&student, s_spec) {
            params.insert(format!("{sp}.{suffix}"), format!("{tp}.{suffix}"));
        }
    }
    Ok((student, InheritanceMap { blocks: blocks_map, params }))
}

/// Copies every mapped teacher parameter into the student.
pub fn inherit_weights(teacher: &UNet, student: &UNet, map: &InheritanceMap) -> Result<()> {
    let mut problems = Vec::new();
    for (s_name, t_name) in &map.params {
        match (teacher.params().get(t_name), student.params().get(s_name)) {
            (Some(t), Some(s)) if t.dims() != s.dims() => problems.push(format!(
                "{t_name} {:?} cannot initialise {s_name} {:?}",
                t.dims(),
                s.dims()
            )),
            (None, _) => problems.push(format!("teacher has no parameter {t_name}")),
            (_, None) => problems.push(format!("student has no parameter {s_name}")),
            _ => {}
        }
    }
    if !problems.is_empty() {
        return Err(Error::Inheritance(problems.join("; ")));
    }
    for (s_name, t_name) in &map.params {
        let t = teacher.params().get(t_name).expect("checked above");
        student.params().assign(s_name, t.as_tensor())?;
    }
    Ok(())
}

/// Builds the student for a plan and initialises it from the teacher.
pub fn compress(teacher: &UNet, plan: &CompressionPlan) -> Result<(UNet, InheritanceMap)> {
    let (cfg, map) = apply_plan(teacher.config(), plan)?;
    let student = UNet::build_on(&cfg, 0, teacher.device(), teacher.dtype())?.with_max_timestep(teacher.max_timestep());
    inherit_weights(teacher, &student, &map)?;
    Ok((student, map))
}

/// Teacher parameters that no student parameter inherits.
pub fn removed_weights(teacher: &UNet, map: &InheritanceMap) -> Result<Archive> {
    let used: BTreeSet<&str> = map.params.values().map(String::as_str).collect();
    let mut archive = Archive::new();
    for (name, var) in teacher.params().iter() {
        if !used.contains(name) {
            archive.insert(name, var.as_tensor())?;
        }
    }
    Ok(archive)
}

/// Rebuilds the teacher from a student plus the weights its plan removed.
pub fn reinsert(student: &UNet, teacher_config: &UNetConfig, map: &InheritanceMap, removed: &Archive) -> Result<UNet> {
    let teacher = UNet::build_on(teacher_config, 0, student.device(), student.dtype())?.with_max_timestep(student.max_timestep());
    let mut missing = Vec::new();
    let by_teacher: BTreeMap<&str, &str> = map.params.iter().map(|(s, t)| (t.as_str(), s.as_str())).collect();
    for name in teacher.params().names() {
        let value = match by_teacher.get(name) {
            Some(s_name) => student.params().get(s_name).map(|v| v.as_tensor().clone()),
            None => removed.get(name, student.device())?,
        };
        match value {
            Some(v) => teacher.params().assign(name, &v)?,
            None => missing.push(name.to_string()),
        }
    }
    if missing.is_empty() {
        Ok(teacher)
    } else {
        Err(Error::Inheritance(format!("no saved weights for {}", missing.join(", "))))
    }
}

/// Replaces one channel-changing block by a parameter-free channel
/// interpolation module.
pub fn substitute_channel_interp(teacher: &UNetConfig, path: &BlockPath) -> Result<UNetConfig> {
    let plan = CompressionPlan {
        substitutions: BTreeMap::from([(*path, Substitution::ChannelInterp)]),
        ..Default::default()
    };
    Ok(apply_plan(teacher, &plan)?.0)
}
