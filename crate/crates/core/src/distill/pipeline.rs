//! A trained text-to-image model: U-Net, text encoder, vocabulary, schedule
//! and latent codec, saved together in one directory.

use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::config::UNetConfig;
use crate::data::{images_to_tensor, tensor_to_images, Image, LatentCodec, Vocabulary};
use crate::diffusion::{make_schedule, sample, sdedit, NoiseSchedule, SamplerConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::params::fnv1a;
use crate::text::{Condition, TextEncoder};
use crate::unet::UNet;

pub const PIPELINE_FILE: &str = "pipeline.json";
pub const UNET_FILE: &str = "unet.tensors";
pub const TEXT_FILE: &str = "text.tensors";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn linear(steps: usize) -> Self {
        Self { kind: ScheduleKind::Linear, steps, beta_start: 1e-4, beta_end: 0.02 }
    }

    pub fn of(schedule: &NoiseSchedule) -> Self {
        Self { kind: schedule.kind, steps: schedule.len(), beta_start: schedule.beta_start, beta_end: schedule.beta_end }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PipelineFile {
    unet: UNetConfig,
    vocabulary: Vocabulary,
    schedule: ScheduleSpec,
    codec: LatentCodec,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub unet: UNet,
    pub text: TextEncoder,
    pub vocabulary: Vocabulary,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
}

impl Pipeline {
    /// Freshly initialised model; `seed` fixes all weights.
    pub fn new(config: &UNetConfig, vocabulary: Vocabulary, schedule: NoiseSchedule, codec: LatentCodec, seed: u64) -> Result<Self> {
        Self::new_on(config, vocabulary, schedule, codec, seed, &Device::Cpu, DType::F32)
    }

    pub fn new_on(
        config: &UNetConfig,
        vocabulary: Vocabulary,
        schedule: NoiseSchedule,
        codec: LatentCodec,
        seed: u64,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        let unet = UNet::build_on(config, seed, device, dtype)?.with_max_timestep(schedule.max_timestep());
        let text_seed = seed ^ fnv1a(b"text");
        let text = TextEncoder::build_on(vocabulary.len(), config.context_len, config.context_dim, text_seed, device, dtype)?;
        Ok(Self { unet, text, vocabulary, schedule, codec })
    }

    /// Same text encoder, vocabulary and schedule around another U-Net.
    pub fn with_unet(&self, unet: UNet) -> Self {
        Self { unet, ..self.clone() }
    }

    /// Tokenizes and embeds a prompt. The empty prompt is the null condition.
    pub fn condition(&self, prompt: &str) -> Result<Condition> {
        let tokens = self.vocabulary.tokenize(prompt);
        if tokens.is_empty() {
            self.text.null_condition()
        } else {
            self.text.condition(&tokens)
        }
    }

    pub fn conditions(&self, prompts: &[&str]) -> Result<Vec<Condition>> {
        prompts.iter().map(|p| self.condition(p)).collect()
    }

    pub fn generate(&self, prompts: &[&str], cfg: &SamplerConfig, image_size: usize) -> Result<Vec<Image>> {
        let conds = self.conditions(prompts)?;
        let (h, w) = self.codec.latent_hw(image_size, image_size);
        let z = sample(&self.unet, &conds, &self.text.null_condition()?, cfg, &self.schedule, (h, w))?;
        tensor_to_images(&self.codec.decode(&z)?)
    }

    pub fn img2img(&self, inputs: &[Image], prompts: &[&str], strength: f64, cfg: &SamplerConfig) -> Result<Vec<Image>> {
        let refs: Vec<&Image> = inputs.iter().collect();
        let z = self.codec.encode(&images_to_tensor(&refs, self.unet.device(), self.unet.dtype())?)?;
        let conds = self.conditions(prompts)?;
        let out = sdedit(&self.unet, &z, strength, &conds, &self.text.null_condition()?, cfg, &self.schedule)?;
        tensor_to_images(&self.codec.decode(&out)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let file = PipelineFile {
            unet: self.unet.config().clone(),
            vocabulary: self.vocabulary.clone(),
            schedule: ScheduleSpec::of(&self.schedule),
            codec: self.codec,
        };
        std::fs::write(dir.join(PIPELINE_FILE), serde_json::to_string_pretty(&file)?)?;
        self.unet.save_weights(dir.join(UNET_FILE))?;
        self.text.save(dir.join(TEXT_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(PIPELINE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Data { path: path.clone(), message: e.to_string() })?;
        let file: PipelineFile = serde_json::from_str(&text)?;
        let pipeline = Self::new(&file.unet, file.vocabulary, file.schedule.build()?, file.codec, 0)?;
        pipeline.unet.load_weights(dir.join(UNET_FILE))?;
        pipeline.text.load(dir.join(TEXT_FILE))?;
        Ok(pipeline)
    }
}
