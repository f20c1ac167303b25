use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde_json::json;

use bkd_core::analysis::{
    attribution_maps, count_macs, default_metrics, sensitivity_analysis, Granularity, SensitivityReport,
};
use bkd_core::compression::{apply_plan, preset_plan, CompressionPlan, Preset};
use bkd_core::data::{generate_synthetic, grid, ingest_folder, Dataset, DatasetManifest, Image, LatentCodec};
use bkd_core::diffusion::{LossWeights, SamplerConfig, SamplerKind};
use bkd_core::distill::{EvalSet, InitMode, Pipeline, TrainConfig, TrainSession};
use bkd_core::{Error, UNetConfig};

use crate::provenance::write_run_record;
use crate::{Cli, CliError, CliResult, Command, Global};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Teacher,
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplerArg {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GranularityArg {
    Block,
    Group,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    fn ext(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    /// Latent codec pooling factor (1 = pixel space).
    #[arg(long, default_value_t = 1)]
    pub latent_factor: usize,
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
    /// Ingest this image folder instead of rendering shapes.
    #[arg(long, requires = "captions")]
    pub folder: Option<PathBuf>,
    /// Tab-separated `filename<TAB>caption` file for `--folder`.
    #[arg(long)]
    pub captions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// JSON training config; the flags below override its fields.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Background loader queue depth (0 = load inline).
    #[arg(long)]
    pub prefetch: Option<usize>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    /// Built-in config name (toy, micro, fullsize_v1, fullsize_v2) or JSON path.
    #[arg(long, default_value = "toy")]
    pub config: String,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Trained teacher directory.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "plan")]
    pub preset: Option<Preset>,
    /// JSON compression plan.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "on")]
    pub kd: OnOff,
    #[arg(long, value_enum, default_value = "teacher")]
    pub init: InitArg,
    #[arg(long)]
    pub lambda_out: Option<f64>,
    #[arg(long)]
    pub lambda_feat: Option<f64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SamplerFlags {
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    #[arg(long, default_value_t = 7.5)]
    pub guidance: f64,
    #[arg(long, value_enum, default_value = "ddim")]
    pub sampler: SamplerArg,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
}

impl SamplerFlags {
    fn config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance_scale: self.guidance,
            sampler: match self.sampler {
                SamplerArg::Ddim => SamplerKind::Ddim,
                SamplerArg::Ddpm => SamplerKind::Ddpm,
            },
            eta: self.eta,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt; repeat for a batch.
    #[arg(long, required = true)]
    pub prompt: Vec<String>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long, value_enum, default_value = "ppm")]
    pub format: ImageFormat,
}

#[derive(Debug, Args)]
pub struct Img2ImgArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input image; repeat for a batch.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// One prompt for all inputs or one per input.
    #[arg(long, required = true)]
    pub prompt: Vec<String>,
    #[arg(long, default_value_t = 0.6)]
    pub strength: f64,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long, value_enum, default_value = "ppm")]
    pub format: ImageFormat,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, default_value = "fullsize_v1")]
    pub config: String,
    #[arg(long, conflicts_with = "plan")]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Latent resolution as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_hw)]
    pub latent: (usize, usize),
    /// Denoising steps for the N-step total.
    #[arg(long, default_value_t = 25)]
    pub steps: u64,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "block")]
    pub granularity: GranularityArg,
    #[arg(long, default_value_t = 64)]
    pub eval_size: usize,
}

#[derive(Debug, Args)]
pub struct AttributionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required = true)]
    pub prompt: Vec<String>,
    /// Other models whose maps are compared (cosine) with `--model`.
    #[arg(long)]
    pub compare: Vec<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long, value_enum, default_value = "png")]
    pub format: ImageFormat,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension {v:?} in {s:?}"));
    Ok((parse(h)?, parse(w)?))
}

fn load_unet_config(spec: &str) -> CliResult<UNetConfig> {
    let cfg = match UNetConfig::builtin(spec) {
        Some(c) => c,
        None => {
            let text = std::fs::read_to_string(spec)
                .map_err(|e| CliError::Usage(format!("config {spec:?} is neither a built-in name nor a readable file: {e}")))?;
            UNetConfig::from_json(&text)?
        }
    };
    cfg.check()?;
    Ok(cfg)
}

fn load_plan(preset: Option<Preset>, plan: Option<&Path>, teacher: &UNetConfig) -> CliResult<CompressionPlan> {
    Ok(match (preset, plan) {
        (Some(p), _) => preset_plan(p, teacher)?,
        (None, Some(path)) => CompressionPlan::from_json(&std::fs::read_to_string(path)?)?,
        (None, None) => CompressionPlan::default(),
    })
}

fn train_config(flags: &TrainFlags, seed: u64) -> CliResult<TrainConfig> {
    let mut tc = match &flags.train_config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(Error::from)?,
        None => TrainConfig::default(),
    };
    tc.seed = seed;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = flags.$flag { tc.$field = v; })* };
    }
    set!(iterations => iterations, batch_size => batch_size, grad_accum => grad_accum_steps, lr => learning_rate,
        eval_every => eval_every, eval_size => eval_size, checkpoint_every => checkpoint_every, prefetch => prefetch);
    tc.validate()?;
    Ok(tc)
}

fn write_images(dir: &Path, prefix: &str, images: &[Image], format: ImageFormat) -> CliResult<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (k, img) in images.iter().enumerate() {
        let name = format!("{prefix}_{k:03}.{}", format.ext());
        img.write(dir.join(&name))?;
        names.push(name);
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    grid(images, cols)?.write_png(dir.join(format!("{prefix}_grid.png")))?;
    Ok(names)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).map_err(Error::from)?)?;
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    std::fs::create_dir_all(&g.out)?;
    match &cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::TrainTeacher(a) => train_teacher(g, a),
        Command::Distill(a) => distill(g, a),
        Command::Sample(a) => sample(g, a),
        Command::Img2img(a) => img2img(g, a),
        Command::Profile(a) => profile(g, a),
        Command::Sensitivity(a) => sensitivity(g, a),
        Command::Attribution(a) => attribution(g, a),
    }
}

fn gen_data(g: &Global, a: &GenDataArgs) -> CliResult<()> {
    let mut ds = match (&a.folder, &a.captions) {
        (Some(folder), Some(captions)) => ingest_folder(folder, captions, a.image_size)?,
        _ => generate_synthetic(&DatasetManifest::synthetic(g.seed, a.count, a.image_size))?,
    };
    ds.manifest.train_fraction = a.train_fraction;
    ds.manifest.codec = LatentCodec::new(a.latent_factor)?;
    ds.manifest.validate()?;
    ds.save(&g.out)?;
    write_run_record(&g.out, "gen-data", g.seed, g.threads, serde_json::to_value(&ds.manifest).map_err(Error::from)?)?;
    println!("wrote {} records to {}", ds.len(), g.out.display());
    Ok(())
}

fn finish_training(g: &Global, command: &str, mut session: TrainSession<'_>, data: &Dataset, extra: serde_json::Value) -> CliResult<()> {
    session.tc.checkpoint_dir = Some(g.out.clone());
    let config = json!({ "train": session.tc, "unet": session.model.unet.config(), "data": data.manifest, "extra": extra });
    write_run_record(&g.out, command, g.seed, g.threads, config)?;
    session.run(data)?;
    let (_, log) = session.finish();
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "iterations {}: eval denoise loss {:.5} -> {:.5}{}",
            last.iteration,
            first.eval_denoise_loss,
            last.eval_denoise_loss,
            last.eval_teacher_mse.map(|v| format!(", teacher mse {v:.5}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn train_teacher(g: &Global, a: &TrainTeacherArgs) -> CliResult<()> {
    let data = Dataset::load(&a.data)?;
    let session = match &a.train.resume {
        Some(dir) => {
            let mut s = TrainSession::resume(dir, &data, None)?;
            if let Some(n) = a.train.iterations {
                s.tc.iterations = n;
            }
            s
        }
        None => TrainSession::for_teacher(&load_unet_config(&a.config)?, &data, train_config(&a.train, g.seed)?)?,
    };
    finish_training(g, "train-teacher", session, &data, json!({}))
}

fn distill(g: &Global, a: &DistillArgs) -> CliResult<()> {
    let data = Dataset::load(&a.data)?;
    let teacher = Pipeline::load(&a.teacher)?;
    let plan = load_plan(a.preset, a.plan.as_deref(), teacher.unet.config())?;
    let session = match &a.train.resume {
        Some(dir) => {
            let mut s = TrainSession::resume(dir, &data, Some(&teacher))?;
            if let Some(n) = a.train.iterations {
                s.tc.iterations = n;
            }
            s
        }
        None => {
            let mut tc = train_config(&a.train, g.seed)?;
            tc.kd_enabled = matches!(a.kd, OnOff::On);
            tc.init_mode = match a.init {
                InitArg::Teacher => InitMode::Teacher,
                InitArg::Random => InitMode::Random,
            };
            let defaults = tc.loss_weights;
            tc.loss_weights = LossWeights {
                lambda_out: a.lambda_out.unwrap_or(defaults.lambda_out),
                lambda_feat: a.lambda_feat.unwrap_or(defaults.lambda_feat),
            };
            tc.validate()?;
            TrainSession::for_student(&teacher, &plan, &data, tc)?
        }
    };
    let (_, map) = apply_plan(teacher.unet.config(), &plan)?;
    std::fs::write(g.out.join("plan.json"), plan.to_json()?)?;
    std::fs::write(g.out.join("inheritance.json"), map.to_json()?)?;
    let extra = json!({ "teacher": a.teacher, "plan": plan });
    finish_training(g, "distill", session, &data, extra)
}

fn sample(g: &Global, a: &SampleArgs) -> CliResult<()> {
    let model = Pipeline::load(&a.model)?;
    let cfg = a.sampler.config(g.seed);
    write_run_record(&g.out, "sample", g.seed, g.threads, json!({ "model": a.model, "prompts": a.prompt, "sampler": cfg, "image_size": a.sampler.image_size }))?;
    let prompts: Vec<&str> = a.prompt.iter().map(String::as_str).collect();
    let images = model.generate(&prompts, &cfg, a.sampler.image_size)?;
    let names = write_images(&g.out, "sample", &images, a.format)?;
    write_json(&g.out.join("samples.json"), &json!({ "prompts": a.prompt, "files": names }))?;
    println!("wrote {} samples to {}", images.len(), g.out.display());
    Ok(())
}

fn img2img(g: &Global, a: &Img2ImgArgs) -> CliResult<()> {
    let model = Pipeline::load(&a.model)?;
    let cfg = a.sampler.config(g.seed);
    if a.prompt.len() != 1 && a.prompt.len() != a.input.len() {
        return Err(CliError::Usage(format!("{} prompts for {} inputs", a.prompt.len(), a.input.len())));
    }
    write_run_record(
        &g.out,
        "img2img",
        g.seed,
        g.threads,
        json!({ "model": a.model, "inputs": a.input, "prompts": a.prompt, "strength": a.strength, "sampler": cfg }),
    )?;
    let inputs = a
        .input
        .iter()
        .map(|p| Image::read(p)?.resize_center_crop(a.sampler.image_size))
        .collect::<bkd_core::Result<Vec<_>>>()?;
    let prompts: Vec<&str> = (0..inputs.len()).map(|i| a.prompt[i.min(a.prompt.len() - 1)].as_str()).collect();
    let images = model.img2img(&inputs, &prompts, a.strength, &cfg)?;
    write_images(&g.out, "img2img", &images, a.format)?;
    println!("wrote {} images to {}", images.len(), g.out.display());
    Ok(())
}

fn profile(g: &Global, a: &ProfileArgs) -> CliResult<()> {
    let base = load_unet_config(&a.config)?;
    let plan = load_plan(a.preset, a.plan.as_deref(), &base)?;
    let (cfg, _) = apply_plan(&base, &plan)?;
    write_run_record(&g.out, "profile", g.seed, g.threads, json!({ "config": base, "plan": plan, "latent": a.latent, "steps": a.steps }))?;
    let reference = count_macs(&base, a.latent)?;
    let report = count_macs(&cfg, a.latent)?;
    let pct = |new: u64, old: u64| 100.0 * (new as f64 - old as f64) / old as f64;
    let summary = json!({
        "params": report.total_params(),
        "macs_one_step": report.total_macs(),
        "attn_macs_one_step": report.total_attn_macs(),
        "steps": a.steps,
        "macs_n_steps": report.steps_macs(a.steps),
        "params_change_pct": pct(report.total_params(), reference.total_params()),
        "macs_change_pct": pct(report.total_macs(), reference.total_macs()),
        "reference_params": reference.total_params(),
        "reference_macs_one_step": reference.total_macs(),
    });
    std::fs::write(g.out.join("profile.csv"), report.to_csv()?)?;
    let mut full: serde_json::Value = serde_json::from_str(&report.to_json()?).map_err(Error::from)?;
    full["summary"] = summary.clone();
    write_json(&g.out.join("profile.json"), &full)?;
    println!(
        "params {:.2}M ({:+.1}%), MACs/step {:.1}G ({:+.1}%), {} steps {:.0}G",
        report.total_params() as f64 / 1e6,
        summary["params_change_pct"].as_f64().unwrap_or(0.0),
        report.total_macs() as f64 / 1e9,
        summary["macs_change_pct"].as_f64().unwrap_or(0.0),
        a.steps,
        report.steps_macs(a.steps) as f64 / 1e9
    );
    Ok(())
}

fn sensitivity(g: &Global, a: &SensitivityArgs) -> CliResult<()> {
    let model = Pipeline::load(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let granularity = match a.granularity {
        GranularityArg::Block => Granularity::Block,
        GranularityArg::Group => Granularity::Group,
    };
    write_run_record(&g.out, "sensitivity", g.seed, g.threads, json!({ "model": a.model, "data": a.data, "granularity": granularity, "eval_size": a.eval_size }))?;
    let eval = EvalSet::from_dataset(&data, a.eval_size, g.seed, &model.schedule, &model)?;
    let metric = default_metrics(&model, &eval);
    let report: SensitivityReport = sensitivity_analysis(&model, granularity, &metric)?;
    std::fs::write(g.out.join("sensitivity.json"), report.to_json()?)?;
    std::fs::write(g.out.join("sensitivity.csv"), report.to_csv()?)?;
    for row in report.ranked("teacher_mse") {
        println!("{:<16} {:>12.6}", row.target, row.deltas["teacher_mse"]);
    }
    Ok(())
}

fn attribution(g: &Global, a: &AttributionArgs) -> CliResult<()> {
    let model = Pipeline::load(&a.model)?;
    let others = a.compare.iter().map(Pipeline::load).collect::<bkd_core::Result<Vec<_>>>()?;
    let cfg = a.sampler.config(g.seed);
    write_run_record(&g.out, "attribution", g.seed, g.threads, json!({ "model": a.model, "compare": a.compare, "prompts": a.prompt, "sampler": cfg }))?;
    let mut index = Vec::new();
    for (k, prompt) in a.prompt.iter().enumerate() {
        let maps = attribution_maps(&model, prompt, &cfg, a.sampler.image_size)?;
        let files = maps.write(g.out.join(format!("prompt_{k:02}")), "model", a.format.ext())?;
        let mut cosines = Vec::new();
        for (j, other) in others.iter().enumerate() {
            let om = attribution_maps(other, prompt, &cfg, a.sampler.image_size)?;
            om.write(g.out.join(format!("prompt_{k:02}")), &format!("compare{j}"), a.format.ext())?;
            cosines.push(json!({ "model": a.compare[j], "per_token": maps.cosine_to(&om)?, "mean": maps.mean_cosine_to(&om)? }));
        }
        index.push(json!({ "prompt": prompt, "tokens": maps.tokens, "files": files, "cosine": cosines }));
    }
    write_json(&g.out.join("attribution.json"), &json!(index))?;
    println!("wrote attribution maps for {} prompts to {}", a.prompt.len(), g.out.display());
    Ok(())
}
