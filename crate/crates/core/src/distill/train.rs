//! Teacher training and student distillation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{InitMode, TrainConfig};
use super::eval::{evaluate, EvalMetrics, EvalSet};
use super::log::{LogRow, TrainLog};
use super::optim::AdamW;
use super::pipeline::Pipeline;
use crate::archive::Archive;
use crate::compression::{apply_plan, inherit_weights, CompressionPlan};
use crate::config::UNetConfig;
use crate::data::Dataset;
use crate::diffusion::{
    feature_kd_loss, forward_diffuse, output_kd_loss, task_loss, total_loss, weighted_total, LossBreakdown, LossWeights,
};
use crate::error::{Error, Result};
use crate::ops::scalar_f64;
use crate::text::Condition;
use crate::unet::{Context, UNet};

pub const OPTIMIZER_FILE: &str = "optimizer.tensors";
pub const TRAINER_FILE: &str = "trainer.json";

/// One micro-batch: clean latents, noise, timesteps and captions
/// (`None` = dropped to the null condition).
#[derive(Debug, Clone)]
pub struct MicroBatch {
    pub iteration: usize,
    pub micro: usize,
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: Vec<u32>,
    pub tokens: Vec<Option<Vec<u32>>>,
}

/// Draws micro-batch `micro` of `iteration`. The RNG stream depends only on
/// `(seed, iteration, micro)`, so batches can be produced in any order.
pub fn micro_batch(data: &Dataset, tc: &TrainConfig, iteration: usize, micro: usize, like: &Tensor) -> Result<MicroBatch> {
    let train = data.train_indices();
    if train.is_empty() {
        return Err(Error::Domain("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream((iteration * tc.grad_accum_steps + micro) as u64);
    let indices: Vec<usize> = (0..tc.batch_size).map(|_| rng.random_range(train.clone())).collect();
    let flips: Vec<bool> = (0..tc.batch_size).map(|_| tc.random_flip && rng.random_bool(0.5)).collect();
    let z0 = data.batch(&indices, &flips, like.device(), like.dtype())?;
    let t = (0..tc.batch_size).map(|_| rng.random_range(1..=tc.schedule_steps as u32)).collect();
    let noise: Vec<f32> = (0..z0.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::from_vec(noise, z0.dims(), like.device())?.to_dtype(like.dtype())?;
    let tokens = indices
        .iter()
        .map(|&i| (!rng.random_bool(tc.cond_dropout)).then(|| data.records[i].tokens.clone()))
        .collect();
    Ok(MicroBatch { iteration, micro, z0, eps, t, tokens })
}

/// Differentiable total loss and its logged parts for one micro-batch.
/// `teacher: None` leaves only the task term; teacher outputs never carry
/// gradients.
pub fn distill_loss(
    student: &UNet,
    teacher: Option<&UNet>,
    ctx: &Context,
    z_t: &Tensor,
    t: &[u32],
    eps: &Tensor,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let (eps_s, taps_s) = student.forward(z_t, t, ctx)?;
    let task = task_loss(eps, &eps_s)?;
    let Some(teacher) = teacher else {
        let v = scalar_f64(&task)?;
        return Ok((task, total_loss(v, 0.0, 0.0, &LossWeights::NONE)));
    };
    let (eps_t, taps_t) = teacher.forward(&z_t.detach(), t, &ctx.detach())?;
    let (eps_t, taps_t) = (eps_t.detach(), taps_t.detach());
    let out = output_kd_loss(&eps_t, &eps_s)?;
    let feat = if weights.lambda_feat != 0.0 {
        Some(feature_kd_loss(&taps_t, &taps_s)?)
    } else if !taps_s.is_empty() {
        Some(feature_kd_loss(&taps_t, &taps_s.detach())?)
    } else {
        None
    };
    let total = weighted_total(&task, Some(&out), feat.as_ref(), weights)?;
    let feat_v = match &feat {
        Some(f) => scalar_f64(f)?,
        None => 0.0,
    };
    let parts = total_loss(scalar_f64(&task)?, scalar_f64(&out)?, feat_v, weights);
    Ok((total, parts))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    iteration: usize,
    optimizer_steps: u64,
    train_text: bool,
    wall_time: f64,
    log: TrainLog,
}

/// A resumable training run. The trained model is `model`; `teacher`, when
/// present, is only read.
pub struct TrainSession<'t> {
    pub model: Pipeline,
    pub tc: TrainConfig,
    pub log: TrainLog,
    teacher: Option<&'t Pipeline>,
    train_text: bool,
    opt: AdamW,
    iteration: usize,
    eval: EvalSet,
    wall_offset: f64,
    started: Instant,
}

fn trainable(model: &Pipeline, train_text: bool) -> Vec<(String, Var)> {
    let mut out: Vec<(String, Var)> = model.unet.params().iter().map(|(k, v)| (format!("unet.{k}"), v.clone())).collect();
    if train_text {
        out.extend(model.text.params().iter().map(|(k, v)| (format!("text.{k}"), v.clone())));
    }
    out
}

impl<'t> TrainSession<'t> {
    fn new(model: Pipeline, teacher: Option<&'t Pipeline>, train_text: bool, data: &Dataset, tc: TrainConfig) -> Result<Self> {
        tc.validate()?;
        if data.is_empty() || data.train_indices().is_empty() {
            return Err(Error::Domain("cannot train on an empty dataset".into()));
        }
        if model.schedule.len() != tc.schedule_steps {
            return Err(Error::config(format!(
                "schedule has {} steps, training config says {}",
                model.schedule.len(),
                tc.schedule_steps
            )));
        }
        let eval = EvalSet::from_dataset(data, tc.eval_size, tc.eval_seed, &model.schedule, &model)?;
        let opt = AdamW::new(tc.learning_rate, tc.weight_decay);
        Ok(Self {
            model,
            teacher,
            train_text,
            opt,
            log: TrainLog::default(),
            iteration: 0,
            eval,
            wall_offset: 0.0,
            started: Instant::now(),
            tc,
        })
    }

    /// Trains U-Net and text encoder from scratch with the task loss.
    pub fn for_teacher(config: &UNetConfig, data: &Dataset, tc: TrainConfig) -> Result<Self> {
        let schedule = super::pipeline::ScheduleSpec::linear(tc.schedule_steps).build()?;
        let model = Pipeline::new(config, data.manifest.vocabulary.clone(), schedule, data.manifest.codec, tc.seed)?;
        Self::new(model, None, true, data, tc)
    }

    /// Builds the student of `plan` and distils it from `teacher`. The text
    /// encoder is the teacher's and stays frozen.
    pub fn for_student(teacher: &'t Pipeline, plan: &CompressionPlan, data: &Dataset, tc: TrainConfig) -> Result<Self> {
        plan.validate_for(teacher.unet.config())?;
        let (cfg, map) = apply_plan(teacher.unet.config(), plan)?;
        let unet = UNet::build_on(&cfg, tc.seed, teacher.unet.device(), teacher.unet.dtype())?
            .with_max_timestep(teacher.unet.max_timestep());
        if tc.init_mode == InitMode::Teacher {
            inherit_weights(&teacher.unet, &unet, &map)?;
        }
        Self::new(teacher.with_unet(unet), Some(teacher), false, data, tc)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn evaluate(&self) -> Result<EvalMetrics> {
        evaluate(&self.model, self.teacher, &self.eval)
    }

    fn context(&self, tokens: &[Option<Vec<u32>>]) -> Result<Context> {
        let conds = tokens
            .iter()
            .map(|t| match t {
                Some(t) => self.model.text.condition(t),
                None => self.model.text.null_condition(),
            })
            .collect::<Result<Vec<Condition>>>()?;
        let ctx = Condition::stack(&conds)?;
        Ok(if self.train_text { ctx } else { ctx.detach() })
    }

    fn micro_loss(&self, batch: &MicroBatch) -> Result<(Tensor, LossBreakdown)> {
        let ctx = self.context(&batch.tokens)?;
        let z_t = forward_diffuse(&batch.z0, &batch.eps, &batch.t, &self.model.schedule)?;
        let teacher = self.teacher.filter(|_| self.tc.kd_enabled).map(|p| &p.unet);
        let (loss, parts) = distill_loss(&self.model.unet, teacher, &ctx, &z_t, &batch.t, &batch.eps, &self.tc.effective_weights())?;
        if !parts.total.is_finite() {
            return Err(Error::Numerical { iteration: batch.iteration, what: format!("loss {:?}", parts) });
        }
        Ok((loss, parts))
    }

    /// Averages parts over micro-batches and recomputes the total from them.
    fn mean_parts(parts: &[LossBreakdown], w: &LossWeights) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        total_loss(avg(|p| p.task), avg(|p| p.out_kd), avg(|p| p.feat_kd), w)
    }

    fn update(&mut self, batches: &mut dyn FnMut(usize, usize) -> Result<MicroBatch>) -> Result<LossBreakdown> {
        let params = trainable(&self.model, self.train_text);
        let accum = self.tc.grad_accum_steps;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut parts = Vec::with_capacity(accum);
        for micro in 0..accum {
            let batch = batches(self.iteration, micro)?;
            let (loss, p) = self.micro_loss(&batch)?;
            parts.push(p);
            let store = (loss / accum as f64)?.backward()?;
            for (name, var) in &params {
                if let Some(g) = store.get(var.as_tensor()) {
                    let g = match grads.remove(name) {
                        Some(acc) => (acc + g)?,
                        None => g.clone(),
                    };
                    grads.insert(name.clone(), g);
                }
            }
        }
        for (name, g) in &grads {
            if !scalar_f64(&g.sqr()?.sum_all()?)?.is_finite() {
                return Err(Error::Numerical { iteration: self.iteration, what: format!("gradient of {name}") });
            }
        }
        self.opt.step(&params, &grads)?;
        self.iteration += 1;
        Ok(Self::mean_parts(&parts, &self.tc.effective_weights()))
    }

    fn wall_time(&self) -> f64 {
        self.wall_offset + self.started.elapsed().as_secs_f64()
    }

    fn record(&mut self, parts: LossBreakdown) -> Result<()> {
        let m = self.evaluate()?;
        let row = LogRow {
            iteration: self.iteration,
            task: parts.task,
            out_kd: parts.out_kd,
            feat_kd: parts.feat_kd,
            total: parts.total,
            eval_teacher_mse: m.teacher_mse,
            eval_denoise_loss: m.denoise_loss,
            wall_time: self.wall_time(),
        };
        log::info!(
            "iter {:>6}  loss {:.5} (task {:.5} out {:.5} feat {:.5})  eval {:.5}{}",
            row.iteration,
            row.total,
            row.task,
            row.out_kd,
            row.feat_kd,
            row.eval_denoise_loss,
            row.eval_teacher_mse.map(|v| format!("  teacher mse {v:.5}")).unwrap_or_default()
        );
        self.log.push(row)
    }

    fn is_eval_point(&self) -> bool {
        self.iteration == self.tc.iterations || (self.tc.eval_every > 0 && self.iteration % self.tc.eval_every == 0)
    }

    fn run_with(&mut self, batches: &mut dyn FnMut(usize, usize) -> Result<MicroBatch>) -> Result<()> {
        if self.log.is_empty() {
            let parts = (0..self.tc.grad_accum_steps)
                .map(|micro| self.micro_loss(&batches(0, micro)?).map(|(_, p)| p))
                .collect::<Result<Vec<_>>>()?;
            self.record(Self::mean_parts(&parts, &self.tc.effective_weights()))?;
        }
        while self.iteration < self.tc.iterations {
            let parts = self.update(batches)?;
            if self.is_eval_point() {
                self.record(parts)?;
            }
            if let Some(dir) = self.tc.checkpoint_dir.clone() {
                let periodic = self.tc.checkpoint_every > 0 && self.iteration % self.tc.checkpoint_every == 0;
                if periodic && self.iteration < self.tc.iterations {
                    self.save_checkpoint(&dir)?;
                }
            }
        }
        if let Some(dir) = self.tc.checkpoint_dir.clone() {
            self.save_checkpoint(&dir)?;
        }
        Ok(())
    }

    /// Trains until `tc.iterations`, logging at eval points.
    pub fn run(&mut self, data: &Dataset) -> Result<()> {
        let like = self.eval.z_t.clone();
        if self.tc.prefetch == 0 {
            let tc = self.tc.clone();
            return self.run_with(&mut |it, micro| micro_batch(data, &tc, it, micro, &like));
        }
        // Batches are keyed by (iteration, micro), so running the loader ahead
        // does not change what the model sees.
        let tc = self.tc.clone();
        let (start, end) = (if self.log.is_empty() { 0 } else { self.iteration }, self.tc.iterations);
        std::thread::scope(|s| {
            let (tx, rx) = sync_channel::<Result<MicroBatch>>(tc.prefetch);
            let (tc_ref, like_ref) = (&tc, &like);
            s.spawn(move || {
                let mut keys: Vec<(usize, usize)> = Vec::new();
                if start == 0 {
                    keys.extend((0..tc_ref.grad_accum_steps).map(|m| (0, m)));
                }
                for it in start..end {
                    keys.extend((0..tc_ref.grad_accum_steps).map(|m| (it, m)));
                }
                for (it, m) in keys {
                    if tx.send(micro_batch(data, tc_ref, it, m, like_ref)).is_err() {
                        break;
                    }
                }
            });
            self.run_with(&mut |it, micro| {
                let b = rx.recv().map_err(|_| Error::Domain("batch loader stopped".into()))??;
                if (b.iteration, b.micro) != (it, micro) {
                    return Err(Error::Domain(format!("loader out of order: {:?} vs {:?}", (b.iteration, b.micro), (it, micro))));
                }
                Ok(b)
            })
        })
    }

    /// Model, optimizer state and progress, enough to resume bit-exactly.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.model.save(dir)?;
        self.opt.state()?.write(dir.join(OPTIMIZER_FILE))?;
        let state = TrainerState {
            config: self.tc.clone(),
            iteration: self.iteration,
            optimizer_steps: self.opt.steps_taken(),
            train_text: self.train_text,
            wall_time: self.wall_time(),
            log: self.log.clone(),
        };
        std::fs::write(dir.join(TRAINER_FILE), serde_json::to_string_pretty(&state)?)?;
        self.log.write(dir)
    }

    /// Reopens a checkpoint. Students need their teacher again.
    pub fn resume(dir: impl AsRef<Path>, data: &Dataset, teacher: Option<&'t Pipeline>) -> Result<Self> {
        let dir = dir.as_ref();
        let state: TrainerState = serde_json::from_str(&std::fs::read_to_string(dir.join(TRAINER_FILE))?)?;
        let model = Pipeline::load(dir)?;
        let mut session = Self::new(model, teacher, state.train_text, data, state.config)?;
        let params = trainable(&session.model, session.train_text);
        session.opt.load_state(&Archive::read(dir.join(OPTIMIZER_FILE))?, state.optimizer_steps, &params)?;
        session.iteration = state.iteration;
        session.log = state.log;
        session.wall_offset = state.wall_time;
        Ok(session)
    }

    pub fn finish(self) -> (Pipeline, TrainLog) {
        (self.model, self.log)
    }
}

/// Trains a teacher with the task loss only.
pub fn train_teacher(config: &UNetConfig, data: &Dataset, tc: &TrainConfig) -> Result<(Pipeline, TrainLog)> {
    let mut s = TrainSession::for_teacher(config, data, tc.clone())?;
    s.run(data)?;
    Ok(s.finish())
}

/// Compresses `teacher` with `plan` and retrains the student.
pub fn distill_student(teacher: &Pipeline, plan: &CompressionPlan, data: &Dataset, tc: &TrainConfig) -> Result<(Pipeline, TrainLog)> {
    let mut s = TrainSession::for_student(teacher, plan, data, tc.clone())?;
    s.run(data)?;
    Ok(s.finish())
}
