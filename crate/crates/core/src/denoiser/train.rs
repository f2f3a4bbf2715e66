//! Progressive training: stage 1 fits everything except the cross-view
//! blocks (bypassed); stage 2 fits only the cross-view blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::Codec;
use super::model::{is_sync_param, Branches, Denoiser, MultiViewCond};
use super::{assemble_conditions, encode_video};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, FlowSample};
use crate::grad::{AdamW, LrSchedule, Tape, Tensor};
use crate::harness::SampleData;
use crate::image::RgbImage;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// `[views, f', h, w, C]`.
    pub target: Tensor,
    pub cond: MultiViewCond,
}

/// Encodes one sample: reference video, target videos, and per-view
/// partial/normal renders.
pub fn make_sample(
    codec: &Codec,
    reference: &[RgbImage],
    targets: &[Vec<RgbImage>],
    partial: &[Vec<RgbImage>],
    normal: &[Vec<RgbImage>],
) -> Result<TrainSample> {
    if targets.is_empty() || targets.len() != partial.len() || targets.len() != normal.len() {
        return Err(Error::dim(format!(
            "{} targets, {} partial and {} normal stacks",
            targets.len(),
            partial.len(),
            normal.len()
        )));
    }
    let reference = encode_video(codec, reference)?;
    let lat: Vec<Tensor> = targets.iter().map(|t| encode_video(codec, t)).collect::<Result<_>>()?;
    if let Some(bad) = lat.iter().find(|l| l.shape() != reference.shape()) {
        return Err(Error::dim(format!("target latent {:?} vs reference {:?}", bad.shape(), reference.shape())));
    }
    let m = lat.len();
    let mut shape = vec![m];
    shape.extend_from_slice(reference.shape());
    let target = Tensor::stack_first(&lat)?.reshape(shape)?;
    let conditions = partial.iter().zip(normal).map(|(p, n)| assemble_conditions(codec, p, n)).collect::<Result<_>>()?;
    Ok(TrainSample { target, cond: MultiViewCond { reference, conditions } })
}

/// Encodes a synthetic dataset sample.
pub fn sample_from_data(codec: &Codec, s: &SampleData) -> Result<TrainSample> {
    let frames: Vec<Vec<RgbImage>> = s.views.iter().map(|v| v.frames.clone()).collect();
    let partial: Vec<Vec<RgbImage>> = s.views.iter().map(|v| v.partial.clone()).collect();
    let normal: Vec<Vec<RgbImage>> = s.views.iter().map(|v| v.normal.clone()).collect();
    make_sample(codec, &s.reference.frames, &frames, &partial, &normal)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn branches(self) -> Branches {
        match self {
            Stage::One => Branches::NO_SYNC,
            Stage::Two => Branches::ALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Cosine decay from `lr_start` to `lr_end` within each stage.
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { stage1_steps: 2000, stage2_steps: 500, lr_start: 1e-4, lr_end: 2e-5, weight_decay: 0.0, batch: 1, seed: 0 }
    }
}

impl TrainConfig {
    /// Schedule for the toy set: the same cosine shape at a larger rate,
    /// since 2,000 steps at 1e-4 leave the loss near its noise floor.
    pub fn toy() -> Self {
        Self { lr_start: 3e-3, lr_end: 6e-4, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Per-step training loss.
    pub losses: Vec<f64>,
}

/// Evaluation draws per sample; `t` is stratified over them.
pub const EVAL_DRAWS: usize = 4;

/// Flow-matching loss over the whole set with noise and times fixed by
/// `seed`.
pub fn eval_loss(model: &Denoiser, data: &[TrainSample], branches: Branches, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = model.with_branches(branches);
    let mut total = 0.0;
    for s in data {
        for j in 0..EVAL_DRAWS {
            let x0 = Tensor::randn(s.target.shape().to_vec(), &mut rng);
            let t = (j as f64 + 0.5) / EVAL_DRAWS as f64;
            let fs = FlowSample::new(x0, s.target.clone(), t)?;
            let mut tape = Tape::new();
            let l = fm_loss(&mut tape, &field, &[(fs, &s.cond)])?;
            total += tape.value(l).item();
        }
    }
    Ok(total / (data.len() * EVAL_DRAWS) as f64)
}

/// Runs one stage in place. Trainability flags are restored to all-true
/// afterwards.
pub fn train_stage(model: &mut Denoiser, data: &[TrainSample], stage: Stage, steps: usize, cfg: &TrainConfig) -> Result<StageReport> {
    if data.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let eval_seed = cfg.seed ^ 0x5eed;
    let branches = stage.branches();
    let loss_before = eval_loss(model, data, branches, eval_seed)?;
    match stage {
        Stage::One => model.store.set_trainable_where(|n| !is_sync_param(n)),
        Stage::Two => model.store.set_trainable_where(is_sync_param),
    }
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let sched = LrSchedule { start: cfg.lr_start, end: cfg.lr_end, steps };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(stage as u64 * 0x9e37_79b9));
    let mut losses = Vec::with_capacity(steps);
    let result = (|| {
        for step in 0..steps {
            let batch: Vec<(FlowSample, &MultiViewCond)> = (0..cfg.batch)
                .map(|_| {
                    let s = &data[rng.random_range(0..data.len())];
                    FlowSample::draw(s.target.clone(), &mut rng).map(|f| (f, &s.cond))
                })
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let field = model.with_branches(branches);
            let l = fm_loss(&mut tape, &field, &batch)?;
            let lv = tape.value(l).item();
            if !lv.is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {step}")));
            }
            let grads = tape.backward(l)?.param_grads(&model.store);
            drop(tape);
            opt.step(&mut model.store, &grads, sched.at(step));
            losses.push(lv);
        }
        Ok(())
    })();
    model.store.set_trainable_where(|_| true);
    result?;
    let loss_after = eval_loss(model, data, branches, eval_seed)?;
    Ok(StageReport { stage, steps, loss_before, loss_after, losses })
}

pub fn train_two_stage(model: &mut Denoiser, data: &[TrainSample], cfg: &TrainConfig) -> Result<(StageReport, StageReport)> {
    let one = train_stage(model, data, Stage::One, cfg.stage1_steps, cfg)?;
    let two = train_stage(model, data, Stage::Two, cfg.stage2_steps, cfg)?;
    Ok((one, two))
}
