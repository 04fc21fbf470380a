use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FrameInput, StepInput, TrackerModel};
use crate::backbone::{AttentionPath, PassOptions};
use crate::error::{Error, Result};
use crate::geometry::{crop_with_area_factor, BBox, GrayImage};
use crate::guidance::{flow_code, momentum_code, PriorMode};
use crate::numerics::{GradMode, ParamId, ParamStore, Tape, Tensor};
use crate::simworld::{generate, Scenario};

pub const LOG_HEADER: &str =
    "epoch,loss_bce,loss_giou,loss_total,mean_gate_clean,mean_gate_corrupt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub clips_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Linear learning-rate ramp over this many epochs.
    pub warmup_epochs: usize,
    /// Global gradient-norm cap; 0 disables it.
    pub clip_norm: f64,
    /// Search-center jitter as a fraction of the target size.
    pub search_jitter: f64,
    /// Jitter of clean reference boxes as a fraction of the target size.
    pub reference_jitter: f64,
    /// Learning-rate multiplier for the reliability gate parameters.
    pub gate_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            clips_per_epoch: 128,
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.9,
            warmup_epochs: 2,
            clip_norm: 5.0,
            search_jitter: 0.25,
            reference_jitter: 0.05,
            gate_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0)
            || !(self.gate_lr_scale > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
            || self.clip_norm < 0.0
        {
            return Err(Error::Config(format!(
                "lr {}, momentum {}, clip_norm {}",
                self.lr, self.momentum, self.clip_norm
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_bce: f64,
    pub loss_giou: f64,
    pub loss_total: f64,
    /// Mean reference score; NaN when no such reference was seen.
    pub mean_gate_clean: f64,
    pub mean_gate_corrupt: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                e.epoch,
                e.loss_bce,
                e.loss_giou,
                e.loss_total,
                e.mean_gate_clean,
                e.mean_gate_corrupt
            );
        }
        s
    }
}

/// One training example: a five-frame clip cut from a synthetic sequence.
#[derive(Clone, Debug)]
pub struct Sample {
    pub template: FrameInput,
    pub references: Vec<FrameInput>,
    pub corrupted: Vec<bool>,
    pub search: GrayImage,
    /// Ground truth in search-crop pixels.
    pub target: BBox,
    pub momentum: [f64; 4],
    pub flow: Option<Tensor>,
}

fn jitter<R: Rng>(b: &BBox, frac: f64, rng: &mut R) -> BBox {
    if frac == 0.0 {
        return *b;
    }
    let (cx, cy) = b.center();
    let s = 1.0 + rng.gen_range(-frac..frac);
    BBox::from_center(
        cx + rng.gen_range(-frac..frac) * b.w,
        cy + rng.gen_range(-frac..frac) * b.h,
        b.w * s,
        b.h * s,
    )
}

/// Draws a clip: template from frame 0, references from the frames before
/// `t` (corrupted ones recorded at their injected box), search at `t` around
/// the jittered box recorded for `t − 1`, as a tracker would see it.
pub fn sample<R: Rng>(model: &TrackerModel, cfg: &TrainConfig, rng: &mut R) -> Result<Sample> {
    let mc = &model.config;
    let bb = &mc.backbone;
    let scenario = Scenario::preset("training", rng.gen())?;
    let seq = generate(&scenario)?;
    let t = rng.gen_range(4..seq.len());
    let (template, _) = FrameInput::around(
        &seq.frames[0],
        &seq.boxes[0],
        mc.template_factor,
        bb.template_size,
        bb.patch_size,
    )?;
    let recorded = |f: usize, rng: &mut R| match seq.injected[f] {
        Some(b) => (b, true),
        None => (jitter(&seq.boxes[f], cfg.reference_jitter, rng), false),
    };
    let mut references = Vec::with_capacity(mc.num_references);
    let mut corrupted = Vec::with_capacity(mc.num_references);
    let mut boxes = Vec::new();
    let mut crops = Vec::new();
    for back in 1..=mc.num_references.max(2) {
        let f = t - back;
        let (b, c) = recorded(f, rng);
        let (frame, _) = FrameInput::around(
            &seq.frames[f],
            &b,
            mc.template_factor,
            bb.template_size,
            bb.patch_size,
        )?;
        boxes.push(b);
        crops.push(frame.clone());
        if back <= mc.num_references {
            references.push(frame);
            corrupted.push(c);
        }
    }
    let center = jitter(&boxes[0], cfg.search_jitter, rng);
    let search = crop_with_area_factor(&seq.frames[t], &center, mc.search_factor, bb.search_size)?;
    let target = search.transform.to_crop(&seq.boxes[t]);
    let momentum = momentum_code(&boxes[1], &boxes[0], &search.transform);
    let mode = model.bank.as_ref().map(|b| b.config.mode);
    let flow = match mode {
        Some(PriorMode::Flow) => Some(flow_code(&crops[1].image, &crops[0].image, bb.patch_size)?),
        _ => None,
    };
    Ok(Sample {
        template,
        references,
        corrupted,
        search: search.image,
        target,
        momentum,
        flow,
    })
}

impl Sample {
    pub fn input(&self) -> StepInput<'_> {
        StepInput {
            template: &self.template,
            references: self.references.iter().collect(),
            search: &self.search,
            gate_override: [None; 3],
            momentum: Some(self.momentum),
            flow: self.flow.clone(),
        }
    }
}

/// Loss terms and scores of one sample; gradients go into `store`.
pub struct SampleLoss {
    pub bce: f64,
    pub giou: f64,
    pub total: f64,
    pub scores: [f64; 4],
}

pub fn sample_loss(
    model: &TrackerModel,
    store: &mut ParamStore,
    s: &Sample,
    backward: bool,
) -> Result<SampleLoss> {
    let mode = if backward {
        GradMode::Trainable
    } else {
        GradMode::Off
    };
    let mut tape = Tape::with_mode(mode);
    let mut opts = PassOptions {
        path: AttentionPath::Chunked,
        drop_rng: None,
    };
    let out = model.forward(&mut tape, store, &s.input(), &mut opts)?;
    let (loss, bce, giou) = model.loss(&mut tape, &out, &s.target)?;
    let total = tape.value(loss).item();
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total}")));
    }
    if backward {
        tape.backward(loss, store)?;
    }
    Ok(SampleLoss {
        bce,
        giou,
        total,
        scores: out.scores,
    })
}

struct Sgd {
    /// Parameter, its lr multiplier and its velocity.
    velocity: Vec<(ParamId, f64, Vec<f64>)>,
}

impl Sgd {
    fn new(store: &ParamStore, gate_lr_scale: f64) -> Self {
        let velocity = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let mult = if p.name.starts_with(GATE_PREFIX) {
                    gate_lr_scale
                } else {
                    1.0
                };
                (id, mult, vec![0.0; p.value.len()])
            })
            .collect();
        Self { velocity }
    }

    fn step(&mut self, store: &mut ParamStore, lr: f64, momentum: f64, scale: f64, clip_norm: f64) {
        let mut scale = scale;
        if clip_norm > 0.0 {
            let norm = self
                .velocity
                .iter()
                .map(|(id, _, _)| {
                    store
                        .get(*id)
                        .grad
                        .data()
                        .iter()
                        .map(|g| (g * scale).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                .sqrt();
            if norm > clip_norm {
                scale *= clip_norm / norm;
            }
        }
        for (id, mult, v) in &mut self.velocity {
            let lr = lr * *mult;
            let p = store.get_mut(*id);
            let grad = p.grad.data().to_vec();
            for ((w, vel), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = momentum * *vel + g * scale;
                *w -= lr * *vel;
            }
        }
    }
}

const GATE_PREFIX: &str = "calibrator.";

fn mean_or_nan(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// SGD with momentum over freshly drawn clips; fully determined by `seed`.
pub fn train(
    model: &TrackerModel,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut sgd = Sgd::new(store, cfg.gate_lr_scale);
    let steps_per_epoch = cfg.clips_per_epoch.div_ceil(cfg.batch_size).max(1);
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut global_step = 0;
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        let (mut bce, mut giou, mut total) = (0.0, 0.0, 0.0);
        let (mut clean, mut corrupt) = (Vec::new(), Vec::new());
        let mut done = 0;
        while done < cfg.clips_per_epoch {
            let n = cfg.batch_size.min(cfg.clips_per_epoch - done);
            store.zero_grad();
            for _ in 0..n {
                let s = sample(model, cfg, &mut rng)?;
                let l = sample_loss(model, store, &s, true)?;
                bce += l.bce;
                giou += l.giou;
                total += l.total;
                for (i, c) in s.corrupted.iter().enumerate() {
                    if *c {
                        corrupt.push(l.scores[i + 1]);
                    } else {
                        clean.push(l.scores[i + 1]);
                    }
                }
            }
            global_step += 1;
            let ramp = if warmup_steps == 0 {
                1.0
            } else {
                (global_step as f64 / warmup_steps as f64).min(1.0)
            };
            sgd.step(
                store,
                cfg.lr * ramp,
                cfg.momentum,
                1.0 / n as f64,
                cfg.clip_norm,
            );
            done += n;
        }
        let m = cfg.clips_per_epoch.max(1) as f64;
        report.epochs.push(EpochLog {
            epoch,
            loss_bce: bce / m,
            loss_giou: giou / m,
            loss_total: total / m,
            mean_gate_clean: mean_or_nan(&clean),
            mean_gate_corrupt: mean_or_nan(&corrupt),
        });
    }
    store.zero_grad();
    Ok(report)
}
