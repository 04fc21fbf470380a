//! Synthetic tracking sequences with scheduled drift events, and metrics.
//!
//! Every pixel is a pure function of `(seed, frame index, scenario)`. Event
//! content is drawn from its own random streams so frames outside every event
//! span match the event-free sequence exactly.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, GrayImage};

pub const DUMP_MAGIC: &[u8; 4] = b"PTSQ";
const TEXTURE_CELLS: usize = 6;
const OCCLUDER_LEVEL: f64 = 0.5;
/// Mostly bright targets over a darker background, so a target region and a
/// background region differ in mean intensity.
const TEXTURE_BRIGHT: f64 = 0.75;
const BACKGROUND_LEVEL: f64 = 0.3;

const STREAM_SCENE: u64 = 0;
const STREAM_NOISE: u64 = 1 << 32;
const STREAM_EVENT: u64 = 2 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Occlusion,
    Distractor,
    Corruption,
    AppearanceShift,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [
        EventKind::Occlusion,
        EventKind::Distractor,
        EventKind::Corruption,
        EventKind::AppearanceShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Occlusion => "occlusion",
            EventKind::Distractor => "distractor",
            EventKind::Corruption => "corruption",
            EventKind::AppearanceShift => "appearance",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inclusive frame span.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventSpan {
    pub kind: EventKind,
    pub start: usize,
    pub end: usize,
}

impl EventSpan {
    pub fn new(kind: EventKind, start: usize, end: usize) -> Self {
        Self { kind, start, end }
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub target_w: f64,
    pub target_h: f64,
    /// Top-left corner of the target in frame 0.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub events: Vec<EventSpan>,
}

/// Preset names accepted by [`Scenario::preset`].
pub const PRESETS: [&str; 8] = [
    "static",
    "linear",
    "occlusion",
    "distractor",
    "corruption",
    "appearance",
    "mixed",
    "training",
];

impl Scenario {
    /// A plain moving target; all geometry drawn from `seed`.
    pub fn linear(seed: u64) -> Self {
        let mut rng = stream(seed, STREAM_SCENE + 1);
        let (width, height) = (64, 64);
        let target_w = rng.gen_range(10.0..14.0);
        let target_h = rng.gen_range(10.0..14.0);
        let start = (
            rng.gen_range(8.0..(width as f64 - 8.0 - target_w)),
            rng.gen_range(8.0..(height as f64 - 8.0 - target_h)),
        );
        let velocity = (rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2));
        Self {
            name: "linear".into(),
            seed,
            width,
            height,
            length: 40,
            target_w,
            target_h,
            start,
            velocity,
            events: Vec::new(),
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let mut s = Self::linear(seed);
        s.name = name.to_string();
        let ev = EventSpan::new;
        match name {
            "linear" => {}
            "static" => s.velocity = (0.0, 0.0),
            "occlusion" => s.events = vec![ev(EventKind::Occlusion, 10, 15)],
            "distractor" => s.events = vec![ev(EventKind::Distractor, 12, 20)],
            "corruption" => {
                s.events = vec![
                    ev(EventKind::Corruption, 8, 11),
                    ev(EventKind::Corruption, 20, 23),
                    ev(EventKind::Corruption, 30, 32),
                ]
            }
            "appearance" => s.events = vec![ev(EventKind::AppearanceShift, 15, 25)],
            "mixed" => {
                s.events = vec![
                    ev(EventKind::Corruption, 6, 8),
                    ev(EventKind::Occlusion, 12, 14),
                    ev(EventKind::Distractor, 18, 24),
                    ev(EventKind::AppearanceShift, 28, 33),
                    ev(EventKind::Corruption, 35, 37),
                ]
            }
            "training" => {
                // Short clips with frequent corruption, drawn per seed.
                let mut rng = stream(seed, STREAM_SCENE + 2);
                s.length = 12;
                let mut f = rng.gen_range(0..3);
                while f < s.length {
                    let len = rng.gen_range(1..3);
                    s.events.push(ev(
                        EventKind::Corruption,
                        f,
                        (f + len - 1).min(s.length - 1),
                    ));
                    f += len + rng.gen_range(1..4);
                }
            }
            other => return Err(Error::Config(format!("unknown scenario '{other}'"))),
        }
        s.validate()?;
        Ok(s)
    }

    pub fn without_events(&self) -> Self {
        Self {
            events: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("scenario length must be positive".into()));
        }
        if !(self.target_w > 0.0 && self.target_h > 0.0)
            || self.target_w >= self.width as f64
            || self.target_h >= self.height as f64
        {
            return Err(Error::Config(format!(
                "target {}x{} does not fit a {}x{} canvas",
                self.target_w, self.target_h, self.width, self.height
            )));
        }
        for e in &self.events {
            if e.start > e.end || e.end >= self.length {
                return Err(Error::Config(format!(
                    "{} span [{}, {}] outside 0..{}",
                    e.kind, e.start, e.end, self.length
                )));
            }
        }
        Ok(())
    }

    pub fn active(&self, frame: usize) -> Vec<EventKind> {
        let mut out: Vec<EventKind> = self
            .events
            .iter()
            .filter(|e| e.contains(frame))
            .map(|e| e.kind)
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<GrayImage>,
    pub boxes: Vec<BBox>,
    /// Events active in each frame.
    pub active: Vec<Vec<EventKind>>,
    /// For corrupted frames: the jittered box a tracker history should record.
    pub injected: Vec<Option<BBox>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Scene {
    waves: Vec<(f64, f64, f64, f64)>,
    texture: Vec<f64>,
}

impl Scene {
    fn new(seed: u64) -> Self {
        let mut rng = stream(seed, STREAM_SCENE);
        let waves = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.03..0.08),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let texture = (0..TEXTURE_CELLS * TEXTURE_CELLS)
            .map(|_| {
                if rng.gen_bool(TEXTURE_BRIGHT) {
                    rng.gen_range(0.75..0.95)
                } else {
                    rng.gen_range(0.05..0.25)
                }
            })
            .collect();
        Self { waves, texture }
    }

    fn background(&self, x: usize, y: usize) -> f64 {
        let (xf, yf) = (x as f64, y as f64);
        BACKGROUND_LEVEL
            + self
                .waves
                .iter()
                .map(|(a, fx, fy, ph)| a * (fx * xf + fy * yf + ph).sin())
                .sum::<f64>()
    }
}

/// Target top-left corners with reflection at the canvas borders.
pub fn trajectory(s: &Scenario) -> Vec<BBox> {
    let (mut x, mut y) = s.start;
    let (mut vx, mut vy) = s.velocity;
    let max_x = s.width as f64 - s.target_w;
    let max_y = s.height as f64 - s.target_h;
    let mut out = Vec::with_capacity(s.length);
    for _ in 0..s.length {
        out.push(BBox::new(x, y, s.target_w, s.target_h));
        x += vx;
        y += vy;
        if x < 0.0 {
            x = -x;
            vx = -vx;
        }
        if x > max_x {
            x = 2.0 * max_x - x;
            vx = -vx;
        }
        if y < 0.0 {
            y = -y;
            vy = -vy;
        }
        if y > max_y {
            y = 2.0 * max_y - y;
            vy = -vy;
        }
        x = x.clamp(0.0, max_x);
        y = y.clamp(0.0, max_y);
    }
    out
}

/// Pixels whose centers fall inside `b`, clipped to the canvas.
fn covered(b: &BBox, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let x0 = (b.x - 0.5).ceil().max(0.0) as usize;
    let y0 = (b.y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((b.x + b.w - 0.5).ceil().max(0.0) as usize).min(width);
    let y1 = ((b.y + b.h - 0.5).ceil().max(0.0) as usize).min(height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

fn paint(image: &mut GrayImage, b: &BBox, texture: &[f64]) {
    let (w, h) = (image.width(), image.height());
    for (x, y) in covered(b, w, h) {
        let u = (((x as f64 + 0.5 - b.x) / b.w) * TEXTURE_CELLS as f64) as usize;
        let v = (((y as f64 + 0.5 - b.y) / b.h) * TEXTURE_CELLS as f64) as usize;
        let idx = v.min(TEXTURE_CELLS - 1) * TEXTURE_CELLS + u.min(TEXTURE_CELLS - 1);
        image.set(x, y, texture[idx]);
    }
}

fn event_rng(seed: u64, frame: usize, kind: EventKind) -> ChaCha8Rng {
    stream(seed, STREAM_EVENT + frame as u64 * 8 + kind as u64)
}

pub fn generate(s: &Scenario) -> Result<Sequence> {
    s.validate()?;
    let scene = Scene::new(s.seed);
    let boxes = trajectory(s);
    let mut frames = Vec::with_capacity(s.length);
    let mut active = Vec::with_capacity(s.length);
    let mut injected = Vec::with_capacity(s.length);
    for (t, gt) in boxes.iter().enumerate() {
        let mut noise = stream(s.seed, STREAM_NOISE + t as u64);
        let mut image = GrayImage::from_fn(s.width, s.height, |x, y| scene.background(x, y));
        for v in image.data_mut() {
            *v += noise.gen_range(-0.03..0.03);
        }
        let events = s.active(t);
        let mut texture = scene.texture.clone();
        if events.contains(&EventKind::AppearanceShift) {
            texture.iter_mut().for_each(|v| *v = 1.0 - *v);
        }
        let mut jitter = None;
        if events.contains(&EventKind::Corruption) {
            let mut rng = event_rng(s.seed, t, EventKind::Corruption);
            texture.shuffle(&mut rng);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = rng.gen_range(0.6..1.0);
            let (dx, dy) = (angle.cos() * dist * gt.w, angle.sin() * dist * gt.h);
            let j = gt.translate(dx, dy);
            let x = j.x.clamp(0.0, s.width as f64 - j.w);
            let y = j.y.clamp(0.0, s.height as f64 - j.h);
            jitter = Some(BBox::new(x, y, j.w, j.h));
        }
        paint(&mut image, gt, &texture);
        if events.contains(&EventKind::Distractor) {
            let span = s
                .events
                .iter()
                .find(|e| e.kind == EventKind::Distractor && e.contains(t))
                .expect("active span");
            let mut rng = event_rng(s.seed, span.start, EventKind::Distractor);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let reach = 1.5;
            let len = (span.end - span.start).max(1) as f64;
            let f = (t - span.start) as f64 / len;
            let k = reach * (2.0 * f - 1.0);
            let d = gt.translate(angle.cos() * k * gt.w, angle.sin() * k * gt.h);
            paint(&mut image, &d, &scene.texture);
        }
        if events.contains(&EventKind::Occlusion) {
            for (x, y) in covered(gt, s.width, s.height).collect::<Vec<_>>() {
                image.set(x, y, OCCLUDER_LEVEL);
            }
        }
        frames.push(image);
        active.push(events);
        injected.push(jitter);
    }
    Ok(Sequence {
        frames,
        boxes,
        active,
        injected,
    })
}

/// Writes the frames as 8-bit grayscale behind a `PTSQ` header.
pub fn dump<W: Write>(seq: &Sequence, mut out: W) -> Result<()> {
    let (w, h) = seq
        .frames
        .first()
        .map_or((0, 0), |f| (f.width(), f.height()));
    out.write_all(DUMP_MAGIC)?;
    for v in [w as u32, h as u32, seq.frames.len() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for f in &seq.frames {
        let bytes: Vec<u8> = f
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn dump_to_path(seq: &Sequence, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    dump(seq, std::io::BufWriter::new(file))
}

/// Reads a dump back as `(width, height, frames)`.
pub fn read_dump<R: Read>(mut input: R) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Parse(format!("bad sequence magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    let mut next = |input: &mut R| -> Result<usize> {
        input.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word) as usize)
    };
    let (w, h, n) = (next(&mut input)?, next(&mut input)?, next(&mut input)?);
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let mut buf = vec![0u8; w * h];
        input.read_exact(&mut buf)?;
        frames.push(buf);
    }
    Ok((w, h, frames))
}

pub const IOU_FAILURE: f64 = 0.1;
pub const AUC_THRESHOLDS: usize = 21;

#[derive(Clone, Debug, PartialEq)]
pub struct EventBreakdown {
    /// `None` for frames without any event.
    pub kind: Option<EventKind>,
    pub frames: usize,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub mean_iou: f64,
    /// Fraction of frames with IoU above 0.5.
    pub success_50: f64,
    /// Mean success rate over thresholds 0, 0.05, .., 1.
    pub auc: f64,
    /// Fraction of failed frames (IoU < 0.1) from the first failure onward.
    pub drift_rate: f64,
    pub per_event: Vec<EventBreakdown>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s += &format!("frames,{}\n", self.frames);
        s += &format!("mean_iou,{:.6}\n", self.mean_iou);
        s += &format!("sr_0.5,{:.6}\n", self.success_50);
        s += &format!("auc,{:.6}\n", self.auc);
        s += &format!("dre,{:.6}\n", self.drift_rate);
        for e in &self.per_event {
            let name = e.kind.map_or("none", EventKind::name);
            s += &format!("iou_{name},{:.6}\n", e.mean_iou);
            s += &format!("frames_{name},{}\n", e.frames);
        }
        s
    }
}

/// Combines per-sequence reports: frame-weighted means for IoU, success and
/// AUC, a plain mean over sequences for the drift rate.
pub fn pool(reports: &[EvalReport]) -> EvalReport {
    let frames: usize = reports.iter().map(|r| r.frames).sum();
    let weighted = |f: &dyn Fn(&EvalReport) -> f64| {
        if frames == 0 {
            0.0
        } else {
            reports.iter().map(|r| f(r) * r.frames as f64).sum::<f64>() / frames as f64
        }
    };
    let per_event = match reports.first() {
        None => Vec::new(),
        Some(first) => (0..first.per_event.len())
            .map(|i| {
                let n: usize = reports.iter().map(|r| r.per_event[i].frames).sum();
                let s: f64 = reports
                    .iter()
                    .map(|r| r.per_event[i].mean_iou * r.per_event[i].frames as f64)
                    .sum();
                EventBreakdown {
                    kind: first.per_event[i].kind,
                    frames: n,
                    mean_iou: if n == 0 { 0.0 } else { s / n as f64 },
                }
            })
            .collect(),
    };
    EvalReport {
        frames,
        mean_iou: weighted(&|r| r.mean_iou),
        success_50: weighted(&|r| r.success_50),
        auc: weighted(&|r| r.auc),
        drift_rate: if reports.is_empty() {
            0.0
        } else {
            reports.iter().map(|r| r.drift_rate).sum::<f64>() / reports.len() as f64
        },
        per_event,
    }
}

pub fn ious(predictions: &[BBox], truth: &[BBox]) -> Result<Vec<f64>> {
    if predictions.len() != truth.len() {
        return Err(Error::shape(
            "evaluate",
            &[predictions.len()],
            &[truth.len()],
        ));
    }
    predictions
        .iter()
        .zip(truth)
        .map(|(p, g)| iou(p, g))
        .collect()
}

/// Metrics over paired boxes; `active` tags each frame with its events.
pub fn evaluate(
    predictions: &[BBox],
    truth: &[BBox],
    active: &[Vec<EventKind>],
) -> Result<EvalReport> {
    let v = ious(predictions, truth)?;
    if active.len() != v.len() {
        return Err(Error::shape("evaluate", &[v.len()], &[active.len()]));
    }
    Ok(report_from_ious(&v, active))
}

pub fn report_from_ious(v: &[f64], active: &[Vec<EventKind>]) -> EvalReport {
    let n = v.len();
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    };
    let success = |t: f64| mean(&mut v.iter().map(|&x| if x > t { 1.0 } else { 0.0 }));
    let auc = (0..AUC_THRESHOLDS)
        .map(|i| success(i as f64 / (AUC_THRESHOLDS - 1) as f64))
        .sum::<f64>()
        / AUC_THRESHOLDS as f64;
    let drift_rate = match v.iter().position(|&x| x < IOU_FAILURE) {
        Some(onset) => mean(
            &mut v[onset..]
                .iter()
                .map(|&x| if x < IOU_FAILURE { 1.0 } else { 0.0 }),
        ),
        None => 0.0,
    };
    let mut per_event = Vec::new();
    let clean: Vec<f64> = v
        .iter()
        .zip(active)
        .filter(|(_, a)| a.is_empty())
        .map(|(x, _)| *x)
        .collect();
    per_event.push(EventBreakdown {
        kind: None,
        frames: clean.len(),
        mean_iou: mean(&mut clean.iter().copied()),
    });
    for kind in EventKind::ALL {
        let xs: Vec<f64> = v
            .iter()
            .zip(active)
            .filter(|(_, a)| a.contains(&kind))
            .map(|(x, _)| *x)
            .collect();
        per_event.push(EventBreakdown {
            kind: Some(kind),
            frames: xs.len(),
            mean_iou: mean(&mut xs.iter().copied()),
        });
    }
    EvalReport {
        frames: n,
        mean_iou: mean(&mut v.iter().copied()),
        success_50: success(0.5),
        auc,
        drift_rate,
        per_event,
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown event '{s}'")))
    }
}

#[cfg(test)]
mod tests;
