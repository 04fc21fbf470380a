use std::collections::VecDeque;
use std::fmt::Write as _;

use super::{decode, hann_penalize, FrameInput, StepInput, TrackerModel};
use crate::backbone::{AttentionPath, PassOptions};
use crate::error::{Error, Result};
use crate::geometry::{crop_with_area_factor, iou, BBox, GrayImage};
use crate::guidance::{flow_code, momentum_code, PriorMode};
use crate::numerics::{GradMode, ParamStore, Tape};
use crate::simworld::Sequence;

pub const CSV_HEADER: &str =
    "step,pred_x,pred_y,pred_w,pred_h,gt_x,gt_y,gt_w,gt_h,iou,c1,c2,c3,score_max";

/// Smallest side a tracked box may shrink to, in pixels.
const MIN_SIDE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub step: usize,
    /// The box recorded for this step (the prediction, or an injected one).
    pub bbox: BBox,
    /// Score from the first step that used this entry as a reference.
    pub gate: Option<f64>,
    pub frame: FrameInput,
    pub corrupted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefSlot {
    Template,
    /// History entry recorded at this step.
    History(usize),
}

/// Reference choice for step `step`:
/// A = most recent entry, B = most recent entry with a gate score of at least
/// `threshold`, C = the entry `stride` steps back. Missing picks fall back to
/// the template.
pub fn select_references<'a>(
    history: impl DoubleEndedIterator<Item = &'a HistoryEntry> + Clone,
    step: usize,
    threshold: f64,
    stride: usize,
) -> [RefSlot; 3] {
    let a = history
        .clone()
        .next_back()
        .map_or(RefSlot::Template, |e| RefSlot::History(e.step));
    let b = history
        .clone()
        .rev()
        .find(|e| e.gate.is_some_and(|g| g >= threshold))
        .map_or(RefSlot::Template, |e| RefSlot::History(e.step));
    let c = step
        .checked_sub(stride)
        .and_then(|s| history.clone().find(|e| e.step == s))
        .map_or(RefSlot::Template, |e| RefSlot::History(e.step));
    [a, b, c]
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub pred: BBox,
    pub gt: Option<BBox>,
    /// Scores of reference slots A, B, C; 0 for unused slots.
    pub gates: [f64; 3],
    pub slots: [Option<RefSlot>; 3],
    /// Whether each used slot holds a corrupted entry.
    pub slot_corrupted: [Option<bool>; 3],
    pub score_max: f64,
}

impl StepRecord {
    pub fn iou(&self) -> Option<f64> {
        self.gt.map(|g| iou(&self.pred, &g).unwrap_or(0.0))
    }
}

/// Mean gate score over history references, split by whether the
/// referenced entry was corrupted; NaN when a group is empty.
pub fn gate_means(records: &[StepRecord]) -> (f64, f64) {
    let (mut clean, mut corrupt) = ((0.0, 0usize), (0.0, 0usize));
    for r in records {
        for i in 0..3 {
            if let (Some(RefSlot::History(_)), Some(c)) = (r.slots[i], r.slot_corrupted[i]) {
                let acc = if c { &mut corrupt } else { &mut clean };
                acc.0 += r.gates[i];
                acc.1 += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
    (mean(clean), mean(corrupt))
}

pub fn records_to_csv(records: &[StepRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let gt = r.gt.unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.step,
            r.pred.x,
            r.pred.y,
            r.pred.w,
            r.pred.h,
            gt.x,
            gt.y,
            gt.w,
            gt.h,
            r.iou().unwrap_or(0.0),
            r.gates[0],
            r.gates[1],
            r.gates[2],
            r.score_max
        );
    }
    s
}

/// Parses the prediction columns of a tracker CSV as `(step, box)`.
pub fn parse_predictions(csv: &str) -> Result<Vec<(usize, BBox)>> {
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(Error::Parse(format!("unexpected header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 14 {
                return Err(Error::Parse(format!("expected 14 fields: {l}")));
            }
            let num = |i: usize| {
                f[i].parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}: {e}", f[i])))
            };
            let step = f[0]
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("{}: {e}", f[0])))?;
            Ok((step, BBox::new(num(1)?, num(2)?, num(3)?, num(4)?)))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    template: FrameInput,
    template_box: BBox,
    history: VecDeque<HistoryEntry>,
    capacity: usize,
    step: usize,
    last_box: BBox,
    bounds: (f64, f64),
}

impl TrackerState {
    /// Starts a sequence from the first frame and its ground-truth box.
    pub fn new(model: &TrackerModel, frame: &GrayImage, bbox: BBox) -> Result<Self> {
        let cfg = &model.config;
        let (template, _) = FrameInput::around(
            frame,
            &bbox,
            cfg.template_factor,
            cfg.backbone.template_size,
            cfg.backbone.patch_size,
        )?;
        Ok(Self {
            template,
            template_box: bbox,
            history: VecDeque::with_capacity(cfg.history_capacity),
            capacity: cfg.history_capacity,
            step: 1,
            last_box: bbox,
            bounds: (frame.width() as f64, frame.height() as f64),
        })
    }

    pub fn template(&self) -> &FrameInput {
        &self.template
    }

    pub fn history(&self) -> impl DoubleEndedIterator<Item = &HistoryEntry> + Clone {
        self.history.iter()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn last_box(&self) -> BBox {
        self.last_box
    }

    pub fn push(&mut self, entry: HistoryEntry) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.last_box = entry.bbox;
        self.history.push_back(entry);
    }

    fn entry(&self, step: usize) -> Option<&HistoryEntry> {
        self.history.iter().find(|e| e.step == step)
    }

    fn slot_frame(&self, slot: RefSlot) -> &FrameInput {
        match slot {
            RefSlot::Template => &self.template,
            RefSlot::History(s) => &self.entry(s).expect("selected entry exists").frame,
        }
    }

    /// The two most recent recorded boxes, oldest first.
    fn last_two(&self) -> (&BBox, &BBox, &FrameInput, &FrameInput) {
        let n = self.history.len();
        let (nb, nf) = match self.history.back() {
            Some(e) => (&e.bbox, &e.frame),
            None => (&self.template_box, &self.template),
        };
        let (ob, of) = match n.checked_sub(2).and_then(|i| self.history.get(i)) {
            Some(e) => (&e.bbox, &e.frame),
            None => (&self.template_box, &self.template),
        };
        (ob, nb, of, nf)
    }

    fn clamp_box(&self, b: BBox) -> BBox {
        let (w, h) = (
            b.w.clamp(MIN_SIDE, self.bounds.0),
            b.h.clamp(MIN_SIDE, self.bounds.1),
        );
        let (cx, cy) = b.center();
        BBox::from_center(
            cx.clamp(0.0, self.bounds.0),
            cy.clamp(0.0, self.bounds.1),
            w,
            h,
        )
    }

    /// Tracks one frame. With `injected` set, that box is recorded in the
    /// history in place of the prediction.
    pub fn track_step(
        &mut self,
        model: &TrackerModel,
        store: &ParamStore,
        image: &GrayImage,
        injected: Option<BBox>,
    ) -> Result<StepRecord> {
        let cfg = &model.config;
        let bb = &cfg.backbone;
        let t = self.step;
        let slots = select_references(self.history(), t, cfg.gate_threshold, cfg.reference_stride);
        let used = &slots[..cfg.num_references];
        let search =
            crop_with_area_factor(image, &self.last_box, cfg.search_factor, bb.search_size)?;
        let (ob, nb, of, nf) = self.last_two();
        let mode = model.bank.as_ref().map(|b| b.config.mode);
        let momentum =
            (mode == Some(PriorMode::Momentum)).then(|| momentum_code(ob, nb, &search.transform));
        let flow = match mode {
            Some(PriorMode::Flow) => Some(flow_code(&of.image, &nf.image, bb.patch_size)?),
            _ => None,
        };
        let input = StepInput {
            template: &self.template,
            references: used.iter().map(|s| self.slot_frame(*s)).collect(),
            search: &search.image,
            gate_override: [None; 3],
            momentum,
            flow,
        };
        let mut tape = Tape::with_mode(GradMode::Off);
        let mut opts = PassOptions {
            path: AttentionPath::Chunked,
            drop_rng: None,
        };
        let out = model.forward(&mut tape, store, &input, &mut opts)?;
        let scores = hann_penalize(&out.map, cfg.hann_coef, cfg.hann_mode)?;
        let (raw, _) = decode(&out.map, &scores, bb.patch_size, &search.transform)?;
        let pred = self.clamp_box(raw);

        let mut gates = [0.0; 3];
        let mut slot_used = [None; 3];
        let mut slot_corrupted = [None; 3];
        for (i, s) in used.iter().enumerate() {
            gates[i] = out.scores[i + 1];
            slot_used[i] = Some(*s);
            if let RefSlot::History(step) = s {
                let e = self
                    .history
                    .iter_mut()
                    .find(|e| e.step == *step)
                    .expect("selected entry exists");
                slot_corrupted[i] = Some(e.corrupted);
                if e.gate.is_none() {
                    e.gate = Some(out.scores[i + 1]);
                }
            } else {
                slot_corrupted[i] = Some(false);
            }
        }

        let recorded = injected.map_or(pred, |b| self.clamp_box(b));
        let (frame, _) = FrameInput::around(
            image,
            &recorded,
            cfg.template_factor,
            bb.template_size,
            bb.patch_size,
        )?;
        self.push(HistoryEntry {
            step: t,
            bbox: recorded,
            gate: None,
            frame,
            corrupted: injected.is_some(),
        });
        self.step += 1;
        Ok(StepRecord {
            step: t,
            pred,
            gt: None,
            gates,
            slots: slot_used,
            slot_corrupted,
            score_max: out.map.score_max(),
        })
    }
}

/// Tracks every frame after the first. With `inject`, corrupted frames record
/// their jittered box in the history.
pub fn track_sequence(
    model: &TrackerModel,
    store: &ParamStore,
    seq: &Sequence,
    inject: bool,
) -> Result<Vec<StepRecord>> {
    if seq.is_empty() {
        return Err(Error::Config("empty sequence".into()));
    }
    let mut state = TrackerState::new(model, &seq.frames[0], seq.boxes[0])?;
    let mut out = Vec::with_capacity(seq.len() - 1);
    for t in 1..seq.len() {
        let injected = if inject { seq.injected[t] } else { None };
        let mut r = state.track_step(model, store, &seq.frames[t], injected)?;
        r.gt = Some(seq.boxes[t]);
        out.push(r);
    }
    Ok(out)
}
