//! Reliability calibration of historical frames.
//!
//! Each history frame is reduced to one vector by averaging the patch
//! embeddings that touch the target box. A small MLP scores the three
//! reference summaries jointly; the template is pinned to full confidence.
//! Calibrated summaries are the raw summaries scaled by their score.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::TokenMask;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const NUM_REFERENCES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Learned MLP + sigmoid.
    Learned,
    /// Non-learned: a reference passes iff its summary norm reaches the median
    /// of the reference norms.
    FixedThreshold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateConfig {
    pub hidden: usize,
    pub epsilon: f64,
    /// Pin the template's confidence to 1.0.
    pub anchor_template: bool,
    pub mode: GateMode,
}

impl GateConfig {
    pub fn new(hidden: usize) -> Self {
        Self {
            hidden,
            epsilon: DEFAULT_EPSILON,
            anchor_template: true,
            mode: GateMode::Learned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("gate hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Masked average pooling: `Σⱼ Zⱼ·Mⱼ / (Σⱼ Mⱼ + ε)`.
pub fn summarize(tape: &mut Tape, tokens: Var, mask: &TokenMask, epsilon: f64) -> Result<Var> {
    tape.mean_masked(tokens, &mask.bits, epsilon)
}

/// Two-layer MLP from the concatenated summaries to one sigmoid score per frame.
#[derive(Clone, Debug)]
pub struct ConfidenceGate {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub frames: usize,
    pub dim: usize,
    pub hidden: usize,
}

impl ConfidenceGate {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        frames: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = frames * dim;
        Self {
            w1: store.add(
                format!("{name}.w1"),
                Tensor::randn(&[fan_in, hidden], (fan_in as f64).powf(-0.5), rng),
                true,
            ),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[hidden]), true),
            w2: store.add(
                format!("{name}.w2"),
                Tensor::randn(&[hidden, frames], (hidden as f64).powf(-0.5), rng),
                true,
            ),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[frames]), true),
            frames,
            dim,
            hidden,
        }
    }

    /// Scores `summaries` (each of length `dim`); returns a `[1, frames]` row.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, summaries: &[Var]) -> Result<Var> {
        if summaries.len() != self.frames {
            return Err(Error::shape("gate", &[summaries.len()], &[self.frames]));
        }
        let x = tape.concat_cols(summaries)?;
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        Ok(tape.sigmoid(o))
    }

    pub fn params(&self) -> usize {
        self.frames * self.dim * self.hidden + self.hidden + self.hidden * self.frames + self.frames
    }

    pub fn macs(&self) -> u64 {
        (self.frames * self.dim * self.hidden + self.hidden * self.frames) as u64
    }
}

/// Summaries, scores and calibrated summaries of the template (index 0) and
/// the three references, all on one tape.
#[derive(Clone, Debug)]
pub struct Calibrated {
    pub summaries: [Var; 4],
    pub scores: [Var; 4],
    pub calibrated: [Var; 4],
}

impl Calibrated {
    pub fn score_values(&self, tape: &Tape) -> [f64; 4] {
        self.scores.map(|c| tape.value(c).item())
    }
}

#[derive(Clone, Debug)]
pub struct Calibrator {
    pub config: GateConfig,
    pub gate: Option<ConfidenceGate>,
}

impl Calibrator {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: GateConfig,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let gate = match config.mode {
            GateMode::Learned => {
                let frames = if config.anchor_template {
                    NUM_REFERENCES
                } else {
                    NUM_REFERENCES + 1
                };
                Some(ConfidenceGate::new(
                    store,
                    "calibrator.gate",
                    dim,
                    config.hidden,
                    frames,
                    rng,
                ))
            }
            GateMode::FixedThreshold => None,
        };
        Ok(Self { config, gate })
    }

    /// Scores and calibrates `summaries` (template first).
    ///
    /// `overrides[i]`, when set, replaces the score of reference `i + 1` with a
    /// constant. A reference forced to 0 also enters the scoring as a zero
    /// vector, so nothing downstream depends on its content.
    pub fn calibrate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        summaries: [Var; 4],
        overrides: &[Option<f64>; 3],
    ) -> Result<Calibrated> {
        let one = tape.constant(Tensor::scalar(1.0));
        let mut scores = [one; 4];
        let mut scored = summaries;
        for (i, o) in overrides.iter().enumerate() {
            if *o == Some(0.0) {
                let shape = tape.value(summaries[i + 1]).shape().to_vec();
                scored[i + 1] = tape.constant(Tensor::zeros(&shape));
            }
        }
        match (&self.gate, self.config.mode) {
            (Some(gate), GateMode::Learned) => {
                let anchored = self.config.anchor_template;
                let inputs: Vec<Var> = if anchored {
                    scored[1..].to_vec()
                } else {
                    scored.to_vec()
                };
                let out = gate.forward(tape, store, &inputs)?;
                let first = if anchored { 1 } else { 0 };
                for (col, slot) in (first..4).enumerate() {
                    scores[slot] = tape.slice_cols(out, col, 1)?;
                }
            }
            _ => {
                let norms: Vec<f64> = scored[1..].iter().map(|s| tape.value(*s).norm()).collect();
                let median = median(&norms);
                for (i, n) in norms.iter().enumerate() {
                    let pass = if *n >= median { 1.0 } else { 0.0 };
                    scores[i + 1] = tape.constant(Tensor::scalar(pass));
                }
            }
        }
        for (i, o) in overrides.iter().enumerate() {
            if let Some(v) = o {
                scores[i + 1] = tape.constant(Tensor::scalar(*v));
            }
        }
        let mut calibrated = summaries;
        for i in 0..4 {
            calibrated[i] = tape.scale_by(summaries[i], scores[i])?;
        }
        Ok(Calibrated {
            summaries,
            scores,
            calibrated,
        })
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
