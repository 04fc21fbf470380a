//! End-to-end tracker: sequence assembly, heads, losses, decoding and the
//! inference loop.

mod heads;
mod state;
mod train;

use rand::Rng;

pub use heads::{decode, hann_penalize, hann_window, HannMode, Heads, ScoreMap};
pub use state::{
    gate_means, parse_predictions, records_to_csv, select_references, track_sequence, HistoryEntry,
    RefSlot, StepRecord, TrackerState, CSV_HEADER,
};
pub use train::{
    sample, sample_loss, train, EpochLog, Sample, SampleLoss, TrainConfig, TrainReport, LOG_HEADER,
};

use crate::backbone::{Backbone, BackboneConfig, ChunkLayout, ChunkRole, PassOptions};
use crate::error::{Error, Result};
use crate::geometry::{crop_with_area_factor, token_mask, BBox, Crop, GrayImage, TokenMask};
use crate::guidance::{GuidanceConfig, PriorBank, PriorMode, PriorSignal};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::reliability::{summarize, Calibrator, GateConfig, NUM_REFERENCES};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub gate: GateConfig,
    pub guidance: GuidanceConfig,
    /// Reliability calibration and prior tokens; off gives the plain
    /// multi-frame baseline.
    pub temporal_module: bool,
    /// Reference frames fed to the backbone, `0..=3`.
    pub num_references: usize,
    pub head_hidden: usize,
    pub hann_coef: f64,
    pub hann_mode: HannMode,
    pub search_factor: f64,
    pub template_factor: f64,
    pub bce_coef: f64,
    pub giou_coef: f64,
    pub gate_threshold: f64,
    pub reference_stride: usize,
    pub history_capacity: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let d = backbone.embed_dim;
        Self {
            gate: GateConfig::new(d),
            guidance: GuidanceConfig::new(d),
            backbone,
            temporal_module: true,
            num_references: NUM_REFERENCES,
            head_hidden: d,
            hann_coef: 0.45,
            hann_mode: HannMode::Blend,
            search_factor: 4.0,
            template_factor: 2.0,
            bce_coef: 1.0,
            giou_coef: 1.0,
            gate_threshold: 0.5,
            reference_stride: 5,
            history_capacity: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.gate.validate()?;
        self.guidance.validate()?;
        if self.num_references > NUM_REFERENCES {
            return Err(Error::Config(format!(
                "at most {NUM_REFERENCES} references, got {}",
                self.num_references
            )));
        }
        if !(0.0..=1.0).contains(&self.hann_coef) {
            return Err(Error::Config(format!(
                "hann_coef {} outside [0, 1]",
                self.hann_coef
            )));
        }
        if !(self.search_factor > 0.0 && self.template_factor > 0.0) {
            return Err(Error::Config("crop factors must be positive".into()));
        }
        if self.reference_stride == 0 || self.history_capacity < self.reference_stride {
            return Err(Error::Config(format!(
                "history capacity {} must cover stride {}",
                self.history_capacity, self.reference_stride
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn num_priors(&self) -> usize {
        if self.temporal_module {
            self.guidance.num_priors
        } else {
            0
        }
    }
}

/// One cropped frame ready for embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub image: GrayImage,
    /// Tokens touching the recorded target box.
    pub mask: TokenMask,
}

impl FrameInput {
    /// Crops `image` around `bbox` and marks the tokens under it.
    pub fn around(
        image: &GrayImage,
        bbox: &BBox,
        factor: f64,
        size: usize,
        patch: usize,
    ) -> Result<(Self, Crop)> {
        let crop = crop_with_area_factor(image, bbox, factor, size)?;
        let grid = crate::geometry::PatchGrid::square(size, patch)?;
        let mask = token_mask(&grid, &crop.bbox);
        Ok((
            Self {
                image: crop.image.clone(),
                mask,
            },
            crop,
        ))
    }
}

/// Everything one forward pass consumes.
#[derive(Clone, Debug)]
pub struct StepInput<'a> {
    pub template: &'a FrameInput,
    /// One entry per reference slot in use.
    pub references: Vec<&'a FrameInput>,
    pub search: &'a GrayImage,
    /// Forces the score of reference slot `i`.
    pub gate_override: [Option<f64>; 3],
    pub momentum: Option<[f64; 4]>,
    pub flow: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub map: ScoreMap,
    pub logits: Var,
    pub offsets: Var,
    pub prior_tokens: Option<Var>,
    /// Template first; 1.0 where no gate applies.
    pub scores: [f64; 4],
    pub score_vars: Option<[Var; 4]>,
    pub layout: ChunkLayout,
}

#[derive(Clone, Debug)]
pub struct TrackerModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub calibrator: Option<Calibrator>,
    pub bank: Option<PriorBank>,
    pub heads: Heads,
}

/// Concatenates `[P_dyn, Z₀, Z₁, .., X₀]` and returns the matching layout.
pub fn assemble(
    tape: &mut Tape,
    priors: Option<Var>,
    template: Var,
    references: &[Var],
    search: Var,
) -> Result<(Var, ChunkLayout)> {
    let k = priors.map_or(0, |p| tape.value(p).rows());
    let mut parts = Vec::with_capacity(references.len() + 3);
    parts.extend(priors);
    parts.push(template);
    parts.extend_from_slice(references);
    parts.push(search);
    let d = tape.value(template).cols();
    for p in &parts {
        if tape.value(*p).cols() != d {
            return Err(Error::shape(
                "assemble",
                tape.value(template).shape(),
                tape.value(*p).shape(),
            ));
        }
    }
    let mut sizes = vec![k + tape.value(template).rows()];
    let mut roles = vec![ChunkRole::PriorTemplate { priors: k }];
    for (i, r) in references.iter().enumerate() {
        sizes.push(tape.value(*r).rows());
        roles.push(ChunkRole::Reference(i + 1));
    }
    sizes.push(tape.value(search).rows());
    roles.push(ChunkRole::Search);
    let layout = ChunkLayout::new(sizes, roles)?;
    Ok((tape.concat_rows(&parts)?, layout))
}

impl TrackerModel {
    pub fn new<R: Rng>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.backbone.embed_dim;
        let backbone = Backbone::new(store, &config.backbone, rng)?;
        let (calibrator, bank) = if config.temporal_module {
            let cal = if config.guidance.mode.uses_summaries() {
                Some(Calibrator::new(store, config.gate.clone(), d, rng)?)
            } else {
                None
            };
            let bank = PriorBank::new(
                store,
                config.guidance.clone(),
                d,
                config.backbone.patch_size,
                rng,
            )?;
            (cal, Some(bank))
        } else {
            (None, None)
        };
        let heads = Heads::new(
            store,
            d,
            config.head_hidden,
            config.backbone.search_grid().tokens(),
            rng,
        );
        Ok(Self {
            config,
            backbone,
            calibrator,
            bank,
            heads,
        })
    }

    /// Prior tokens and per-frame scores from the embedded history.
    fn priors(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z0: Var,
        refs: &[Var],
        input: &StepInput<'_>,
    ) -> Result<(Option<Var>, [f64; 4], Option<[Var; 4]>)> {
        let Some(bank) = &self.bank else {
            return Ok((None, [1.0; 4], None));
        };
        let signal = match bank.config.mode {
            PriorMode::Momentum => PriorSignal::Momentum(
                input
                    .momentum
                    .ok_or_else(|| Error::Config("momentum priors need a box code".into()))?,
            ),
            PriorMode::Flow => PriorSignal::Flow(
                input
                    .flow
                    .clone()
                    .ok_or_else(|| Error::Config("flow priors need a difference code".into()))?,
            ),
            _ => {
                let cal = self
                    .calibrator
                    .as_ref()
                    .expect("calibrator for summary modes");
                let eps = cal.config.epsilon;
                let d = self.config.backbone.embed_dim;
                let mut summaries = [tape.constant(Tensor::zeros(&[d])); 4];
                let mut overrides = input.gate_override;
                summaries[0] = summarize(tape, z0, &input.template.mask, eps)?;
                for slot in 0..NUM_REFERENCES {
                    match refs.get(slot) {
                        Some(z) => {
                            summaries[slot + 1] =
                                summarize(tape, *z, &input.references[slot].mask, eps)?
                        }
                        None => overrides[slot] = Some(0.0),
                    }
                }
                let out = cal.calibrate(tape, store, summaries, &overrides)?;
                let p = bank.synthesize(tape, store, &PriorSignal::Calibrated(out.calibrated))?;
                return Ok((Some(p), out.score_values(tape), Some(out.scores)));
            }
        };
        Ok((Some(bank.synthesize(tape, store, &signal)?), [1.0; 4], None))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &StepInput<'_>,
        opts: &mut PassOptions<'_>,
    ) -> Result<StepOutput> {
        if input.references.len() != self.config.num_references {
            return Err(Error::Layout(format!(
                "{} references for a model with {}",
                input.references.len(),
                self.config.num_references
            )));
        }
        let z0 = self.backbone.embed(tape, store, &input.template.image)?;
        let refs = input
            .references
            .iter()
            .map(|r| self.backbone.embed(tape, store, &r.image))
            .collect::<Result<Vec<_>>>()?;
        let x0 = self.backbone.embed(tape, store, input.search)?;
        let (priors, scores, score_vars) = self.priors(tape, store, z0, &refs, input)?;

        let (visual, visual_layout) = assemble(tape, None, z0, &refs, x0)?;
        let visual = match &self.bank {
            Some(bank) => bank.annotate_types(tape, store, visual, &visual_layout)?,
            None => visual,
        };
        let (tokens, layout) = match priors {
            Some(p) => {
                let tokens = tape.concat_rows(&[p, visual])?;
                let mut sizes = visual_layout.sizes().to_vec();
                let mut roles = visual_layout.roles().to_vec();
                let k = tape.value(p).rows();
                sizes[0] += k;
                roles[0] = ChunkRole::PriorTemplate { priors: k };
                (tokens, ChunkLayout::new(sizes, roles)?)
            }
            None => (visual, visual_layout),
        };
        let out = self.backbone.forward(tape, store, tokens, &layout, opts)?;
        let ns = tape.value(x0).rows();
        let search_tokens = tape.slice_rows(out, layout.total() - ns, ns)?;
        let grid = self.config.backbone.search_grid();
        let (logits, offsets) = self.heads.forward(tape, store, search_tokens)?;
        let map = ScoreMap::from_tape(tape, logits, offsets, grid.rows, grid.cols)?;
        Ok(StepOutput {
            map,
            logits,
            offsets,
            prior_tokens: priors,
            scores,
            score_vars,
            layout,
        })
    }

    /// BCE on a one-hot center map plus `1 − GIoU` of the box at the target
    /// cell; `target` is in search-crop pixels. Returns `(total, bce, giou)`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        out: &StepOutput,
        target: &BBox,
    ) -> Result<(Var, f64, f64)> {
        if !(target.w > 0.0 && target.h > 0.0) {
            return Err(Error::DegenerateBox(format!("{target:?}")));
        }
        let grid = self.config.backbone.search_grid();
        let p = grid.patch_size as f64;
        let (cx, cy) = target.center();
        let col = ((cx / p).floor().max(0.0) as usize).min(grid.cols - 1);
        let row = ((cy / p).floor().max(0.0) as usize).min(grid.rows - 1);
        let cell = row * grid.cols + col;
        let mut onehot = vec![0.0; grid.tokens()];
        onehot[cell] = 1.0;
        let bce = tape.bce_with_logits(out.logits, &onehot)?;
        let bce = tape.scale(bce, grid.tokens() as f64);
        let ltrb = tape.slice_rows(out.offsets, cell, 1)?;
        let c = target.corners();
        let gt = [c[0] / p, c[1] / p, c[2] / p, c[3] / p];
        let giou = tape.giou_loss(ltrb, (col as f64 + 0.5, row as f64 + 0.5), gt)?;
        let (bv, gv) = (tape.value(bce).item(), tape.value(giou).item());
        let a = tape.scale(bce, self.config.bce_coef);
        let b = tape.scale(giou, self.config.giou_coef);
        Ok((tape.add(a, b)?, bv, gv))
    }
}
