//! Guidance synthesis: calibrated history summaries become `K` prior tokens.
//!
//! `P_dyn = P_base + f_mod([ŝ₀, ŝ₁, ŝ₂, ŝ₃])`, reshaped to `[K, D]`, followed by
//! learned prior positions and the prior type embedding. The other modes
//! replace the modulated term with simpler history signals.

use rand::Rng;

use crate::backbone::{ChunkLayout, TokenType};
use crate::error::{Error, Result};
use crate::geometry::{BBox, CropTransform, GrayImage, PatchGrid};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const NUM_TOKEN_TYPES: usize = 4;
pub const HISTORY_FRAMES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorMode {
    /// Base tokens plus the modulator output.
    Modulated,
    /// Modulator output alone.
    NoBase,
    /// The four calibrated summaries are the prior tokens.
    Concat,
    /// Base tokens plus a projection of the extrapolated box.
    Momentum,
    /// Base tokens plus a projection of the mean reference difference.
    Flow,
}

impl PriorMode {
    /// Whether the prior tokens are built from calibrated summaries.
    pub fn uses_summaries(self) -> bool {
        matches!(
            self,
            PriorMode::Modulated | PriorMode::NoBase | PriorMode::Concat
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub num_priors: usize,
    pub hidden: usize,
    pub mode: PriorMode,
}

impl GuidanceConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            num_priors: 4,
            hidden: 2 * dim,
            mode: PriorMode::Modulated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_priors == 0 {
            return Err(Error::Config("num_priors must be at least 1".into()));
        }
        if self.mode == PriorMode::Concat && self.num_priors != HISTORY_FRAMES {
            return Err(Error::Config(format!(
                "concat priors need num_priors = {HISTORY_FRAMES}, got {}",
                self.num_priors
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config(
                "modulator hidden width must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// What the history contributes to the priors in each mode.
#[derive(Clone, Debug)]
pub enum PriorSignal {
    /// Calibrated summaries `ŝ₀..ŝ₃`, template first.
    Calibrated([Var; 4]),
    /// Box code from [`momentum_code`].
    Momentum([f64; 4]),
    /// Patch vector from [`flow_code`].
    Flow(Tensor),
}

#[derive(Clone, Debug)]
pub struct Modulator {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct PriorBank {
    pub config: GuidanceConfig,
    pub dim: usize,
    pub base: Option<ParamId>,
    pub modulator: Option<Modulator>,
    pub momentum: Option<ParamId>,
    pub flow: Option<ParamId>,
    pub pos: ParamId,
    pub types: ParamId,
}

impl PriorBank {
    /// `patch_size` sizes the flow projection.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: GuidanceConfig,
        dim: usize,
        patch_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.num_priors;
        let mode = config.mode;
        let base = (mode != PriorMode::NoBase && mode != PriorMode::Concat)
            .then(|| store.add("guidance.base", Tensor::randn(&[k, dim], 0.02, rng), true));
        let modulator = matches!(mode, PriorMode::Modulated | PriorMode::NoBase).then(|| {
            let fan_in = HISTORY_FRAMES * dim;
            let h = config.hidden;
            Modulator {
                w1: store.add(
                    "guidance.mod.w1",
                    Tensor::randn(&[fan_in, h], (fan_in as f64).powf(-0.5), rng),
                    true,
                ),
                b1: store.add("guidance.mod.b1", Tensor::zeros(&[h]), true),
                w2: store.add(
                    "guidance.mod.w2",
                    Tensor::randn(&[h, k * dim], (h as f64).powf(-0.5), rng),
                    true,
                ),
                b2: store.add("guidance.mod.b2", Tensor::zeros(&[k * dim]), true),
            }
        });
        let momentum = (mode == PriorMode::Momentum).then(|| {
            store.add(
                "guidance.momentum.w",
                Tensor::randn(&[4, dim], 0.5, rng),
                true,
            )
        });
        let pin = patch_size * patch_size;
        let flow = (mode == PriorMode::Flow).then(|| {
            store.add(
                "guidance.flow.w",
                Tensor::randn(&[pin, dim], (pin as f64).powf(-0.5), rng),
                true,
            )
        });
        let pos = store.add("guidance.pos", Tensor::randn(&[k, dim], 0.02, rng), true);
        let types = store.add(
            "guidance.types",
            Tensor::randn(&[NUM_TOKEN_TYPES, dim], 0.02, rng),
            true,
        );
        Ok(Self {
            config,
            dim,
            base,
            modulator,
            momentum,
            flow,
            pos,
            types,
        })
    }

    /// Builds `P_dyn` of shape `[K, D]`.
    pub fn synthesize(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        signal: &PriorSignal,
    ) -> Result<Var> {
        let k = self.config.num_priors;
        let d = self.dim;
        let body = match (self.config.mode, signal) {
            (PriorMode::Modulated | PriorMode::NoBase, PriorSignal::Calibrated(s)) => {
                let m = self
                    .modulator
                    .as_ref()
                    .expect("modulator present in modulated modes");
                let x = tape.concat_cols(s)?;
                let w1 = tape.param(store, m.w1);
                let b1 = tape.param(store, m.b1);
                let w2 = tape.param(store, m.w2);
                let b2 = tape.param(store, m.b2);
                let h = tape.matmul(x, w1)?;
                let h = tape.add_row(h, b1)?;
                let h = tape.gelu(h);
                let o = tape.matmul(h, w2)?;
                let o = tape.add_row(o, b2)?;
                let o = tape.reshape(o, &[k, d])?;
                match self.base {
                    Some(base) => {
                        let base = tape.param(store, base);
                        tape.add(base, o)?
                    }
                    None => o,
                }
            }
            (PriorMode::Concat, PriorSignal::Calibrated(s)) => tape.concat_rows(s)?,
            (PriorMode::Momentum, PriorSignal::Momentum(code)) => {
                let w = tape.param(store, self.momentum.expect("momentum projection"));
                let c = tape.constant(Tensor::matrix(1, 4, code.to_vec())?);
                let shift = tape.matmul(c, w)?;
                let base = tape.param(store, self.base.expect("base tokens"));
                tape.add_row(base, shift)?
            }
            (PriorMode::Flow, PriorSignal::Flow(code)) => {
                let w = tape.param(store, self.flow.expect("flow projection"));
                let c = tape.constant(Tensor::matrix(1, code.len(), code.data().to_vec())?);
                let shift = tape.matmul(c, w)?;
                let base = tape.param(store, self.base.expect("base tokens"));
                tape.add_row(base, shift)?
            }
            (mode, _) => {
                return Err(Error::Config(format!(
                    "prior signal does not match mode {mode:?}"
                )))
            }
        };
        let pos = tape.param(store, self.pos);
        let x = tape.add(body, pos)?;
        let types = tape.param(store, self.types);
        let prior_type = tape.slice_rows(types, TokenType::Prior as usize, 1)?;
        tape.add_row(x, prior_type)
    }

    /// Adds each token's type embedding according to `layout`.
    pub fn annotate_types(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        layout: &ChunkLayout,
    ) -> Result<Var> {
        annotate_types(tape, store, self.types, tokens, layout)
    }
}

/// Adds `types[type(token)]` to every token.
pub fn annotate_types(
    tape: &mut Tape,
    store: &ParamStore,
    table: ParamId,
    tokens: Var,
    layout: &ChunkLayout,
) -> Result<Var> {
    let rows = tape.value(tokens).rows();
    if rows != layout.total() {
        return Err(Error::Layout(format!(
            "{rows} tokens for a layout of {}",
            layout.total()
        )));
    }
    if store.value(table).rows() != NUM_TOKEN_TYPES {
        return Err(Error::shape(
            "annotate_types",
            store.value(table).shape(),
            &[NUM_TOKEN_TYPES],
        ));
    }
    let idx: Vec<usize> = layout
        .token_types()
        .into_iter()
        .map(|t| t as usize)
        .collect();
    let table = tape.param(store, table);
    let per_token = tape.gather_rows(table, &idx)?;
    tape.add(tokens, per_token)
}

/// Constant-velocity extrapolation of the last two boxes, encoded in the
/// search crop as `(cx − ½, cy − ½, w, h)` in units of the crop side.
pub fn momentum_code(older: &BBox, newer: &BBox, crop: &CropTransform) -> [f64; 4] {
    let (ox, oy) = older.center();
    let (nx, ny) = newer.center();
    let next = BBox::from_center(
        2.0 * nx - ox,
        2.0 * ny - oy,
        2.0 * newer.w - older.w,
        2.0 * newer.h - older.h,
    );
    let c = crop.to_crop(&next);
    let (cx, cy) = c.center();
    let side = crop.out_size as f64;
    [cx / side - 0.5, cy / side - 0.5, c.w / side, c.h / side]
}

/// Mean over patches of `newer − older`, one entry per pixel of a patch.
pub fn flow_code(older: &GrayImage, newer: &GrayImage, patch_size: usize) -> Result<Tensor> {
    let grid = PatchGrid::new(newer.width(), newer.height(), patch_size)?;
    let a = grid.patches(older)?;
    let b = grid.patches(newer)?;
    let n = grid.tokens() as f64;
    let pin = patch_size * patch_size;
    let mut out = vec![0.0; pin];
    for j in 0..grid.tokens() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += (b.at(j, i) - a.at(j, i)) / n;
        }
    }
    Ok(Tensor::vector(out))
}
