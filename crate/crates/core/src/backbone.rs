//! Frozen transformer backbone with frame-wise causal attention and one
//! low-rank adapter per input stream.
//!
//! The token sequence is a list of chunks (one per frame, the first also
//! holding any prior tokens). A token may attend to every token of its own
//! chunk and of all earlier chunks, never to later ones. Every linear
//! projection in a block is shared and frozen; each stream owns a trainable
//! `A·B` correction that applies only to the tokens of its chunks.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{GrayImage, PatchGrid};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const NUM_STREAMS: usize = 5;
pub const TEMPLATE_STREAM: usize = 0;
pub const SEARCH_STREAM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    /// Side of template and reference crops, in pixels.
    pub template_size: usize,
    /// Side of the search crop, in pixels.
    pub search_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub drop_path: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            embed_dim: 32,
            heads: 2,
            mlp_ratio: 4,
            patch_size: 4,
            template_size: 16,
            search_size: 32,
            lora_rank: 4,
            lora_alpha: 4.0,
            drop_path: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.lora_rank == 0 || self.lora_rank > self.embed_dim {
            return bad(format!(
                "lora_rank {} outside 1..={}",
                self.lora_rank, self.embed_dim
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path {} outside [0, 1)", self.drop_path));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        PatchGrid::square(self.template_size, self.patch_size)?;
        PatchGrid::square(self.search_size, self.patch_size)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn template_grid(&self) -> PatchGrid {
        PatchGrid::square(self.template_size, self.patch_size).expect("validated")
    }

    pub fn search_grid(&self) -> PatchGrid {
        PatchGrid::square(self.search_size, self.patch_size).expect("validated")
    }
}

/// What a chunk of the token sequence holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkRole {
    /// `priors` prior tokens followed by the template tokens.
    PriorTemplate {
        priors: usize,
    },
    /// Reference slot `1..=3`.
    Reference(usize),
    Search,
}

impl ChunkRole {
    pub fn stream(&self) -> usize {
        match self {
            ChunkRole::PriorTemplate { .. } => TEMPLATE_STREAM,
            ChunkRole::Reference(i) => *i,
            ChunkRole::Search => SEARCH_STREAM,
        }
    }
}

/// Token type used for type embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenType {
    Prior = 0,
    Template = 1,
    Reference = 2,
    Search = 3,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkLayout {
    sizes: Vec<usize>,
    roles: Vec<ChunkRole>,
}

impl ChunkLayout {
    pub fn new(sizes: Vec<usize>, roles: Vec<ChunkRole>) -> Result<Self> {
        if sizes.is_empty() || sizes.len() != roles.len() {
            return Err(Error::Layout(format!(
                "{} sizes for {} roles",
                sizes.len(),
                roles.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Layout("empty chunk".into()));
        }
        match roles[0] {
            ChunkRole::PriorTemplate { priors } if priors < sizes[0] => {}
            other => {
                return Err(Error::Layout(format!(
                    "chunk 0 must hold the template, got {other:?}"
                )))
            }
        }
        if roles[1..]
            .iter()
            .any(|r| matches!(r, ChunkRole::PriorTemplate { .. }))
        {
            return Err(Error::Layout("only chunk 0 may hold the template".into()));
        }
        for r in &roles {
            if let ChunkRole::Reference(i) = r {
                if !(1..=3).contains(i) {
                    return Err(Error::Layout(format!("reference slot {i} outside 1..=3")));
                }
            }
        }
        Ok(Self { sizes, roles })
    }

    /// Layout with anonymous roles: chunk 0 is the template, the last chunk is
    /// the search region when there are at least two chunks, everything
    /// between is a reference. Only meant for mask and cost experiments.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let n = sizes.len();
        let roles = (0..n)
            .map(|i| match i {
                0 => ChunkRole::PriorTemplate { priors: 0 },
                i if i + 1 == n => ChunkRole::Search,
                i => ChunkRole::Reference(((i - 1) % 3) + 1),
            })
            .collect();
        Self::new(sizes.to_vec(), roles)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn roles(&self) -> &[ChunkRole] {
        &self.roles
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn num_chunks(&self) -> usize {
        self.sizes.len()
    }

    pub fn starts(&self) -> Vec<usize> {
        let mut acc = 0;
        self.sizes
            .iter()
            .map(|s| {
                let start = acc;
                acc += s;
                start
            })
            .collect()
    }

    /// Chunk index of every token.
    pub fn chunk_of_tokens(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect()
    }

    pub fn token_types(&self) -> Vec<TokenType> {
        let mut out = Vec::with_capacity(self.total());
        for (size, role) in self.sizes.iter().zip(&self.roles) {
            match role {
                ChunkRole::PriorTemplate { priors } => {
                    out.extend(std::iter::repeat(TokenType::Prior).take(*priors));
                    out.extend(std::iter::repeat(TokenType::Template).take(size - priors));
                }
                ChunkRole::Reference(_) => {
                    out.extend(std::iter::repeat(TokenType::Reference).take(*size))
                }
                ChunkRole::Search => out.extend(std::iter::repeat(TokenType::Search).take(*size)),
            }
        }
        out
    }

    /// `(start, len, stream)` for every chunk.
    pub fn segments(&self) -> Vec<(usize, usize, usize)> {
        self.starts()
            .into_iter()
            .zip(&self.sizes)
            .zip(&self.roles)
            .map(|((s, n), r)| (s, *n, r.stream()))
            .collect()
    }
}

/// `mask[i·T + j]` is true iff `chunk(j) ≤ chunk(i)`.
pub fn build_fwca_mask(layout: &ChunkLayout) -> Rc<[bool]> {
    let chunk = layout.chunk_of_tokens();
    let t = chunk.len();
    let mut mask = Vec::with_capacity(t * t);
    for &ci in &chunk {
        mask.extend(chunk.iter().map(|&cj| cj <= ci));
    }
    Rc::from(mask)
}

/// How masked attention is evaluated. Both give the same values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionPath {
    /// Full `T×T` scores followed by a masked softmax.
    #[default]
    Masked,
    /// Scores only for allowed pairs: each chunk against its causal prefix.
    Chunked,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    /// `alpha / rank`.
    pub scale: f64,
}

/// Frozen `x·W + b` with one trainable low-rank correction per stream.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub adapters: Vec<LoraAdapter>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        streams: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            Tensor::randn(&[d_in, d_out], (d_in as f64).powf(-0.5), rng),
            false,
        );
        let b = store.add(
            format!("{name}.b"),
            Tensor::randn(&[d_out], 0.02, rng),
            false,
        );
        let adapters = (0..streams)
            .map(|s| LoraAdapter {
                a: store.add(
                    format!("{name}.lora{s}.a"),
                    Tensor::randn(&[d_in, rank], (d_in as f64).powf(-0.5), rng),
                    true,
                ),
                b: store.add(
                    format!("{name}.lora{s}.b"),
                    Tensor::zeros(&[rank, d_out]),
                    true,
                ),
                rank,
                scale: alpha / rank as f64,
            })
            .collect();
        Self {
            w,
            b,
            adapters,
            d_in,
            d_out,
        }
    }

    /// Applies the projection with per-segment adapters; `segments` must tile
    /// the rows of `x` in order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        segments: &[(usize, usize, usize)],
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let base = tape.matmul(x, w)?;
        let base = tape.add_row(base, b)?;
        let mut deltas = Vec::with_capacity(segments.len());
        for &(start, len, stream) in segments {
            let xs = if segments.len() == 1 {
                x
            } else {
                tape.slice_rows(x, start, len)?
            };
            deltas.push(adapter_delta(tape, store, xs, &self.adapters[stream])?);
        }
        let delta = if deltas.len() == 1 {
            deltas[0]
        } else {
            tape.concat_rows(&deltas)?
        };
        tape.add(base, delta)
    }

    pub fn frozen_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn adapter_params(&self) -> usize {
        self.adapters
            .iter()
            .map(|a| a.rank * (self.d_in + self.d_out))
            .sum()
    }
}

fn adapter_delta(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    adapter: &LoraAdapter,
) -> Result<Var> {
    let a = tape.param(store, adapter.a);
    let b = tape.param(store, adapter.b);
    let xa = tape.matmul(x, a)?;
    let xab = tape.matmul(xa, b)?;
    Ok(tape.scale(xab, adapter.scale))
}

/// `y = x·W + b + (α/r)·x·A·B` for a single adapter.
pub fn lora_linear(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    w: ParamId,
    b: ParamId,
    adapter: &LoraAdapter,
) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let base = tape.matmul(x, wv)?;
    let base = tape.add_row(base, bv)?;
    let delta = adapter_delta(tape, store, x, adapter)?;
    tape.add(base, delta)
}

/// Linear patch projection plus a positional table shared by all frames.
///
/// The table is sized for the search grid; smaller grids use its top-left
/// block.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub w: ParamId,
    pub b: ParamId,
    pub pos: ParamId,
    pub patch_size: usize,
    pub pos_rows: usize,
    pub pos_cols: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        patch_size: usize,
        table: PatchGrid,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let pin = patch_size * patch_size;
        Self {
            w: store.add(
                format!("{name}.w"),
                Tensor::randn(&[pin, dim], (pin as f64).powf(-0.5), rng),
                false,
            ),
            b: store.add(format!("{name}.b"), Tensor::randn(&[dim], 0.02, rng), false),
            pos: store.add(
                format!("{name}.pos"),
                Tensor::randn(&[table.tokens(), dim], 0.1, rng),
                false,
            ),
            patch_size,
            pos_rows: table.rows,
            pos_cols: table.cols,
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &GrayImage,
        grid: &PatchGrid,
    ) -> Result<Var> {
        if grid.patch_size != self.patch_size
            || grid.rows > self.pos_rows
            || grid.cols > self.pos_cols
        {
            return Err(Error::shape(
                "patch_embed",
                &[grid.rows, grid.cols, grid.patch_size],
                &[self.pos_rows, self.pos_cols, self.patch_size],
            ));
        }
        let patches = tape.constant(grid.patches(image)?);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let x = tape.matmul(patches, w)?;
        let x = tape.add_row(x, b)?;
        let pos = tape.param(store, self.pos);
        let pos = if grid.cols == self.pos_cols {
            tape.slice_rows(pos, 0, grid.rows * grid.cols)?
        } else {
            let rows = (0..grid.rows)
                .map(|r| tape.slice_rows(pos, r * self.pos_cols, grid.cols))
                .collect::<Result<Vec<_>>>()?;
            tape.concat_rows(&rows)?
        };
        tape.add(x, pos)
    }

    pub fn params(&self) -> (usize, usize) {
        let frozen = self.patch_size * self.patch_size * self.dim
            + self.dim
            + self.pos_rows * self.pos_cols * self.dim;
        (0, frozen)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub ln2: LayerNormParams,
    pub fc1: LoraLinear,
    pub fc2: LoraLinear,
    pub heads: usize,
}

/// Per-call knobs for a backbone pass.
#[derive(Default)]
pub struct PassOptions<'a> {
    pub path: AttentionPath,
    /// Source of drop-path decisions; `None` disables drop-path.
    pub drop_rng: Option<&'a mut dyn rand::RngCore>,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.embed_dim;
        let (r, a) = (cfg.lora_rank, cfg.lora_alpha);
        let lin = |store: &mut ParamStore, n: &str, i, o, rng: &mut R| {
            LoraLinear::new(
                store,
                &format!("{name}.{n}"),
                i,
                o,
                NUM_STREAMS,
                r.min(i).min(o),
                a,
                rng,
            )
        };
        Self {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), d),
            q: lin(store, "attn.q", d, d, rng),
            k: lin(store, "attn.k", d, d, rng),
            v: lin(store, "attn.v", d, d, rng),
            o: lin(store, "attn.o", d, d, rng),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), d),
            fc1: lin(store, "mlp.fc1", d, cfg.mlp_dim(), rng),
            fc2: lin(store, "mlp.fc2", cfg.mlp_dim(), d, rng),
            heads: cfg.heads,
        }
    }

    pub fn linears(&self) -> [&LoraLinear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.fc1, &self.fc2]
    }

    /// Multi-head attention under the frame-wise causal mask.
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        layout: &ChunkLayout,
        mask: &Rc<[bool]>,
        path: AttentionPath,
    ) -> Result<Var> {
        let segments = layout.segments();
        let q = self.q.forward(tape, store, x, &segments)?;
        let k = self.k.forward(tape, store, x, &segments)?;
        let v = self.v.forward(tape, store, x, &segments)?;
        let d = tape.value(q).cols();
        let dh = d / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let out = match path {
                AttentionPath::Masked => {
                    let kt = tape.transpose(kh)?;
                    let s = tape.matmul(qh, kt)?;
                    let s = tape.scale(s, inv);
                    let p = tape.softmax_masked(s, mask.clone())?;
                    tape.matmul(p, vh)?
                }
                AttentionPath::Chunked => {
                    let mut rows = Vec::with_capacity(layout.num_chunks());
                    for (start, len, _) in &segments {
                        let end = start + len;
                        let qc = tape.slice_rows(qh, *start, *len)?;
                        let kc = tape.slice_rows(kh, 0, end)?;
                        let vc = tape.slice_rows(vh, 0, end)?;
                        let kt = tape.transpose(kc)?;
                        let s = tape.matmul(qc, kt)?;
                        let s = tape.scale(s, inv);
                        let p = tape.softmax_masked(s, Rc::from(vec![true; len * end]))?;
                        rows.push(tape.matmul(p, vc)?);
                    }
                    if rows.len() == 1 {
                        rows[0]
                    } else {
                        tape.concat_rows(&rows)?
                    }
                }
            };
            outs.push(out);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.o.forward(tape, store, merged, &segments)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        layout: &ChunkLayout,
        mask: &Rc<[bool]>,
        opts: &mut PassOptions<'_>,
        drop_path: f64,
    ) -> Result<Var> {
        let t = tape.value(x).rows();
        if t != layout.total() {
            return Err(Error::Layout(format!(
                "{t} tokens for a layout of {}",
                layout.total()
            )));
        }
        let segments = layout.segments();
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attention(tape, store, h, layout, mask, opts.path)?;
        let a = drop_branch(tape, a, drop_path, opts);
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h, &segments)?;
        let h = tape.gelu(h);
        let m = self.fc2.forward(tape, store, h, &segments)?;
        let m = drop_branch(tape, m, drop_path, opts);
        tape.add(x, m)
    }
}

fn drop_branch(tape: &mut Tape, branch: Var, p: f64, opts: &mut PassOptions<'_>) -> Var {
    match opts.drop_rng.as_deref_mut() {
        Some(rng) if p > 0.0 => {
            if rng.gen::<f64>() < p {
                tape.scale(branch, 0.0)
            } else {
                tape.scale(branch, 1.0 / (1.0 - p))
            }
        }
        _ => branch,
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_embed: PatchEmbed,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNormParams,
}

impl Backbone {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let patch_embed = PatchEmbed::new(
            store,
            "backbone.patch_embed",
            config.patch_size,
            config.search_grid(),
            config.embed_dim,
            rng,
        );
        let blocks = (0..config.depth)
            .map(|i| Block::new(store, &format!("backbone.blocks.{i}"), config, rng))
            .collect();
        let final_norm = LayerNormParams::new(store, "backbone.norm", config.embed_dim);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            blocks,
            final_norm,
        })
    }

    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, image: &GrayImage) -> Result<Var> {
        let grid = PatchGrid::new(image.width(), image.height(), self.config.patch_size)?;
        self.patch_embed.forward(tape, store, image, &grid)
    }

    /// Runs every block under the layout's mask, then the final norm.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        layout: &ChunkLayout,
        opts: &mut PassOptions<'_>,
    ) -> Result<Var> {
        let mask = build_fwca_mask(layout);
        let mut x = tokens;
        for block in &self.blocks {
            x = block.forward(tape, store, x, layout, &mask, opts, self.config.drop_path)?;
        }
        self.final_norm.forward(tape, store, x)
    }
}
