//! Analytic multiply-accumulate and parameter accounting.
//!
//! One MAC is one multiply-add inside a matrix product. Norms, softmax,
//! activations and bias additions count zero MACs; biases do count as
//! parameters.

use std::fmt::Write as _;

use crate::backbone::{BackboneConfig, ChunkLayout, ChunkRole, NUM_STREAMS};
use crate::error::Result;
use crate::guidance::{PriorMode, HISTORY_FRAMES, NUM_TOKEN_TYPES};
use crate::reliability::{GateMode, NUM_REFERENCES};
use crate::tracker::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Every query scores every key.
    Full,
    /// Only pairs the frame-wise causal mask allows.
    Fwca,
}

/// `t·d_in·d_out`.
pub fn count_linear(tokens: usize, d_in: usize, d_out: usize) -> u64 {
    (tokens * d_in * d_out) as u64
}

/// Score and value MACs (`QKᵀ` plus `PV`) summed over heads; projections are
/// counted separately.
pub fn count_attention(
    layout: &ChunkLayout,
    dim: usize,
    _heads: usize,
    mode: AttentionMode,
) -> u64 {
    let t = layout.total() as u64;
    let d = dim as u64;
    match mode {
        AttentionMode::Full => 2 * t * t * d,
        AttentionMode::Fwca => {
            let mut prefix = 0u64;
            let mut pairs = 0u64;
            for &n in layout.sizes() {
                prefix += n as u64;
                pairs += n as u64 * prefix;
            }
            2 * d * pairs
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub macs: u64,
    pub params_trainable: u64,
    pub params_frozen: u64,
}

impl CostRow {
    fn new(layer: impl Into<String>, macs: u64, params_trainable: u64, params_frozen: u64) -> Self {
        Self {
            layer: layer.into(),
            macs,
            params_trainable,
            params_frozen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Attention score MACs over all blocks, also included in `rows`.
    pub attention_macs: u64,
    pub mode: AttentionMode,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_trainable(&self) -> u64 {
        self.rows.iter().map(|r| r.params_trainable).sum()
    }

    pub fn total_frozen(&self) -> u64 {
        self.rows.iter().map(|r| r.params_frozen).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,macs,params_trainable,params_frozen\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.layer, r.macs, r.params_trainable, r.params_frozen
            );
        }
        let _ = writeln!(
            s,
            "total,{},{},{}",
            self.total_macs(),
            self.total_trainable(),
            self.total_frozen()
        );
        s
    }
}

/// Token layout of one tracking step under `cfg`.
pub fn model_layout(cfg: &ModelConfig) -> Result<ChunkLayout> {
    let bb = &cfg.backbone;
    let nt = bb.template_grid().tokens();
    let k = cfg.num_priors();
    let mut sizes = vec![k + nt];
    let mut roles = vec![ChunkRole::PriorTemplate { priors: k }];
    for i in 0..cfg.num_references {
        sizes.push(nt);
        roles.push(ChunkRole::Reference(i + 1));
    }
    sizes.push(bb.search_grid().tokens());
    roles.push(ChunkRole::Search);
    ChunkLayout::new(sizes, roles)
}

fn linear_rows(
    rows: &mut Vec<CostRow>,
    name: &str,
    t: usize,
    d_in: usize,
    d_out: usize,
    bb: &BackboneConfig,
) {
    let r = bb.lora_rank.min(d_in).min(d_out);
    rows.push(CostRow::new(
        name,
        count_linear(t, d_in, d_out),
        0,
        (d_in * d_out + d_out) as u64,
    ));
    rows.push(CostRow::new(
        format!("{name}.lora"),
        count_linear(t, d_in, r) + count_linear(t, r, d_out),
        (NUM_STREAMS * r * (d_in + d_out)) as u64,
        0,
    ));
}

fn mlp3_row(name: &str, t: usize, d: usize, h: usize, out: usize) -> CostRow {
    let macs = count_linear(t, d, h) + count_linear(t, h, h) + count_linear(t, h, out);
    let params = d * h + h + h * h + h + h * out + out;
    CostRow::new(name, macs, params as u64, 0)
}

/// Per-layer costs of one forward tracking step.
pub fn report(cfg: &ModelConfig, mode: AttentionMode) -> Result<CostReport> {
    cfg.validate()?;
    let bb = &cfg.backbone;
    let d = bb.embed_dim;
    let p2 = bb.patch_size * bb.patch_size;
    let layout = model_layout(cfg)?;
    let t = layout.total();
    let k = cfg.num_priors();
    let visual = t - k;
    let ns = bb.search_grid().tokens();
    let mut rows = Vec::new();

    rows.push(CostRow::new(
        "patch_embed",
        count_linear(visual, p2, d),
        0,
        (p2 * d + d + bb.search_grid().tokens() * d) as u64,
    ));
    let mut attention_macs = 0;
    for i in 0..bb.depth {
        let name = format!("blocks.{i}");
        rows.push(CostRow::new(format!("{name}.norms"), 0, 0, (4 * d) as u64));
        for proj in ["q", "k", "v"] {
            linear_rows(&mut rows, &format!("{name}.attn.{proj}"), t, d, d, bb);
        }
        let a = count_attention(&layout, d, bb.heads, mode);
        attention_macs += a;
        rows.push(CostRow::new(format!("{name}.attn.scores"), a, 0, 0));
        linear_rows(&mut rows, &format!("{name}.attn.o"), t, d, d, bb);
        linear_rows(
            &mut rows,
            &format!("{name}.mlp.fc1"),
            t,
            d,
            bb.mlp_dim(),
            bb,
        );
        linear_rows(
            &mut rows,
            &format!("{name}.mlp.fc2"),
            t,
            bb.mlp_dim(),
            d,
            bb,
        );
    }
    rows.push(CostRow::new("norm", 0, 0, (2 * d) as u64));

    if cfg.temporal_module {
        let g = &cfg.guidance;
        if g.mode.uses_summaries() && cfg.gate.mode == GateMode::Learned {
            let frames = if cfg.gate.anchor_template {
                NUM_REFERENCES
            } else {
                NUM_REFERENCES + 1
            };
            let h = cfg.gate.hidden;
            rows.push(CostRow::new(
                "calibrator.gate",
                count_linear(1, frames * d, h) + count_linear(1, h, frames),
                (frames * d * h + h + h * frames + frames) as u64,
                0,
            ));
        }
        let kd = g.num_priors * d;
        match g.mode {
            PriorMode::Modulated | PriorMode::NoBase => {
                let h = g.hidden;
                rows.push(CostRow::new(
                    "guidance.modulator",
                    count_linear(1, HISTORY_FRAMES * d, h) + count_linear(1, h, kd),
                    (HISTORY_FRAMES * d * h + h + h * kd + kd) as u64,
                    0,
                ));
            }
            PriorMode::Momentum => rows.push(CostRow::new(
                "guidance.momentum",
                count_linear(1, 4, d),
                (4 * d) as u64,
                0,
            )),
            PriorMode::Flow => rows.push(CostRow::new(
                "guidance.flow",
                count_linear(1, p2, d),
                (p2 * d) as u64,
                0,
            )),
            PriorMode::Concat => {}
        }
        let base = if matches!(g.mode, PriorMode::NoBase | PriorMode::Concat) {
            0
        } else {
            kd
        };
        rows.push(CostRow::new(
            "guidance.embeddings",
            0,
            (base + kd + NUM_TOKEN_TYPES * d) as u64,
            0,
        ));
    }
    rows.push(mlp3_row("head.cls", ns, d, cfg.head_hidden, 1));
    rows.push(mlp3_row("head.reg", ns, d, cfg.head_hidden, 4));
    Ok(CostReport {
        rows,
        attention_macs,
        mode,
    })
}

/// ViT-B scale: D 768, depth 12, 12 heads, patch 14, 112-pixel template and
/// references, 224-pixel search region, four prior tokens, adapter rank 64.
pub fn base_scale_config() -> ModelConfig {
    let backbone = BackboneConfig {
        depth: 12,
        embed_dim: 768,
        heads: 12,
        mlp_ratio: 4,
        patch_size: 14,
        template_size: 112,
        search_size: 224,
        lora_rank: 64,
        lora_alpha: 64.0,
        drop_path: 0.0,
    };
    let mut cfg = ModelConfig {
        backbone,
        ..ModelConfig::default()
    };
    cfg.gate.hidden = 768;
    cfg.guidance.hidden = 2 * 768;
    cfg.head_hidden = 768;
    cfg
}

#[cfg(test)]
mod tests;
