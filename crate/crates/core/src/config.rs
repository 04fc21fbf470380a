//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; see [`KEYS`]. Unknown keys are an error.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::guidance::PriorMode;
use crate::reliability::{GateMode, NUM_REFERENCES};
use crate::tracker::{HannMode, ModelConfig, TrainConfig};

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "seed for initialization, clip sampling and scenario draws",
    ),
    (
        "scenario",
        "corruption",
        "simworld preset used by track, eval and ablate",
    ),
    (
        "inject",
        "true",
        "record injected boxes of corrupted frames in the tracker history",
    ),
    (
        "eval_scenarios",
        "20",
        "number of held-out scenarios scored by ablate",
    ),
    ("eval_seed", "10000", "seed of the first held-out scenario"),
    ("model.depth", "2", "transformer blocks"),
    ("model.embed_dim", "32", "token width D"),
    ("model.heads", "2", "attention heads"),
    ("model.mlp_ratio", "4", "block MLP width as a multiple of D"),
    ("model.patch_size", "4", "patch side in pixels"),
    (
        "model.template_size",
        "16",
        "template and reference crop side in pixels",
    ),
    ("model.search_size", "32", "search crop side in pixels"),
    ("model.lora_rank", "4", "adapter rank"),
    (
        "model.lora_alpha",
        "4",
        "adapter scale numerator; updates are scaled by alpha / rank",
    ),
    (
        "model.drop_path",
        "0",
        "stochastic depth rate during training",
    ),
    (
        "model.temporal_module",
        "true",
        "reliability gate and prior tokens; false is the baseline",
    ),
    (
        "model.num_references",
        "3",
        "reference frames per step, 0 to 3",
    ),
    (
        "model.gate_hidden",
        "auto",
        "gate MLP width; auto follows embed_dim",
    ),
    (
        "model.gate_epsilon",
        "1e-6",
        "masked-pool denominator guard",
    ),
    (
        "model.gate_anchor",
        "true",
        "pin the template confidence to 1",
    ),
    (
        "model.gate_mode",
        "learned",
        "learned or fixed (median summary-norm threshold)",
    ),
    ("model.num_priors", "4", "prior tokens K"),
    (
        "model.guidance_hidden",
        "auto",
        "modulator width; auto is twice embed_dim",
    ),
    (
        "model.prior_mode",
        "modulated",
        "modulated, no_base, concat, momentum or flow",
    ),
    (
        "model.head_hidden",
        "auto",
        "head MLP width; auto follows embed_dim",
    ),
    ("model.hann_coef", "0.45", "window penalty weight in [0, 1]"),
    ("model.hann_mode", "blend", "blend or multiply"),
    (
        "model.search_factor",
        "4",
        "search crop area as a multiple of the box area",
    ),
    (
        "model.template_factor",
        "2",
        "template and reference crop area as a multiple of the box area",
    ),
    ("model.bce_coef", "1", "classification loss weight"),
    ("model.giou_coef", "1", "box loss weight"),
    (
        "model.gate_threshold",
        "0.5",
        "minimum score for reference slot B",
    ),
    (
        "model.reference_stride",
        "5",
        "steps back for reference slot C",
    ),
    ("model.history_capacity", "64", "tracker history length"),
    ("train.epochs", "50", "training epochs"),
    ("train.clips_per_epoch", "128", "clips drawn per epoch"),
    ("train.batch_size", "4", "clips per optimizer step"),
    ("train.lr", "0.01", "peak learning rate"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.warmup_epochs", "2", "linear learning-rate warmup"),
    (
        "train.clip_norm",
        "5",
        "global gradient-norm cap; 0 disables",
    ),
    (
        "train.search_jitter",
        "0.25",
        "search-center jitter as a fraction of the box",
    ),
    (
        "train.reference_jitter",
        "0.05",
        "clean reference box jitter as a fraction of the box",
    ),
    (
        "train.gate_lr_scale",
        "1",
        "learning-rate multiplier for the gate parameters",
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: String,
    pub inject: bool,
    pub eval_scenarios: usize,
    pub eval_seed: u64,
    model: ModelConfig,
    gate_hidden: Option<usize>,
    guidance_hidden: Option<usize>,
    head_hidden: Option<usize>,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
}

fn auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            scenario: String::new(),
            inject: true,
            eval_scenarios: 0,
            eval_seed: 0,
            model: ModelConfig::default(),
            gate_hidden: None,
            guidance_hidden: None,
            head_hidden: None,
            train: TrainConfig::default(),
        };
        for (k, v, _) in KEYS {
            c.set(k, v).expect("documented defaults parse");
        }
        c
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "scenario" => self.scenario = value.to_string(),
            "inject" => self.inject = parse(key, value)?,
            "eval_scenarios" => self.eval_scenarios = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            "model.depth" => m.backbone.depth = parse(key, value)?,
            "model.embed_dim" => m.backbone.embed_dim = parse(key, value)?,
            "model.heads" => m.backbone.heads = parse(key, value)?,
            "model.mlp_ratio" => m.backbone.mlp_ratio = parse(key, value)?,
            "model.patch_size" => m.backbone.patch_size = parse(key, value)?,
            "model.template_size" => m.backbone.template_size = parse(key, value)?,
            "model.search_size" => m.backbone.search_size = parse(key, value)?,
            "model.lora_rank" => m.backbone.lora_rank = parse(key, value)?,
            "model.lora_alpha" => m.backbone.lora_alpha = parse(key, value)?,
            "model.drop_path" => m.backbone.drop_path = parse(key, value)?,
            "model.temporal_module" => m.temporal_module = parse(key, value)?,
            "model.num_references" => m.num_references = parse(key, value)?,
            "model.gate_hidden" => self.gate_hidden = auto(key, value)?,
            "model.gate_epsilon" => m.gate.epsilon = parse(key, value)?,
            "model.gate_anchor" => m.gate.anchor_template = parse(key, value)?,
            "model.gate_mode" => {
                m.gate.mode = match value {
                    "learned" => GateMode::Learned,
                    "fixed" => GateMode::FixedThreshold,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}={value}: expected learned or fixed"
                        )))
                    }
                }
            }
            "model.num_priors" => m.guidance.num_priors = parse(key, value)?,
            "model.guidance_hidden" => self.guidance_hidden = auto(key, value)?,
            "model.prior_mode" => {
                m.guidance.mode = match value {
                    "modulated" => PriorMode::Modulated,
                    "no_base" => PriorMode::NoBase,
                    "concat" => PriorMode::Concat,
                    "momentum" => PriorMode::Momentum,
                    "flow" => PriorMode::Flow,
                    _ => return Err(Error::Config(format!("{key}={value}: unknown prior mode"))),
                }
            }
            "model.head_hidden" => self.head_hidden = auto(key, value)?,
            "model.hann_coef" => m.hann_coef = parse(key, value)?,
            "model.hann_mode" => {
                m.hann_mode = match value {
                    "blend" => HannMode::Blend,
                    "multiply" => HannMode::Multiply,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}={value}: expected blend or multiply"
                        )))
                    }
                }
            }
            "model.search_factor" => m.search_factor = parse(key, value)?,
            "model.template_factor" => m.template_factor = parse(key, value)?,
            "model.bce_coef" => m.bce_coef = parse(key, value)?,
            "model.giou_coef" => m.giou_coef = parse(key, value)?,
            "model.gate_threshold" => m.gate_threshold = parse(key, value)?,
            "model.reference_stride" => m.reference_stride = parse(key, value)?,
            "model.history_capacity" => m.history_capacity = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.clips_per_epoch" => t.clips_per_epoch = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "train.clip_norm" => t.clip_norm = parse(key, value)?,
            "train.search_jitter" => t.search_jitter = parse(key, value)?,
            "train.reference_jitter" => t.reference_jitter = parse(key, value)?,
            "train.gate_lr_scale" => t.gate_lr_scale = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            c.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The model configuration with `auto` widths resolved.
    pub fn model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        let d = m.backbone.embed_dim;
        m.gate.hidden = self.gate_hidden.unwrap_or(d);
        m.guidance.hidden = self.guidance_hidden.unwrap_or(2 * d);
        m.head_hidden = self.head_hidden.unwrap_or(d);
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        if self.eval_scenarios == 0 {
            return Err(Error::Config("eval_scenarios must be positive".into()));
        }
        Ok(())
    }

    /// Applies an ablation variant.
    ///
    /// `a` fixed threshold, `b` template gated too, `c` no base tokens,
    /// `d` concatenated summaries, `e` baseline, `f` full model,
    /// `momentum` and `flow` alternative history signals, `frames-N` with
    /// `N` total frames (template, references and search).
    pub fn apply_variant(&mut self, name: &str) -> Result<()> {
        let pairs: Vec<String> = match name {
            "a" => vec!["model.gate_mode=fixed".into()],
            "b" => vec!["model.gate_anchor=false".into()],
            "c" => vec!["model.prior_mode=no_base".into()],
            "d" => vec![
                "model.prior_mode=concat".into(),
                format!("model.num_priors={}", NUM_REFERENCES + 1),
            ],
            "e" => vec!["model.temporal_module=false".into()],
            "f" => vec![],
            "momentum" => vec!["model.prior_mode=momentum".into()],
            "flow" => vec!["model.prior_mode=flow".into()],
            other => {
                let n: usize = other
                    .strip_prefix("frames-")
                    .and_then(|n| n.parse().ok())
                    .filter(|n| (2..=NUM_REFERENCES + 2).contains(n))
                    .ok_or_else(|| Error::Config(format!("unknown variant `{other}`")))?;
                vec![format!("model.num_references={}", n - 2)]
            }
        };
        for p in pairs {
            self.set_pair(&p)?;
        }
        Ok(())
    }

    /// A config file listing every key at its current value, with comments.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let current = self.values();
        for ((k, _, doc), (_, v)) in KEYS.iter().zip(current) {
            let _ = writeln!(s, "# {doc}\n{k}={v}");
        }
        s
    }

    fn values(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let b = &m.backbone;
        let t = &self.train;
        let w = |o: Option<usize>| o.map_or("auto".to_string(), |v| v.to_string());
        let vals = vec![
            self.seed.to_string(),
            self.scenario.clone(),
            self.inject.to_string(),
            self.eval_scenarios.to_string(),
            self.eval_seed.to_string(),
            b.depth.to_string(),
            b.embed_dim.to_string(),
            b.heads.to_string(),
            b.mlp_ratio.to_string(),
            b.patch_size.to_string(),
            b.template_size.to_string(),
            b.search_size.to_string(),
            b.lora_rank.to_string(),
            b.lora_alpha.to_string(),
            b.drop_path.to_string(),
            m.temporal_module.to_string(),
            m.num_references.to_string(),
            w(self.gate_hidden),
            m.gate.epsilon.to_string(),
            m.gate.anchor_template.to_string(),
            match m.gate.mode {
                GateMode::Learned => "learned",
                GateMode::FixedThreshold => "fixed",
            }
            .to_string(),
            m.guidance.num_priors.to_string(),
            w(self.guidance_hidden),
            match m.guidance.mode {
                PriorMode::Modulated => "modulated",
                PriorMode::NoBase => "no_base",
                PriorMode::Concat => "concat",
                PriorMode::Momentum => "momentum",
                PriorMode::Flow => "flow",
            }
            .to_string(),
            w(self.head_hidden),
            m.hann_coef.to_string(),
            match m.hann_mode {
                HannMode::Blend => "blend",
                HannMode::Multiply => "multiply",
            }
            .to_string(),
            m.search_factor.to_string(),
            m.template_factor.to_string(),
            m.bce_coef.to_string(),
            m.giou_coef.to_string(),
            m.gate_threshold.to_string(),
            m.reference_stride.to_string(),
            m.history_capacity.to_string(),
            t.epochs.to_string(),
            t.clips_per_epoch.to_string(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            t.momentum.to_string(),
            t.warmup_epochs.to_string(),
            t.clip_norm.to_string(),
            t.search_jitter.to_string(),
            t.reference_jitter.to_string(),
            t.gate_lr_scale.to_string(),
        ];
        KEYS.iter().map(|(k, _, _)| *k).zip(vals).collect()
    }
}
