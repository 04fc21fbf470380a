use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{AttentionPath, PassOptions};
use crate::geometry::{GrayImage, PatchGrid, TokenMask};
use crate::guidance::flow_code;
use crate::numerics::{macs, GradMode, ParamStore, Tape};
use crate::tracker::{FrameInput, StepInput, TrackerModel};

fn frame(size: usize, patch: usize, r: &mut ChaCha8Rng) -> FrameInput {
    let image = GrayImage::from_fn(size, size, |_, _| 0.0);
    let mut image = image;
    for v in image.data_mut() {
        *v = r.gen_range(0.0..1.0);
    }
    let grid = PatchGrid::square(size, patch).unwrap();
    FrameInput {
        image,
        mask: TokenMask {
            bits: (0..grid.tokens()).map(|_| r.gen_bool(0.5)).collect(),
        },
    }
}

fn layout(sizes: &[usize]) -> ChunkLayout {
    ChunkLayout::from_sizes(sizes).unwrap()
}

/// Runs one forward step and returns the MACs it executed.
fn instrumented(cfg: &ModelConfig, path: AttentionPath, seed: u64) -> (u64, ParamStore) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = TrackerModel::new(&mut store, cfg.clone(), &mut r).unwrap();
    let bb = &cfg.backbone;
    let template = frame(bb.template_size, bb.patch_size, &mut r);
    let refs: Vec<FrameInput> = (0..cfg.num_references)
        .map(|_| frame(bb.template_size, bb.patch_size, &mut r))
        .collect();
    let search = frame(bb.search_size, bb.patch_size, &mut r).image;
    let flow = (cfg.temporal_module && cfg.guidance.mode == PriorMode::Flow)
        .then(|| flow_code(&refs[0].image, &template.image, bb.patch_size).unwrap());
    let input = StepInput {
        template: &template,
        references: refs.iter().collect(),
        search: &search,
        gate_override: [None; 3],
        momentum: Some([0.1, -0.2, 0.3, 0.4]),
        flow,
    };
    let mut tape = Tape::with_mode(GradMode::Off);
    let mut opts = PassOptions {
        path,
        drop_rng: None,
    };
    let (out, n) = macs::measure(|| model.forward(&mut tape, &store, &input, &mut opts));
    out.unwrap();
    (n, store)
}

fn toy_variants() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig::default();
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", base.clone()),
        ("no_temporal", with(&|c| c.temporal_module = false)),
        (
            "fixed_threshold",
            with(&|c| c.gate.mode = GateMode::FixedThreshold),
        ),
        ("unanchored", with(&|c| c.gate.anchor_template = false)),
        ("no_base", with(&|c| c.guidance.mode = PriorMode::NoBase)),
        ("concat", with(&|c| c.guidance.mode = PriorMode::Concat)),
        ("momentum", with(&|c| c.guidance.mode = PriorMode::Momentum)),
        ("flow", with(&|c| c.guidance.mode = PriorMode::Flow)),
        ("one_reference", with(&|c| c.num_references = 1)),
        ("two_priors", with(&|c| c.guidance.num_priors = 2)),
        (
            "deep_rank8",
            with(&|c| {
                c.backbone.depth = 3;
                c.backbone.lora_rank = 8;
                c.head_hidden = 16;
            }),
        ),
        ("no_blocks", with(&|c| c.backbone.depth = 0)),
    ]
}

#[test]
fn linear_cost_is_product() {
    assert_eq!(count_linear(1, 2, 3), 6);
    assert_eq!(count_linear(0, 7, 7), 0);
}

#[test]
fn single_chunk_costs_the_same_under_both_modes() {
    let l = layout(&[5]);
    assert_eq!(
        count_attention(&l, 8, 2, AttentionMode::Full),
        count_attention(&l, 8, 2, AttentionMode::Fwca)
    );
    assert_eq!(count_attention(&l, 8, 2, AttentionMode::Full), 2 * 25 * 8);
}

#[test]
fn two_chunk_attention_example() {
    let l = layout(&[2, 2]);
    // pairs: 2·2 + 2·4 = 12
    assert_eq!(count_attention(&l, 1, 1, AttentionMode::Fwca), 24);
    assert_eq!(count_attention(&l, 1, 1, AttentionMode::Full), 32);
}

#[test]
fn gate_row_matches_hand_count() {
    let cfg = ModelConfig::default();
    let r = report(&cfg, AttentionMode::Fwca).unwrap();
    let gate = r
        .rows
        .iter()
        .find(|r| r.layer == "calibrator.gate")
        .unwrap();
    assert_eq!(gate.params_trainable, 3 * 32 * 32 + 32 + 32 * 3 + 3);
    assert_eq!(gate.macs, 3 * 32 * 32 + 32 * 3);
}

#[test]
fn report_parameter_totals_match_model() {
    for (name, cfg) in toy_variants() {
        let mut store = ParamStore::new();
        TrackerModel::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let r = report(&cfg, AttentionMode::Fwca).unwrap();
        assert_eq!(
            r.total_trainable(),
            store.count(true) as u64,
            "{name} trainable"
        );
        assert_eq!(r.total_frozen(), store.count(false) as u64, "{name} frozen");
    }
}

#[test]
fn report_matches_instrumented_forward() {
    for (i, (name, cfg)) in toy_variants().into_iter().enumerate() {
        let fwca = report(&cfg, AttentionMode::Fwca).unwrap().total_macs();
        let full = report(&cfg, AttentionMode::Full).unwrap().total_macs();
        let (chunked, _) = instrumented(&cfg, AttentionPath::Chunked, i as u64);
        let (masked, _) = instrumented(&cfg, AttentionPath::Masked, i as u64);
        assert_eq!(chunked, fwca, "{name} chunked");
        assert_eq!(masked, full, "{name} masked");
    }
}

#[test]
fn attention_rows_sum_to_attention_total() {
    let r = report(&ModelConfig::default(), AttentionMode::Fwca).unwrap();
    let s: u64 = r
        .rows
        .iter()
        .filter(|r| r.layer.ends_with("attn.scores"))
        .map(|r| r.macs)
        .sum();
    assert_eq!(s, r.attention_macs);
}

#[test]
fn base_scale_estimate() {
    let r = report(&base_scale_config(), AttentionMode::Fwca).unwrap();
    let g = r.total_macs() as f64 / 1e9;
    assert!((g - 53.8).abs() <= 0.15 * 53.8, "{g} GMACs");
    assert!(r.total_trainable() < r.total_frozen());
}

#[test]
fn csv_has_header_rows_and_total() {
    let r = report(&ModelConfig::default(), AttentionMode::Full).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,macs,params_trainable,params_frozen");
    assert_eq!(lines.len(), r.rows.len() + 2);
    assert_eq!(
        *lines.last().unwrap(),
        format!(
            "total,{},{},{}",
            r.total_macs(),
            r.total_trainable(),
            r.total_frozen()
        )
    );
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
}

proptest! {
    #[test]
    fn fwca_never_exceeds_full(sizes in prop::collection::vec(1usize..20, 2..6), d in 1usize..64) {
        let l = layout(&sizes);
        let f = count_attention(&l, d, 1, AttentionMode::Fwca);
        let full = count_attention(&l, d, 1, AttentionMode::Full);
        prop_assert!(f < full);
    }

    #[test]
    fn attention_grows_with_any_chunk(sizes in prop::collection::vec(1usize..20, 1..6), pick in 0usize..6, d in 1usize..32) {
        let l = layout(&sizes);
        let mut bigger = sizes.clone();
        let i = pick % sizes.len();
        bigger[i] += 1;
        let l2 = layout(&bigger);
        for mode in [AttentionMode::Full, AttentionMode::Fwca] {
            prop_assert!(count_attention(&l2, d, 1, mode) > count_attention(&l, d, 1, mode));
        }
    }
}
