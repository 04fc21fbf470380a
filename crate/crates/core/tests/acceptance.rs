//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.

use std::time::{Duration, Instant};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use priortrack::backbone::{
    build_fwca_mask, AttentionPath, Backbone, BackboneConfig, ChunkLayout, PassOptions,
    SEARCH_STREAM,
};
use priortrack::checkpoint;
use priortrack::cli;
use priortrack::config::RunConfig;
use priortrack::geometry::{BBox, GrayImage, PatchGrid, TokenMask};
use priortrack::guidance::PriorMode;
use priortrack::numerics::gradcheck::{numeric_grad_at, relative_error};
use priortrack::numerics::{macs, GradMode, ParamStore, Tape, Tensor};
use priortrack::profiler::{self, AttentionMode};
use priortrack::reliability::{summarize, Calibrator, GateConfig};
use priortrack::tracker::{train, FrameInput, ModelConfig, StepInput, TrackerModel};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_frame(size: usize, patch: usize, r: &mut ChaCha8Rng) -> FrameInput {
    let mut image = GrayImage::from_fn(size, size, |_, _| 0.0);
    for v in image.data_mut() {
        *v = r.gen_range(0.0..1.0);
    }
    let grid = PatchGrid::square(size, patch).unwrap();
    FrameInput {
        image,
        mask: TokenMask {
            bits: (0..grid.tokens()).map(|_| r.gen_bool(0.6)).collect(),
        },
    }
}

fn toy_3x3() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.template_size = 12;
    cfg.backbone.search_size = 12;
    cfg
}

fn gradient_suite() -> Outcome {
    let cfg = toy_3x3();
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let model = TrackerModel::new(&mut store, cfg.clone(), &mut r).unwrap();
    let ids: Vec<_> = store.ids().filter(|id| store.get(*id).trainable).collect();
    for id in &ids {
        let noise = Tensor::randn(store.value(*id).shape(), 0.05, &mut r);
        for (v, n) in store.value_mut(*id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let bb = &cfg.backbone;
    let template = random_frame(bb.template_size, bb.patch_size, &mut r);
    let refs: Vec<FrameInput> = (0..3)
        .map(|_| random_frame(bb.template_size, bb.patch_size, &mut r))
        .collect();
    let search = random_frame(bb.search_size, bb.patch_size, &mut r).image;
    let target = BBox::new(2.7, 3.9, 5.1, 4.6);
    let loss_of = |store: &ParamStore, mode: GradMode| {
        let mut tape = Tape::with_mode(mode);
        let input = StepInput {
            template: &template,
            references: refs.iter().collect(),
            search: &search,
            gate_override: [None; 3],
            momentum: None,
            flow: None,
        };
        let mut opts = PassOptions {
            path: AttentionPath::Chunked,
            drop_rng: None,
        };
        let out = model.forward(&mut tape, store, &input, &mut opts).unwrap();
        let (l, _, _) = model.loss(&mut tape, &out, &target).unwrap();
        (tape, l)
    };
    let (mut tape, l) = loss_of(&store, GradMode::Trainable);
    tape.backward(l, &mut store).unwrap();
    let mut worst = (0.0, String::new());
    let mut zero_groups = Vec::new();
    for id in &ids {
        let n = store.value(*id).len();
        let picks = sample_indices(&mut r, n, n.min(4)).into_vec();
        let mut probe = store.clone();
        let numeric = numeric_grad_at(store.value(*id), &picks, 1e-5, |v| {
            *probe.value_mut(*id) = v.clone();
            let (t, l) = loss_of(&probe, GradMode::Off);
            t.value(l).item()
        });
        let analytic: Vec<f64> = picks
            .iter()
            .map(|&i| store.get(*id).grad.data()[i])
            .collect();
        if store.get(*id).grad.norm() == 0.0 {
            zero_groups.push(store.get(*id).name.clone());
        }
        let err = relative_error(&Tensor::vector(analytic), &Tensor::vector(numeric));
        if err > worst.0 {
            worst = (err, store.get(*id).name.clone());
        }
    }
    // Only search tokens reach the heads, so in the last block the other
    // streams' query, output and MLP adapters cannot move the loss.
    let last = format!("backbone.blocks.{}.", bb.depth - 1);
    let search = format!(".lora{SEARCH_STREAM}.");
    let dead = |name: &str| {
        name.starts_with(&last)
            && ["attn.q", "attn.o", "mlp.fc1", "mlp.fc2"]
                .iter()
                .any(|l| name.contains(l))
            && name.contains(".lora")
            && !name.contains(&search)
    };
    let expected: Vec<String> = ids
        .iter()
        .map(|id| store.get(*id).name.clone())
        .filter(|n| dead(n))
        .collect();
    outcome(
        worst.0 < 1e-4 && zero_groups == expected,
        format!(
            "{} tensors, worst relative error {:.2e} ({}), zero-gradient groups {} (all in the unused last-block streams: {})",
            ids.len(),
            worst.0,
            worst.1,
            zero_groups.len(),
            zero_groups == expected
        ),
    )
}

fn fwca_causality() -> Outcome {
    let mut r = rng(2);
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, &cfg, &mut r).unwrap();
    let d = cfg.embed_dim;
    let mut checks = 0;
    for trial in 0..50 {
        let n = r.gen_range(2..6);
        let sizes: Vec<usize> = (0..n).map(|_| r.gen_range(1..6)).collect();
        let layout = ChunkLayout::from_sizes(&sizes).unwrap();
        let base = Tensor::randn(&[layout.total(), d], 1.0, &mut r);
        let c = r.gen_range(1..n);
        let start = layout.starts()[c];
        let mut pert = base.clone();
        for v in &mut pert.data_mut()[start * d..] {
            *v += r.gen_range(-3.0..3.0);
        }
        let path = if trial % 2 == 0 {
            AttentionPath::Masked
        } else {
            AttentionPath::Chunked
        };
        let run = |x: &Tensor| {
            let mut tape = Tape::with_mode(GradMode::Off);
            let v = tape.constant(x.clone());
            let mut opts = PassOptions {
                path,
                drop_rng: None,
            };
            let out = backbone
                .forward(&mut tape, &store, v, &layout, &mut opts)
                .unwrap();
            tape.value(out).data()[..start * d].to_vec()
        };
        if run(&base) != run(&pert) {
            return outcome(
                false,
                format!("chunk {c} of {sizes:?} leaked into earlier chunks"),
            );
        }
        checks += 1;
    }
    outcome(
        true,
        format!("{checks} perturbations, earlier chunks bit-identical"),
    )
}

fn anchoring() -> Outcome {
    let mut r = rng(3);
    let d = 8;
    let mut store = ParamStore::new();
    let anchored = Calibrator::new(&mut store, GateConfig::new(d), d, &mut r).unwrap();
    let mut loose_cfg = GateConfig::new(d);
    loose_cfg.anchor_template = false;
    let mut loose_store = ParamStore::new();
    let loose = Calibrator::new(&mut loose_store, loose_cfg, d, &mut r).unwrap();
    let mut all_one = true;
    let mut loose_moved = false;
    for _ in 0..1000 {
        let scale = r.gen_range(0.1..10.0);
        let mut tape = Tape::new();
        let s = [0; 4].map(|_| tape.constant(Tensor::randn(&[d], scale, &mut r)));
        let a = anchored
            .calibrate(&mut tape, &store, s, &[None; 3])
            .unwrap();
        let c0 = a.score_values(&tape)[0];
        all_one &= c0 == 1.0 && tape.value(a.calibrated[0]) == tape.value(s[0]);
        let b = loose
            .calibrate(&mut tape, &loose_store, s, &[None; 3])
            .unwrap();
        loose_moved |= b.score_values(&tape)[0] != 1.0;
    }
    outcome(
        all_one && loose_moved,
        format!("anchored c0 always 1: {all_one}; unanchored c0 differs from 1: {loose_moved}"),
    )
}

fn nullification() -> Outcome {
    let cfg = toy_3x3();
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let model = TrackerModel::new(&mut store, cfg.clone(), &mut r).unwrap();
    let bb = &cfg.backbone;
    for trial in 0..100 {
        let template = random_frame(bb.template_size, bb.patch_size, &mut r);
        let refs: Vec<FrameInput> = (0..3)
            .map(|_| random_frame(bb.template_size, bb.patch_size, &mut r))
            .collect();
        let search = random_frame(bb.search_size, bb.patch_size, &mut r).image;
        let slot = trial % 3;
        let mut over = [None; 3];
        over[slot] = Some(0.0);
        let mut replaced = refs.clone();
        replaced[slot] = random_frame(bb.template_size, bb.patch_size, &mut r);
        let priors = |refs: &[FrameInput]| {
            let mut tape = Tape::with_mode(GradMode::Off);
            let input = StepInput {
                template: &template,
                references: refs.iter().collect(),
                search: &search,
                gate_override: over,
                momentum: None,
                flow: None,
            };
            let mut opts = PassOptions {
                path: AttentionPath::Chunked,
                drop_rng: None,
            };
            let out = model.forward(&mut tape, &store, &input, &mut opts).unwrap();
            tape.value(out.prior_tokens.unwrap()).clone()
        };
        if priors(&refs) != priors(&replaced) {
            return outcome(
                false,
                format!("trial {trial}: priors moved with slot {slot}"),
            );
        }
    }
    outcome(true, "100 replacements, prior tokens bit-identical")
}

fn summarize_oracle() -> Outcome {
    let mut r = rng(5);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut zero_masks = 0;
    for i in 0..500 {
        let n = r.gen_range(1..12);
        let d = r.gen_range(1..9);
        let z = Tensor::randn(&[n, d], 2.0, &mut r);
        let bits: Vec<bool> = if i % 10 == 0 {
            zero_masks += 1;
            vec![false; n]
        } else {
            (0..n).map(|_| r.gen_bool(0.5)).collect()
        };
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let s = summarize(&mut tape, zv, &TokenMask { bits: bits.clone() }, eps).unwrap();
        let count: f64 = bits.iter().filter(|b| **b).count() as f64;
        for j in 0..d {
            let mut num = 0.0;
            for (k, &m) in bits.iter().enumerate() {
                num += z.data()[k * d + j] * if m { 1.0 } else { 0.0 };
            }
            worst = worst.max((num / (count + eps) - tape.value(s).data()[j]).abs());
        }
    }
    outcome(
        worst <= 1e-12,
        format!("500 pairs ({zero_masks} all-zero masks), max deviation {worst:.1e}"),
    )
}

fn mask_oracle() -> Outcome {
    let mut layouts = 0;
    let mut stack: Vec<Vec<usize>> = (1..=4).map(|s| vec![s]).collect();
    while let Some(sizes) = stack.pop() {
        let layout = ChunkLayout::from_sizes(&sizes).unwrap();
        let mask = build_fwca_mask(&layout);
        let chunk_of: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect();
        let t = chunk_of.len();
        for i in 0..t {
            for j in 0..t {
                if mask[i * t + j] != (chunk_of[j] <= chunk_of[i]) {
                    return outcome(false, format!("{sizes:?} disagrees at ({i}, {j})"));
                }
            }
        }
        layouts += 1;
        if sizes.len() < 5 {
            for s in 1..=4 {
                let mut next = sizes.clone();
                next.push(s);
                stack.push(next);
            }
        }
    }
    outcome(
        layouts == 4 + 16 + 64 + 256 + 1024,
        format!("{layouts} layouts match"),
    )
}

fn profiler_exactness() -> Outcome {
    let mut configs = Vec::new();
    for i in 0..10u64 {
        let mut c = ModelConfig::default();
        c.backbone.depth = (i % 3) as usize + 1;
        c.backbone.lora_rank = [2, 4, 8][(i % 3) as usize];
        c.num_references = (i % 4) as usize;
        c.guidance.mode = [
            PriorMode::Modulated,
            PriorMode::NoBase,
            PriorMode::Modulated,
            PriorMode::Concat,
            PriorMode::Momentum,
            PriorMode::Flow,
            PriorMode::Modulated,
            PriorMode::Modulated,
            PriorMode::Modulated,
            PriorMode::Modulated,
        ][i as usize];
        c.temporal_module = i != 8;
        c.gate.anchor_template = i != 9;
        c.head_hidden = 8 + 4 * i as usize;
        configs.push(c);
    }
    let mut mismatches = Vec::new();
    let mut not_cheaper = 0;
    for (i, cfg) in configs.iter().enumerate() {
        let mut r = rng(100 + i as u64);
        let mut store = ParamStore::new();
        let model = TrackerModel::new(&mut store, cfg.clone(), &mut r).unwrap();
        let bb = &cfg.backbone;
        let template = random_frame(bb.template_size, bb.patch_size, &mut r);
        let refs: Vec<FrameInput> = (0..cfg.num_references)
            .map(|_| random_frame(bb.template_size, bb.patch_size, &mut r))
            .collect();
        let search = random_frame(bb.search_size, bb.patch_size, &mut r).image;
        let flow = Some(Tensor::randn(&[bb.patch_size * bb.patch_size], 0.1, &mut r));
        for (path, mode) in [
            (AttentionPath::Chunked, AttentionMode::Fwca),
            (AttentionPath::Masked, AttentionMode::Full),
        ] {
            let input = StepInput {
                template: &template,
                references: refs.iter().collect(),
                search: &search,
                gate_override: [None; 3],
                momentum: Some([0.0, 0.1, 0.2, 0.3]),
                flow: flow.clone(),
            };
            let mut tape = Tape::with_mode(GradMode::Off);
            let mut opts = PassOptions {
                path,
                drop_rng: None,
            };
            let (res, counted) =
                macs::measure(|| model.forward(&mut tape, &store, &input, &mut opts));
            res.unwrap();
            let analytic = profiler::report(cfg, mode).unwrap().total_macs();
            if counted != analytic {
                mismatches.push((i, mode, counted, analytic));
            }
        }
        let fwca = profiler::report(cfg, AttentionMode::Fwca)
            .unwrap()
            .attention_macs;
        let full = profiler::report(cfg, AttentionMode::Full)
            .unwrap()
            .attention_macs;
        if fwca >= full {
            not_cheaper += 1;
        }
    }
    outcome(
        mismatches.is_empty() && not_cheaper == 0,
        format!(
            "{} configs x 2 paths, mismatches {mismatches:?}, layouts where fwca >= full: {not_cheaper}",
            configs.len()
        ),
    )
}

fn profiler_scale() -> Outcome {
    let report = profiler::report(&profiler::base_scale_config(), AttentionMode::Fwca).unwrap();
    let g = report.total_macs() as f64 / 1e9;
    let dev = (g - 53.8) / 53.8;
    outcome(
        dev.abs() <= 0.15,
        format!("{g:.2} GMACs, {:+.1}% from 53.8", 100.0 * dev),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    cli::run(std::iter::once("priortrack").chain(args.iter().copied()))
}

fn determinism(dir: &std::path::Path) -> Outcome {
    let small = [
        "--seed",
        "3",
        "--set",
        "train.epochs=2",
        "--set",
        "train.clips_per_epoch=6",
        "--set",
        "train.batch_size=3",
    ];
    let mut ckpts = Vec::new();
    for k in 0..2 {
        let out = dir.join(format!("train{k}"));
        let mut args = vec!["train", "--out", out.to_str().unwrap()];
        args.extend(small);
        assert_eq!(run_cli(&args), 0);
        ckpts.push(std::fs::read(out.join("checkpoint.bin")).unwrap());
    }
    let ckpt = dir.join("train0/checkpoint.bin");
    let mut csvs = Vec::new();
    for k in 0..2 {
        let out = dir.join(format!("track{k}"));
        let code = run_cli(&[
            "track",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--scenario",
            "mixed",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        csvs.push(std::fs::read(out.join("track.csv")).unwrap());
    }
    let same_ckpt = ckpts[0] == ckpts[1];
    let same_csv = csvs[0] == csvs[1];
    outcome(
        same_ckpt && same_csv,
        format!("checkpoints identical: {same_ckpt}; track CSVs identical: {same_csv}"),
    )
}

/// Mean over seeds of `(IoU full, IoU baseline, gate clean, gate corrupt)`.
fn drift_experiment(seeds: &[u64]) -> (f64, f64, f64, f64) {
    let mut acc = [0.0; 4];
    for &seed in seeds {
        for (variant, slot) in [("f", 0), ("e", 1)] {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.apply_variant(variant).unwrap();
            let mut store = ParamStore::new();
            let model = TrackerModel::new(&mut store, cfg.model(), &mut rng(seed)).unwrap();
            train(&model, &mut store, &cfg.train, seed).unwrap();
            let (report, clean, corrupt) = cli::evaluate_model(&cfg, &model, &store).unwrap();
            println!(
                "    seed {seed} variant {variant}: IoU {:.4}, gate clean {clean:.4}, gate corrupt {corrupt:.4}",
                report.mean_iou
            );
            acc[slot] += report.mean_iou;
            if variant == "f" {
                acc[2] += clean;
                acc[3] += corrupt;
            }
        }
    }
    let n = seeds.len() as f64;
    (acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n)
}

fn drift() -> Outcome {
    let (full, base, clean, corrupt) = drift_experiment(&[0, 1, 2, 3, 4]);
    let iou_ok = full >= base;
    let gate_ok = clean - corrupt >= 0.05;
    outcome(
        iou_ok && gate_ok,
        format!(
            "IoU full {full:.4} vs baseline {base:.4} ({}); gate clean {clean:.4} vs corrupt {corrupt:.4}, gap {:.4} needs >= 0.05 ({})",
            if iou_ok { "ok" } else { "fail" },
            clean - corrupt,
            if gate_ok { "ok" } else { "fail" }
        ),
    )
}

fn checkpoint_round_trip(dir: &std::path::Path) -> Outcome {
    let mut store = ParamStore::new();
    TrackerModel::new(&mut store, ModelConfig::default(), &mut rng(6)).unwrap();
    let (a, b, c) = (dir.join("a.bin"), dir.join("b.bin"), dir.join("c.bin"));
    checkpoint::save(&store, &a).unwrap();
    let mut loaded = ParamStore::new();
    TrackerModel::new(&mut loaded, ModelConfig::default(), &mut rng(7)).unwrap();
    checkpoint::load(&mut loaded, &a).unwrap();
    checkpoint::save(&loaded, &b).unwrap();
    checkpoint::load(&mut loaded, &b).unwrap();
    checkpoint::save(&loaded, &c).unwrap();
    let (a, b, c) = (
        std::fs::read(a).unwrap(),
        std::fs::read(b).unwrap(),
        std::fs::read(c).unwrap(),
    );
    outcome(
        a == b && b == c,
        format!("{} bytes, identical: {}", a.len(), a == b && b == c),
    )
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let limit = |s: u64| Some(Duration::from_secs(s));
    let criteria: Vec<(&str, Option<Duration>, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", limit(60), Box::new(gradient_suite)),
        ("frame-wise causality", limit(30), Box::new(fwca_causality)),
        ("template anchoring", None, Box::new(anchoring)),
        ("gate nullification", None, Box::new(nullification)),
        ("masked pooling oracle", None, Box::new(summarize_oracle)),
        ("causal mask oracle", None, Box::new(mask_oracle)),
        ("profiler exactness", None, Box::new(profiler_exactness)),
        ("profiler base scale", limit(1), Box::new(profiler_scale)),
        ("determinism", None, Box::new(|| determinism(dir.path()))),
        ("drift experiment", limit(20 * 60), Box::new(drift)),
        (
            "checkpoint round trip",
            None,
            Box::new(|| checkpoint_round_trip(dir.path())),
        ),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut o = check();
        let took = start.elapsed();
        if let Some(b) = budget {
            if took > *b {
                o.pass = false;
                o.detail += &format!("; over the {} s budget", b.as_secs());
            }
        }
        println!(
            "[{}] {:>2} {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64()
        );
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
