//! Trains the full model and the baseline on synthetic clips, then compares
//! them on held-out corruption scenarios.
//!
//! `cargo run --release --example drift -- 0 1 2` trains one pair per seed;
//! `key=value` arguments override config keys.

use std::time::Instant;

use priortrack::cli::evaluate_model;
use priortrack::config::RunConfig;
use priortrack::numerics::ParamStore;
use priortrack::tracker::{train, TrackerModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> priortrack::Result<()> {
    let (sets, seeds): (Vec<String>, Vec<String>) =
        std::env::args().skip(1).partition(|a| a.contains('='));
    let seeds: Vec<u64> = seeds.iter().map(|s| s.parse().expect("seed")).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    println!("seed,variant,mean_iou,gate_clean,gate_corrupt,seconds");
    for seed in seeds {
        for variant in ["f", "e"] {
            let start = Instant::now();
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            for pair in &sets {
                cfg.set_pair(pair)?;
            }
            cfg.apply_variant(variant)?;
            let mut store = ParamStore::new();
            let model = TrackerModel::new(
                &mut store,
                cfg.model(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )?;
            train(&model, &mut store, &cfg.train, seed)?;
            let (report, clean, corrupt) = evaluate_model(&cfg, &model, &store)?;
            println!(
                "{seed},{variant},{:.4},{clean:.4},{corrupt:.4},{:.1}",
                report.mean_iou,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
