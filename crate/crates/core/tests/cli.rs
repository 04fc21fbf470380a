use std::path::Path;

use priortrack::checkpoint;
use priortrack::cli::{run, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use priortrack::config::RunConfig;
use priortrack::numerics::ParamStore;
use priortrack::tracker::TrackerModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("priortrack").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = cli(&[
        "profile",
        "--out",
        s(dir.path()),
        "--set",
        "model.colour=red",
    ]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn bad_flag_and_bad_variant_are_config_errors() {
    assert_eq!(cli(&["train", "--epochs-please"]), EXIT_CONFIG);
    assert_eq!(cli(&["profile", "--variant", "frames-9"]), EXIT_CONFIG);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let code = cli(&["track", "--checkpoint", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code, EXIT_RUNTIME);
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let code = cli(&[
        "train",
        "--seed",
        "11",
        "--set",
        "train.epochs=0",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK);
    let saved = std::fs::read(dir.path().join("checkpoint.bin")).unwrap();
    let mut store = ParamStore::new();
    let cfg = RunConfig::default();
    TrackerModel::new(&mut store, cfg.model(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert_eq!(saved, checkpoint::encode(&store).unwrap());
}

#[test]
fn config_file_is_overridden_by_set() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "model.depth = 1\nmodel.lora_rank = 2\n").unwrap();
    let code = cli(&[
        "profile",
        "--config",
        s(&file),
        "--set",
        "model.depth=3",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code, EXIT_OK);
    let csv = std::fs::read_to_string(dir.path().join("profile.csv")).unwrap();
    assert!(csv.contains("blocks.2.attn.q,"));
    assert!(!csv.contains("blocks.3."));
}

#[test]
fn full_attention_profile_costs_more() {
    let dir = tempfile::tempdir().unwrap();
    let total = |flag: Option<&str>| {
        let mut args = vec!["profile", "--out", s(dir.path())];
        args.extend(flag);
        assert_eq!(cli(&args), EXIT_OK);
        let csv = std::fs::read_to_string(dir.path().join("profile.csv")).unwrap();
        let last = csv.lines().last().unwrap().to_string();
        assert!(last.starts_with("total,"));
        last.split(',').nth(1).unwrap().parse::<u64>().unwrap()
    };
    assert!(total(None) < total(Some("--full-attention")));
}

#[test]
fn track_then_eval_scores_the_same_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let train = [
        "train",
        "--seed",
        "2",
        "--set",
        "train.epochs=0",
        "--out",
        out,
    ];
    assert_eq!(cli(&train), EXIT_OK);
    let ckpt = dir.path().join("checkpoint.bin");
    let track = [
        "track",
        "--checkpoint",
        s(&ckpt),
        "--scenario",
        "occlusion",
        "--seed",
        "2",
        "--out",
        out,
    ];
    assert_eq!(cli(&track), EXIT_OK);
    let preds = dir.path().join("track.csv");
    let eval = [
        "eval",
        s(&preds),
        "--scenario",
        "occlusion",
        "--seed",
        "2",
        "--out",
        out,
    ];
    assert_eq!(cli(&eval), EXIT_OK);
    let csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv.lines().count() >= 2, "{csv}");
}

#[test]
fn eval_rejects_garbage_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.csv");
    std::fs::write(&preds, "step,x\n1,oops\n").unwrap();
    let code = cli(&["eval", s(&preds), "--out", s(dir.path())]);
    assert_eq!(code, EXIT_RUNTIME);
}
