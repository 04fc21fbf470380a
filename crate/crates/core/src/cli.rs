//! Command-line entry points: train, track, eval, ablate and profile.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::profiler::{self, AttentionMode};
use crate::simworld::{self, generate, EvalReport, Scenario};
use crate::tracker::{self, gate_means, records_to_csv, track_sequence, ModelConfig, TrackerModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "priortrack",
    version,
    about = "Multi-frame tracker with reliability-gated prior tokens"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Ablation variant: a-f, momentum, flow or frames-N.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the `scenario` key.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// Repeatable key=value override, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes checkpoint.bin and train_log.csv.
    Train(Common),
    /// Track one scenario; writes track.csv.
    Track(Common),
    /// Score a tracker CSV against a scenario; writes eval.csv.
    Eval {
        /// Tracker CSV to score.
        predictions: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train (or load) a variant and score it on held-out scenarios.
    Ablate(Common),
    /// Analytic cost per layer; writes profile.csv.
    Profile {
        /// Count attention over every pair instead of the causal pairs.
        #[arg(long)]
        full_attention: bool,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    /// File, then flags, then `--set`, then the variant.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = &self.scenario {
            cfg.scenario = s.clone();
        }
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        if let Some(v) = &self.variant {
            cfg.apply_variant(v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }
}

/// Model with weights from `checkpoint`, or fresh from `seed`.
fn build_model(
    model: &ModelConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<(TrackerModel, ParamStore)> {
    let mut store = ParamStore::new();
    let m = TrackerModel::new(
        &mut store,
        model.clone(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    if let Some(p) = checkpoint {
        checkpoint::load(&mut store, p)?;
    }
    Ok((m, store))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

pub fn cmd_train(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    let (model, mut store) = build_model(&cfg.model(), cfg.seed, c.checkpoint.as_deref())?;
    let report = tracker::train(&model, &mut store, &cfg.train, cfg.seed)?;
    let ckpt = c.out_file("checkpoint.bin")?;
    checkpoint::save(&store, &ckpt)?;
    write(&c.out_file("train_log.csv")?, &report.to_csv())?;
    if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
        println!(
            "epochs {}: loss {:.4} -> {:.4}",
            report.epochs.len(),
            first.loss_total,
            last.loss_total
        );
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn scenario(cfg: &RunConfig, seed: u64) -> Result<simworld::Sequence> {
    generate(&Scenario::preset(&cfg.scenario, seed)?)
}

pub fn cmd_track(c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    let (model, store) = build_model(&cfg.model(), cfg.seed, c.checkpoint.as_deref())?;
    let seq = scenario(&cfg, cfg.seed)?;
    let records = track_sequence(&model, &store, &seq, cfg.inject)?;
    let path = c.out_file("track.csv")?;
    write(&path, &records_to_csv(&records))?;
    let mean = records.iter().filter_map(|r| r.iou()).sum::<f64>() / records.len().max(1) as f64;
    println!(
        "{} steps, mean IoU {mean:.4}, csv {}",
        records.len(),
        path.display()
    );
    Ok(())
}

pub fn cmd_eval(predictions: &Path, c: &Common) -> Result<EvalReport> {
    let cfg = c.resolve()?;
    let text = std::fs::read_to_string(predictions)?;
    let preds = tracker::parse_predictions(&text)?;
    let seq = scenario(&cfg, cfg.seed)?;
    let mut boxes = Vec::with_capacity(preds.len());
    let mut truth = Vec::with_capacity(preds.len());
    let mut active = Vec::with_capacity(preds.len());
    for (step, b) in preds {
        if step >= seq.len() {
            return Err(Error::Parse(format!(
                "step {step} beyond a {}-frame scenario",
                seq.len()
            )));
        }
        boxes.push(b);
        truth.push(seq.boxes[step]);
        active.push(seq.active[step].clone());
    }
    let report = simworld::evaluate(&boxes, &truth, &active)?;
    write(&c.out_file("eval.csv")?, &report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(report)
}

/// Scores `model` on `cfg.eval_scenarios` held-out sequences; also returns
/// mean gate scores on clean and corrupted references.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &TrackerModel,
    store: &ParamStore,
) -> Result<(EvalReport, f64, f64)> {
    let mut reports = Vec::with_capacity(cfg.eval_scenarios);
    let mut all = Vec::new();
    for k in 0..cfg.eval_scenarios as u64 {
        let seq = scenario(cfg, cfg.eval_seed + k)?;
        let records = track_sequence(model, store, &seq, cfg.inject)?;
        let preds: Vec<_> = records.iter().map(|r| r.pred).collect();
        reports.push(simworld::evaluate(
            &preds,
            &seq.boxes[1..],
            &seq.active[1..],
        )?);
        all.extend(records);
    }
    let (clean, corrupt) = gate_means(&all);
    Ok((simworld::pool(&reports), clean, corrupt))
}

pub fn cmd_ablate(c: &Common) -> Result<EvalReport> {
    let cfg = c.resolve()?;
    let (model, mut store) = build_model(&cfg.model(), cfg.seed, c.checkpoint.as_deref())?;
    if c.checkpoint.is_none() {
        tracker::train(&model, &mut store, &cfg.train, cfg.seed)?;
    }
    let (report, clean, corrupt) = evaluate_model(&cfg, &model, &store)?;
    let name = c.variant.as_deref().unwrap_or("f");
    let mut csv = report.to_csv();
    csv += &format!("gate_clean,{clean:.6}\ngate_corrupt,{corrupt:.6}\n");
    write(&c.out_file(&format!("ablate_{name}.csv"))?, &csv)?;
    println!("variant {name}");
    print!("{csv}");
    Ok(report)
}

pub fn cmd_profile(full: bool, c: &Common) -> Result<()> {
    let cfg = c.resolve()?;
    let mode = if full {
        AttentionMode::Full
    } else {
        AttentionMode::Fwca
    };
    let report = profiler::report(&cfg.model(), mode)?;
    let csv = report.to_csv();
    write(&c.out_file("profile.csv")?, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Track(c) => cmd_track(c),
        Command::Eval {
            predictions,
            common,
        } => cmd_eval(predictions, common).map(|_| ()),
        Command::Ablate(c) => cmd_ablate(c).map(|_| ()),
        Command::Profile {
            full_attention,
            common,
        } => cmd_profile(*full_attention, common),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
