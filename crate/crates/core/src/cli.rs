//! Command-line front end. Every command prints one JSON document on stdout
//! and diagnostics on stderr.
//!
//! Exit codes: 0 success, 1 a check or run failed (stdout still holds the
//! JSON payload), 2 bad input (flags, files, config keys).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::gradcheck::run_loss_gradcheck;
use crate::losses::LossKind;
use crate::metrics;
use crate::theory::{self, LinearSigmoidGenerator};
use crate::train::run::make_datasets;
use crate::train::{
    rows_to_csv, run_ablation, train_run_with, write_run_artifacts, AblationPlan, AblationTable, RunConfig,
};
use crate::volgrid::{self, BinaryMask, Dtype, Volume};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "volseg", version, about = "Volumetric segmentation losses, network, and metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Vvf,
    Mhd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare a prediction with a reference mask.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// File format; inferred from the extension when omitted.
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Binarization threshold for probability maps.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Finite-difference check of a loss gradient.
    Gradcheck {
        /// dsc, jaccard, wce, ce, dsc-nosquare, dsc-nosquare-exact
        #[arg(long, default_value = "dsc")]
        loss: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Numerical property suites for the divergence and convergence results.
    Theorems {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic training and validation pools as VVF pairs.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network and write its log and checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run ablation grids and write one CSV per table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// table2 .. table6, or all
        #[arg(long, default_value = "all")]
        table: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

/// A command's JSON payload and exit code, or an input error message.
type Outcome = Result<(Value, i32), String>;

pub fn execute(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Evaluate {
            pred,
            gt,
            format,
            threshold,
        } => cmd_evaluate(&pred, &gt, format, threshold),
        Command::Gradcheck { loss, trials, seed } => cmd_gradcheck(&loss, trials, seed, stderr),
        Command::Theorems { suite, trials, seed } => Ok(cmd_theorems(suite, trials, seed)),
        Command::Synth { config, out } => cmd_synth(config.as_deref(), &out),
        Command::Train { config, out } => cmd_train(config.as_deref(), &out, stderr),
        Command::Ablate {
            config,
            out,
            table,
            seeds,
        } => cmd_ablate(config.as_deref(), &out, &table, seeds, stderr),
    };
    match result {
        Ok((payload, code)) => {
            let text = serde_json::to_string_pretty(&payload).expect("JSON values serialize");
            let _ = writeln!(stdout, "{text}");
            code
        }
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_INPUT
        }
    }
}

fn read_volume(path: &Path, format: Option<Format>) -> Result<Volume, String> {
    let fmt = format.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("mhd") => Format::Mhd,
        _ => Format::Vvf,
    });
    match fmt {
        Format::Vvf => volgrid::read_vvf(path),
        Format::Mhd => volgrid::read_mhd_subset(path),
    }
    .map_err(|e| e.to_string())
}

/// Binary volumes are taken as masks; anything else is thresholded.
fn to_mask(v: Volume, threshold: f64) -> Result<BinaryMask, String> {
    if v.data().iter().all(|&x| x == 0.0 || x == 1.0) {
        return BinaryMask::new(v).map_err(|e| e.to_string());
    }
    if v.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err("prediction is neither binary nor a probability map".into());
    }
    Ok(BinaryMask::threshold(&v, threshold as f32))
}

fn cmd_evaluate(pred: &Path, gt: &Path, format: Option<Format>, threshold: f64) -> Outcome {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(format!("threshold {threshold} must lie in (0, 1)"));
    }
    let p = to_mask(read_volume(pred, format)?, threshold).map_err(|e| format!("{}: {e}", pred.display()))?;
    let g = BinaryMask::new(read_volume(gt, format)?).map_err(|e| format!("{}: {e}", gt.display()))?;
    let report = metrics::evaluate(&p, &g).map_err(|e| e.to_string())?;
    Ok((serde_json::to_value(report).expect("report serializes"), EXIT_OK))
}

fn cmd_gradcheck(loss: &str, trials: usize, seed: u64, stderr: &mut dyn Write) -> Outcome {
    let kind: LossKind = loss.parse()?;
    let report = run_loss_gradcheck(kind, trials, seed);
    let code = if report.passed() {
        EXIT_OK
    } else {
        let _ = writeln!(
            stderr,
            "gradcheck {}: {} of {} trials above tolerance",
            report.loss, report.failures, report.trials
        );
        EXIT_FAILED
    };
    Ok((serde_json::to_value(report).expect("report serializes"), code))
}

fn cmd_theorems(suite: Suite, trials: usize, seed: u64) -> (Value, i32) {
    let mut reports = Vec::new();
    if matches!(suite, Suite::One | Suite::All) {
        reports.push(theory::check_theorem1(trials, seed));
    }
    if matches!(suite, Suite::Two | Suite::All) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let generator = LinearSigmoidGenerator::new(latent, 64);
        for loss in [LossKind::Dsc, LossKind::Jaccard] {
            reports.push(theory::check_theorem2_continuity(&generator, loss, trials, seed));
        }
    }
    if matches!(suite, Suite::Three | Suite::All) {
        reports.push(theory::check_theorem3_ordering(trials, seed));
    }
    let failures: usize = reports.iter().map(|r| r.failures).sum();
    let payload = json!({
        "passed": failures == 0,
        "failures": failures,
        "reports": reports,
    });
    (payload, if failures == 0 { EXIT_OK } else { EXIT_FAILED })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, String> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            RunConfig::parse(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

fn create_dir(out: &Path) -> Result<(), String> {
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))
}

fn path_list(paths: &[PathBuf]) -> Value {
    paths.iter().map(|p| Value::String(p.display().to_string())).collect()
}

fn cmd_synth(config: Option<&Path>, out: &Path) -> Outcome {
    let cfg = load_config(config)?;
    let (train, val) = make_datasets(&cfg).map_err(|e| e.to_string())?;
    create_dir(out)?;
    let mut files = Vec::new();
    for (split, cases) in [("train", &train), ("val", &val)] {
        for (i, c) in cases.iter().enumerate() {
            for (kind, vol, dtype) in [
                ("image", &c.image, Dtype::F32),
                ("mask", c.truth.volume(), Dtype::U8),
            ] {
                let p = out.join(format!("{split}_{i:03}_{kind}.vvf"));
                volgrid::write_vvf(vol, dtype, &p).map_err(|e| e.to_string())?;
                files.push(p);
            }
        }
    }
    let fg: Vec<f64> = train
        .iter()
        .chain(&val)
        .map(|c| c.truth.count() as f64 / c.truth.dims().len() as f64)
        .collect();
    let payload = json!({
        "command": "synth",
        "config": cfg.resolved(),
        "train_cases": train.len(),
        "val_cases": val.len(),
        "max_fg_fraction_observed": fg.iter().cloned().fold(0.0, f64::max),
        "files": path_list(&files),
    });
    Ok((payload, EXIT_OK))
}

fn cmd_train(config: Option<&Path>, out: &Path, stderr: &mut dyn Write) -> Outcome {
    let cfg = load_config(config)?;
    create_dir(out)?;
    let every = (cfg.iterations / 20).max(1);
    let outcome = train_run_with(&cfg, &mut |r| {
        if r.iter % every == 0 {
            let _ = writeln!(stderr, "iter {} loss {:.5} lr {}", r.iter, r.loss_total, r.lr);
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let payload = json!({
                "command": "train",
                "config": cfg.resolved(),
                "status": "failed",
                "error": e.to_string(),
            });
            let _ = writeln!(stderr, "training failed: {e}");
            return Ok((payload, EXIT_FAILED));
        }
    };
    let files = write_run_artifacts(&outcome, out).map_err(|e| e.to_string())?;
    let _ = writeln!(stderr, "trained in {:.1}s", outcome.seconds);
    let payload = json!({
        "command": "train",
        "config": cfg.resolved(),
        "status": "ok",
        "iterations": outcome.log.len(),
        "final_loss": outcome.log.last().map(|r| r.loss_total),
        "final_dice": outcome.final_dice,
        "validation": outcome.validation,
        "files": path_list(&files),
    });
    Ok((payload, EXIT_OK))
}

fn cmd_ablate(config: Option<&Path>, out: &Path, table: &str, seeds: Vec<u64>, stderr: &mut dyn Write) -> Outcome {
    let cfg = load_config(config)?;
    let tables: Vec<AblationTable> = if table == "all" {
        AblationTable::ALL.to_vec()
    } else {
        vec![table.parse()?]
    };
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
    create_dir(out)?;
    let mut summaries = Vec::new();
    let mut any_failed = false;
    for t in tables {
        let plan = AblationPlan {
            table: t,
            base: cfg.clone(),
            seeds: seeds.clone(),
        };
        let _ = writeln!(stderr, "{t}: {} rows", plan.row_count().map_err(|e| e.to_string())?);
        let rows = run_ablation(&plan).map_err(|e| e.to_string())?;
        let failed = rows.iter().filter(|r| r.status != "ok").count();
        any_failed |= failed > 0;
        let path = out.join(format!("{t}.csv"));
        fs::write(&path, rows_to_csv(&rows)).map_err(|e| format!("{}: {e}", path.display()))?;
        summaries.push(json!({
            "table": t.name(),
            "rows": rows.len(),
            "failed": failed,
            "csv": path.display().to_string(),
            "results": rows,
        }));
    }
    let payload = json!({
        "command": "ablate",
        "config": cfg.resolved(),
        "seeds": seeds,
        "tables": summaries,
    });
    Ok((payload, if any_failed { EXIT_FAILED } else { EXIT_OK }))
}
