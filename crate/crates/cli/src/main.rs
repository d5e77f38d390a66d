//! `sft`: generate synthetic gesture data, train and evaluate the slow-fast
//! transformer, compare losses and run gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sft_core::gradcheck::{op_cases, run_case, run_case_mixed, sft_case, CaseSummary};
use sft_core::harness::{
    compare_losses, evaluate, prepare, train, ClipSource, LossMode, PreparedSet, RunConfig,
};
use sft_core::model::predict;
use sft_core::preproc::preprocess_clip;
use sft_core::synthdata::{generate_dataset, load_clip, DatasetManifest, GestureClass, Split, MANIFEST_FILE};
use sft_core::{checkpoint, Rng, SftConfig};

#[derive(Parser, Debug)]
#[command(name = "sft", version, about = "Slow-fast transformer gesture recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed. Commands without randomness ignore it.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic train and test splits with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_meter_train: Option<usize>,
        #[arg(long)]
        per_meter_test: Option<usize>,
    },
    /// Train on the train split; writes a checkpoint and the epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split; writes report.json and metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallel: bool,
    },
    /// Paired cross-entropy vs long-range loss runs over several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated, at least three.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every op and the full model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        /// Overrides the per-precision tolerances.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify one clip file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Per-clip gradients on all cores; results still match the serial run.
    #[arg(long)]
    parallel: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum LossArg {
    Ce,
    Longloss,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SplitArg {
    Train,
    Test,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum Precision {
    F32,
    F64,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<sft_core::Error> for Failure {
    fn from(e: sft_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    let t = &mut cfg.train;
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = f.loss {
        t.loss = match v {
            LossArg::Ce => LossMode::Ce,
            LossArg::Longloss => LossMode::LongLoss,
        };
    }
    if let Some(v) = f.alpha {
        t.long_loss.alpha = v;
    }
    if let Some(v) = f.eval_every {
        t.eval_every = v;
    }
    t.parallel |= f.parallel;
}

fn validated(cfg: RunConfig) -> CliResult<RunConfig> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value).context("serializing output")? + "\n")
}

fn load_split(data: &Path, split: Split, cfg: &RunConfig) -> CliResult<PreparedSet> {
    let manifest = DatasetManifest::read_csv(&data.join(MANIFEST_FILE))?;
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{} has no {} records",
            data.join(MANIFEST_FILE).display(),
            split.name()
        )));
    }
    let t = Instant::now();
    let set = prepare(&records, ClipSource::Files(data), &cfg.preproc, cfg.train.parallel)?;
    eprintln!("prepared {} {} clips in {:.1?}", set.len(), split.name(), t.elapsed());
    Ok(set)
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData {
            common,
            out,
            per_meter_train,
            per_meter_test,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = per_meter_train {
                cfg.data.per_meter_train = v;
            }
            if let Some(v) = per_meter_test {
                cfg.data.per_meter_test = v;
            }
            cfg.scene.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            create_dir(&out)?;
            let seed = common.seed.unwrap_or(0);
            let m = generate_dataset(&cfg.data.specs(), &cfg.scene, seed, &out)?;
            println!("wrote {} clips and {}", m.len(), out.join(MANIFEST_FILE).display());
        }
        Command::Train {
            common,
            train: flags,
            data,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            apply_train_flags(&mut cfg, &flags);
            cfg.train.checkpoint = Some(out.join("checkpoint.sft"));
            let cfg = validated(cfg)?;
            create_dir(&out)?;
            let train_set = load_split(&data, Split::Train, &cfg)?;
            let eval_set = if cfg.train.eval_every > 0 {
                Some(load_split(&data, Split::Test, &cfg)?)
            } else {
                None
            };
            let t = Instant::now();
            let outcome = train(&train_set, &cfg.model, &cfg.train, eval_set.as_ref())?;
            for e in &outcome.log {
                match &e.eval {
                    Some(ev) => eprintln!(
                        "epoch {:3}  loss {:.4}  test acc {:.4}  test loss {:.4}",
                        e.epoch, e.mean_loss, ev.accuracy, ev.mean_loss
                    ),
                    None => eprintln!("epoch {:3}  loss {:.4}", e.epoch, e.mean_loss),
                }
            }
            write(&out.join("train_log.json"), &to_json(&outcome.log)?)?;
            write(&out.join("config.json"), &to_json(&cfg)?)?;
            println!(
                "trained {} epochs in {:.1?}; checkpoint {}",
                cfg.train.epochs,
                t.elapsed(),
                out.join("checkpoint.sft").display()
            );
        }
        Command::Eval {
            common,
            data,
            checkpoint: ckpt,
            split,
            out,
            parallel,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.train.parallel |= parallel;
            let params = checkpoint::load(&ckpt)?;
            cfg.model = params.config().clone();
            let cfg = validated(cfg)?;
            create_dir(&out)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let set = load_split(&data, split, &cfg)?;
            let report = evaluate(&set, &params, &cfg.train.long_loss, cfg.train.parallel)?;
            write(&out.join("report.json"), &report.to_json()?)?;
            write(&out.join("metrics.csv"), &report.metrics_csv())?;
            println!(
                "accuracy {:.4}  loss {:.4}  mAP {:.4}  far-bin accuracy {}",
                report.accuracy,
                report.mean_loss,
                report.map,
                report.far_bin.accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
        Command::Compare {
            common,
            train: flags,
            data,
            seeds,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            apply_train_flags(&mut cfg, &flags);
            cfg.train.checkpoint = None;
            let cfg = validated(cfg)?;
            if seeds.len() < 3 {
                return Err(Failure::Usage(format!("--seeds needs at least 3 values, got {}", seeds.len())));
            }
            create_dir(&out)?;
            let train_set = load_split(&data, Split::Train, &cfg)?;
            let test_set = load_split(&data, Split::Test, &cfg)?;
            let t = Instant::now();
            let cmp = compare_losses(&train_set, &test_set, &cfg.model, &cfg.train, &seeds, |r| {
                eprintln!(
                    "[{:.0?}] seed {} {}: accuracy {:.4}  far-bin {:.4}",
                    t.elapsed(),
                    r.seed,
                    r.loss_mode.name(),
                    r.report.accuracy,
                    r.report.far_bin.accuracy.unwrap_or(f64::NAN)
                );
            })?;
            let csv = cmp.to_csv();
            write(&out.join("comparison.csv"), &csv)?;
            write(&out.join("comparison.json"), &to_json(&cmp)?)?;
            print!("{csv}");
        }
        Command::Gradcheck {
            common,
            precision,
            instances,
            tol,
            out,
        } => {
            let seed = common.seed.unwrap_or(0);
            if instances == 0 {
                return Err(Failure::Usage("--instances must be at least 1".into()));
            }
            let summaries = gradcheck(precision, instances, seed, tol)?;
            let mut all = true;
            for (s, tol) in &summaries {
                println!(
                    "{:<24} {:>3} instances  max_rel_err {:.3e}  tol {:.0e}  {}",
                    s.name,
                    s.instances,
                    s.max_rel_err,
                    tol,
                    if s.pass { "pass" } else { "FAIL" }
                );
                all &= s.pass;
            }
            if let Some(path) = out {
                let rows: Vec<_> = summaries.iter().map(|(s, _)| s).collect();
                write(&path, &to_json(&rows)?)?;
            }
            if !all {
                return Err(Failure::Runtime(anyhow::anyhow!("gradient check failed")));
            }
        }
        Command::Predict {
            common,
            checkpoint: ckpt,
            clip,
            out,
        } => {
            let cfg = load_config(&common)?;
            let params = checkpoint::load(&ckpt)?;
            let preproc = sft_core::preproc::PreprocConfig {
                k: params.config().k,
                out_hw: params.config().input_hw,
                ..cfg.preproc
            };
            let video = load_clip(&clip)?;
            let frames = preprocess_clip(&video, &preproc, &mut Rng::new(common.seed.unwrap_or(0)))?;
            let p = predict(&params, &frames)?;
            #[derive(Serialize)]
            struct Output {
                class_id: usize,
                class_name: Option<&'static str>,
                probabilities: Vec<f32>,
            }
            let o = Output {
                class_id: p.class,
                class_name: GestureClass::from_id(p.class).ok().map(|c| c.name()),
                probabilities: p.probabilities.data().to_vec(),
            };
            let json = to_json(&o)?;
            match out {
                Some(path) => write(&path, &json)?,
                None => print!("{json}"),
            }
        }
    }
    Ok(())
}

/// Ops at 1e-4 in 64-bit. In 32-bit, ops and the loss use the 64-bit
/// difference oracle at 1e-3 and the full model is held to 1e-2.
fn gradcheck(
    precision: Precision,
    instances: usize,
    seed: u64,
    tol: Option<f64>,
) -> CliResult<Vec<(CaseSummary, f64)>> {
    let mut out = Vec::new();
    let model = SftConfig::tiny();
    match precision {
        Precision::F64 => {
            let tol = tol.unwrap_or(1e-4);
            for case in op_cases::<f64>().iter().chain([&sft_case::<f64>(model)]) {
                out.push((run_case(case, instances, seed, tol)?, tol));
            }
        }
        Precision::F32 => {
            let wide = op_cases::<f64>();
            for (narrow, wide) in op_cases::<f32>().iter().zip(&wide) {
                let t = tol.unwrap_or(1e-3);
                out.push((run_case_mixed(narrow, wide, instances, seed, t)?, t));
            }
            let t = tol.unwrap_or(1e-2);
            let s = run_case_mixed(&sft_case::<f32>(model.clone()), &sft_case::<f64>(model), instances, seed, t)?;
            out.push((s, t));
        }
    }
    Ok(out)
}
