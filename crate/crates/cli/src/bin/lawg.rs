use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use lawg::checkpoint::Checkpoint;
use lawg::{ablate, eval, inspect, train};
use lawg_core::config::TrainConfig;
use lawg_core::{Error, Result};
use synthground::{GenArgs, GroundingSample, Split};

#[derive(Parser)]
#[command(
    name = "lawg",
    about = "Language-adaptive grounding: data, training, evaluation, inspection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grounding dataset.
    Gen(GenArgs),
    /// Train a model; writes metrics.csv, batches.log, best.ckpt and last.ckpt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Optional config; its model section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for report.json, metrics.csv and predictions.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attention maps, prediction metadata and word-layer affinity for one sample.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "sample-id")]
        sample_id: String,
        #[arg(long, default_value = "runs/inspect")]
        out: PathBuf,
        /// Also write the affinity table aggregated over this split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train the four ablation arms and write ablation.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| Error::Config(format!("unknown split {s:?} (train | val | test)")))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => {
            args.run()?;
        }
        Command::Train { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let start = Instant::now();
            let every = (cfg.steps / 50).max(1) as u64;
            let outcome = train::train(&cfg, &out, &mut |step, loss| {
                if step % every == 0 {
                    eprintln!(
                        "step {step:>6}  loss {:.4}  ({:.0}s)",
                        loss.total,
                        start.elapsed().as_secs_f64()
                    );
                }
            })?;
            if let Some((step, report)) = &outcome.best {
                println!("best checkpoint at step {step}");
                print!("{}", report.summary());
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            ckpt,
            split,
            config,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut cfg = ck.config.clone();
            if let Some(p) = config {
                let other = TrainConfig::from_file(&p)?;
                let mut a = other.model.clone();
                a.vocab_size = cfg.model.vocab_size;
                if a != cfg.model {
                    return Err(Error::Config(format!(
                        "{} does not describe the checkpoint's model",
                        p.display()
                    )));
                }
                cfg.data = other.data;
            }
            let split = parse_split(&split)?;
            let (ds, vocab) = train::load_data(&mut cfg)?;
            let samples: Vec<&GroundingSample> = ds.split(split).collect();
            let report = eval::evaluate(&ck.params, &cfg, &vocab, &samples, split.name())?;
            print!("{}", report.summary());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write(
                    &dir.join("report.json"),
                    &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"),
                )?;
                let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                let csv = format!(
                    "{}\n{},{},{},{},,,,,\n",
                    train::METRICS_HEADER,
                    ck.step,
                    split.name(),
                    f(report.prec50),
                    f(report.miou)
                );
                write(&dir.join("metrics.csv"), &csv)?;
                write(&dir.join("predictions.jsonl"), &report.predictions_jsonl())?;
            }
        }
        Command::Inspect {
            ckpt,
            sample_id,
            out,
            split,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut cfg = ck.config.clone();
            let (ds, vocab) = train::load_data(&mut cfg)?;
            let sample = ds
                .find(&sample_id)
                .ok_or_else(|| Error::InvalidArgument(format!("sample {sample_id} not found")))?;
            let result = inspect::inspect(&ck.params, &cfg, &vocab, sample, &out)?;
            if let Some(s) = split {
                let s = parse_split(&s)?;
                let table = inspect::affinity_over(&ck.params, &cfg, &vocab, ds.split(s))?;
                let csv = table
                    .map(|t| t.to_csv())
                    .unwrap_or_else(|| inspect::AFFINITY_DISABLED.to_string());
                write(&out.join(format!("affinity_{}.csv", s.name())), &csv)?;
            }
            for f in result.files {
                println!("{}", f.display());
            }
        }
        Command::Ablate { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let every = (cfg.steps / 10).max(1) as u64;
            let report = ablate::ablate(&cfg, &out, &mut |arm, step| {
                if step % every == 0 {
                    eprintln!("[{arm}] step {step}");
                }
            })?;
            print!("{}", report.to_csv());
            println!("data order shared across arms: {}", report.shared_data_order());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = lawg::thread_limit() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
