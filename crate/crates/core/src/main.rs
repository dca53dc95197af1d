use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mopflow::config::PipelineConfig;
use mopflow::error::{Error, Result, StageExt};
use mopflow::{pipeline, selftest};

#[derive(Parser)]
#[command(name = "mopflow", version, about = "Motion segmentation from variational optical flow")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root holding JPEGImages/480p and Annotations/480p.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// File listing the sequences to use, one per line.
    #[arg(long, global = true)]
    split: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated sequence names.
    #[arg(long, global = true, value_delimiter = ',')]
    sequences: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate forward flow for every consecutive frame pair.
    Flow,
    /// Motion proposals from estimated flows.
    Segment {
        /// Flow directory (default `<out>/flow`).
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Train the segmentation network on flows and annotations.
    Train {
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Network masks from a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Mean IoU of predicted masks against annotations.
    Eval {
        /// Directory of `<seq>/<frame>.png` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth directory (default: the dataset annotations).
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Run the synthetic oracles.
    Selftest,
    /// Print the effective configuration.
    Config,
}

fn effective_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(r) = &c.root {
        cfg.root = Some(r.clone());
    }
    if let Some(s) = &c.split {
        cfg.split = Some(s.clone());
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = &c.sequences {
        cfg.sequences = Some(s.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MOPFLOW_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("MOPFLOW_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads().stage("setup")?;
    let cfg = effective_config(&cli.common).stage("config")?;
    match cli.command {
        Command::Flow => {
            let written = pipeline::run_flow(&cfg)?;
            println!("wrote {} flow fields under {}", written.len(), cfg.output.join(pipeline::FLOW_DIR).display());
        }
        Command::Segment { flow } => {
            let written = pipeline::run_segment(&cfg, flow.as_deref())?;
            println!("wrote {} masks under {}", written.len(), cfg.output.join(pipeline::MASK_DIR).display());
        }
        Command::Train { flow } => {
            let ckpt = pipeline::run_train(&cfg, flow.as_deref())?;
            println!("wrote {}", ckpt.display());
        }
        Command::Predict { checkpoint, flow } => {
            let written = pipeline::run_predict(&cfg, &checkpoint, flow.as_deref())?;
            println!("wrote {} masks under {}", written.len(), cfg.output.join(pipeline::PREDICT_DIR).display());
        }
        Command::Eval { pred, gt } => {
            let report = pipeline::run_eval(&cfg, &pred, gt.as_deref())?;
            print!("{}", report.table());
        }
        Command::Selftest => {
            let report = selftest::run(&cfg.energy, &cfg.solver, cfg.seed).stage("selftest")?;
            println!("{report}");
            if !report.passed() {
                return Err(Error::InvalidArgument("a check exceeded its tolerance".into()).in_stage("selftest"));
            }
            println!("selftest passed");
        }
        Command::Config => print!("{}", cfg.dump()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mopflow: {e}");
            ExitCode::FAILURE
        }
    }
}
