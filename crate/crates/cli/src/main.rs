//! `circuitcl`: parse netlists, build augmented datasets, pretrain encoders,
//! evaluate relation separation, export embeddings and train downstream
//! tasks.
//!
//! Exit codes: 0 success, 1 input error, 2 non-finite loss, 3 config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Config(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "circuitcl", version, about = "Contrastive pretraining of device-level circuit graph encoders")]
struct Cli {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel encoding and augmentation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a netlist and emit its circuit graph as JSON.
    Parse {
        input: PathBuf,
        /// Write the graph here instead of stdout.
        #[arg(long)]
        emit_graph: Option<PathBuf>,
    },
    /// Augment every netlist in a directory into a labeled dataset.
    Augment {
        corpus_dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_pos: usize,
        #[arg(long, default_value_t = 100)]
        n_neg: usize,
        #[arg(long, default_value_t = circuitcl::augment::DEFAULT_MAX_CHAIN)]
        max_chain: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining; writes a checkpoint and per-epoch metrics.
    Pretrain {
        dataset_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV path (default: next to the checkpoint).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Held-out dataset for the per-epoch relation statistics.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Mean and standard deviation of cosine similarity per relation class.
    EvalRelations {
        dataset_dir: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Also write the statistics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export graph embeddings as CSV.
    Embed {
        /// Dataset directories, netlists (.sp) or graph JSON files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a downstream task; writes metrics JSON.
    TrainTask {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=3))]
        task: u8,
        /// Task 1: label JSON (default: bundled corpus). Tasks 2-3: CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sidecar JSON for a CSV dataset (default: sidecar.json beside it).
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Pretrained checkpoint for the frozen branch.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Depths of the frozen, parallel and series branches, e.g. 2,0,2.
        #[arg(long, value_parser = parse_depths)]
        depths: Option<(usize, usize, usize)>,
        /// Hidden width of the downstream encoder.
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Write a synthetic RC-ladder regression dataset (CSV plus sidecar).
    Surrogate {
        #[arg(long, default_value_t = 500)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl From<TrainFlags> for config::TrainSection {
    fn from(f: TrainFlags) -> Self {
        config::TrainSection { lr: f.lr, batch_size: f.batch_size, epochs: f.epochs }
    }
}

fn parse_depths(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("`{p}` is not a depth")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [d, p, s] => Ok((d, p, s)),
        _ => Err("expected three comma-separated depths".into()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads.or(cfg.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Parse { input, emit_graph } => commands::parse(&input, emit_graph.as_deref()),
        Command::Augment { corpus_dir, n_pos, n_neg, max_chain, out } => {
            commands::augment(&corpus_dir, n_pos, n_neg, max_chain, cfg.seed, &out)
        }
        Command::Pretrain { dataset_dir, out, metrics, heldout, train } => {
            cfg.train = cfg.train.overridden(train.into());
            if heldout.is_some() {
                cfg.data.heldout = heldout;
            }
            commands::pretrain(&cfg, &dataset_dir, &out, metrics.as_deref())
        }
        Command::EvalRelations { dataset_dir, ckpt, out } => commands::eval_relations(&dataset_dir, &ckpt, out.as_deref()),
        Command::Embed { inputs, ckpt, out } => commands::embed(&inputs, &ckpt, &out),
        Command::TrainTask { task, data, sidecar, ckpt, depths, hidden, out, train } => {
            let ds = &mut cfg.downstream;
            if let Some((d, p, s)) = depths {
                (ds.encoder.d_d, ds.encoder.d_p, ds.encoder.d_s) = (d, p, s);
            }
            if let Some(h) = hidden {
                ds.encoder.hidden = h;
            }
            let section = match task {
                1 => &mut ds.task1,
                2 => &mut ds.task2,
                _ => &mut ds.task3,
            };
            *section = section.overridden(train.into());
            cfg.validate()?;
            commands::train_task(&cfg, task, data.as_deref(), sidecar.as_deref(), ckpt.as_deref(), &out)
        }
        Command::Surrogate { rows, out } => commands::surrogate(rows, cfg.seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; exit code 2 is reserved
            // for numeric failure.
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
