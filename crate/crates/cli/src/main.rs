//! `visitembed`: generate a synthetic corpus, fit preprocessing, train the
//! hybrid network, extract embeddings, evaluate and probe them.
//!
//! Every stage reads its inputs from and writes its outputs to one output
//! directory, next to a `<stage>.manifest.json` recording input and output
//! hashes, the configuration, the seed and the wall time.

mod config;
mod error;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliError;
use stages::Stage;

#[derive(Parser, Debug)]
#[command(
    name = "visitembed",
    version,
    about = "Visit embeddings from notes and structured events"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; omitted keys take the desk-scale defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory for artifacts and manifests
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives the fully sequential path
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct FeaturizeArgs {
    /// Number of structured features kept by chi-square selection
    #[arg(long, value_name = "K")]
    k_features: Option<usize>,
    /// Token truncation length (0 uses the percentile length)
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// Maximum training epochs
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Adam learning rate
    #[arg(long, value_name = "F64")]
    lr: Option<f64>,
    /// Stays per gradient step
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct ProbeArgs {
    /// Minimum stays per group in the concept scan
    #[arg(long, value_name = "N")]
    min_group_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (dataset.jsonl)
    Generate,
    /// Assign patients to train/validation/test (splits.csv)
    Split,
    /// Fit vocabulary, truncation and feature selection on train (preprocessing.json)
    Featurize(FeaturizeArgs),
    /// Train the hybrid network (model.ckpt, history.csv)
    Train(TrainArgs),
    /// Extract an embedding for every stay (embeddings.csv)
    Embed,
    /// Compare rf, deep and emb+rf on the test split (metrics.csv, metrics_table.txt)
    Eval,
    /// Concept-direction scan and random-cosine baseline (probe.csv, probe_baseline.json)
    Probe(ProbeArgs),
    /// Run every stage in order
    Pipeline {
        #[command(flatten)]
        featurize: FeaturizeArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        probe: ProbeArgs,
    },
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

impl FeaturizeArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.k_features, self.k_features);
        set(&mut cfg.max_len, self.max_len);
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.max_epochs, self.epochs);
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.batch_size, self.batch_size);
    }
}

impl ProbeArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.min_group_size, self.min_group_size);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.global.seed);
    set(&mut cfg.out_dir, cli.global.out);
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("--threads {n}: {e}")))?;
    }

    let stages: Vec<Stage> = match &cli.command {
        Command::Generate => vec![Stage::Generate],
        Command::Split => vec![Stage::Split],
        Command::Featurize(a) => {
            a.apply(&mut cfg);
            vec![Stage::Featurize]
        }
        Command::Train(a) => {
            a.apply(&mut cfg);
            vec![Stage::Train]
        }
        Command::Embed => vec![Stage::Embed],
        Command::Eval => vec![Stage::Eval],
        Command::Probe(a) => {
            a.apply(&mut cfg);
            vec![Stage::Probe]
        }
        Command::Pipeline {
            featurize,
            train,
            probe,
        } => {
            featurize.apply(&mut cfg);
            train.apply(&mut cfg);
            probe.apply(&mut cfg);
            Stage::ALL.to_vec()
        }
    };
    for stage in stages {
        stages::run(stage, &cfg)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
