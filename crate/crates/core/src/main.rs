use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tmegraph::cli::{self, RunConfig};
use tmegraph::ingest::Region;
use tmegraph::model::ModelChoice;
use tmegraph::Result;

#[derive(Parser)]
#[command(name = "tmegraph", version, about = "Cell/tile graph pipeline for tumour microenvironment staging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// gcn-mean, gcn-add, gcn-max, mil-att, mil-mean or mlp.
    #[arg(long)]
    model: Option<ModelChoice>,
    /// Restrict to one region: Centre, Front, Mucosa or Stroma.
    #[arg(long)]
    region: Option<Region>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Phenotype cells and build tile/cell graphs and metrics.
    Build {
        #[command(flatten)]
        common: Common,
        /// Cell table; defaults to the config path.
        #[arg(long)]
        cells: Option<PathBuf>,
        /// RoI label table; defaults to the config path.
        #[arg(long)]
        rois: Option<PathBuf>,
    },
    /// Train over patient-level splits and report weighted F1.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory of build.
        #[arg(long)]
        built: Option<PathBuf>,
        /// JSON list of splits to use instead of random ones.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Score a checkpoint on its held-out RoIs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by train.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory of build.
        #[arg(long)]
        built: Option<PathBuf>,
    },
    /// Attribute predictions to tiles, edges and features.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by train.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory of build.
        #[arg(long)]
        built: Option<PathBuf>,
        /// Also list the K most important tiles per RoI.
        #[arg(long)]
        top_k: Option<usize>,
    },
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.model {
        cfg.model_name = m;
    }
    if c.region.is_some() {
        cfg.region = c.region;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    cli::init_threads()?;
    let m = match &cli.command {
        Command::Synth { common } => cli::cmd_synth(&config(common)?, &common.out)?,
        Command::Build { common, cells, rois } => {
            cli::cmd_build(&config(common)?, cells.as_deref(), rois.as_deref(), &common.out)?
        }
        Command::Train { common, built, split } => {
            cli::cmd_train(&config(common)?, built.as_deref(), split.as_deref(), &common.out)?
        }
        Command::Evaluate {
            common,
            checkpoint,
            built,
        } => cli::cmd_evaluate(&config(common)?, checkpoint.as_deref(), built.as_deref(), &common.out)?,
        Command::Explain {
            common,
            checkpoint,
            built,
            top_k,
        } => cli::cmd_explain(
            &config(common)?,
            checkpoint.as_deref(),
            built.as_deref(),
            *top_k,
            &common.out,
        )?,
    };
    log::info!("{} done in {:.1}s", m.command, m.wall_time_s);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
