//! Command-line front end: fit, select, segment, simulate, risk and slope
//! commands over CSV/CUBE1 datasets, with TOML configuration files mirrored
//! by flags (flags win). Exit codes: 1 usage/validation, 2 data/I-O,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use condens::io::{self, RunConfig};
use condens::Error;

mod commands;

#[derive(Parser)]
#[command(name = "condens", about = "Partition-based conditional density estimation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Shared {
    /// Input dataset (.csv or .cube)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap
    #[arg(long)]
    threads: Option<usize>,
    /// TOML configuration file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct SelectionFlags {
    #[arg(long)]
    collection_x: Option<String>,
    #[arg(long)]
    collection_y: Option<String>,
    /// Maximum-degree candidates, e.g. --degrees 0,1
    #[arg(long, value_delimiter = ',')]
    degrees: Option<Vec<usize>>,
    /// Component-count candidates, e.g. --k-range 1,2,3
    #[arg(long, value_delimiter = ',')]
    k_range: Option<Vec<usize>>,
    /// Covariance constraint pattern: free | common | common_volume
    #[arg(long)]
    cov_spec: Option<String>,
    /// slope | theoretical | manual
    #[arg(long)]
    penalty_mode: Option<String>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Growth-rule sample size (defaults to the dataset size)
    #[arg(long)]
    rule_n: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct DivergenceFlags {
    #[arg(long)]
    rho: Option<f64>,
    /// grid:<points per axis> | mc:<samples>
    #[arg(long)]
    quadrature: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a single model with a fixed partition shape
    Fit {
        #[command(flatten)]
        shared: Shared,
        /// poly | gmm
        #[arg(long)]
        model: Option<String>,
        /// Uniform dyadic X-partition depth
        #[arg(long)]
        x_depth: Option<u32>,
        /// Uniform dyadic Y-partition depth (poly)
        #[arg(long)]
        y_depth: Option<u32>,
        /// Maximum degree per response axis (poly), e.g. --degree 1,1
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        degree: Option<Vec<i64>>,
        /// Component count (gmm)
        #[arg(long)]
        k: Option<usize>,
    },
    /// Penalized model selection over a partition collection
    Select {
        #[command(flatten)]
        shared: Shared,
        /// poly | gmm
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        selection: SelectionFlags,
    },
    /// MAP segmentation of a dataset under a fitted mixture model
    Segment {
        #[command(flatten)]
        shared: Shared,
        /// Fitted model document (JSON)
        #[arg(long)]
        model_file: PathBuf,
    },
    /// Draw a synthetic dataset from a scenario
    Simulate {
        #[command(flatten)]
        shared: Shared,
        /// Scenario TOML file
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Risk curve of an estimator against a scenario truth
    Risk {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        divergence: DivergenceFlags,
    },
    /// Slope-heuristic calibration diagnostics on a scenario model grid
    Slope {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Contract(_) | Error::Calibration(_) | Error::Selection(_) => 1,
        Error::Format(_) | Error::Io(_) => 2,
        Error::Domain(_)
        | Error::Resource(_)
        | Error::LinearAlgebra(_)
        | Error::Degenerate { .. }
        | Error::Sampler(_) => 3,
    }
}

fn load_config(shared: &Shared) -> Result<RunConfig, Error> {
    let mut cfg = match &shared.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        data: shared.data.as_ref().map(|p| p.display().to_string()),
        out: shared.out.as_ref().map(|p| p.display().to_string()),
        seed: shared.seed,
        threads: shared.threads,
        ..Default::default()
    };
    cfg = cfg.merged_under(flags);
    if let Some(threads) = cfg.threads {
        // A second init in the same process is fine to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = PathBuf::from(cfg.out.clone().unwrap_or_else(|| ".".to_string()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read_dataset(path: &Path) -> Result<(condens::Dataset, Option<(usize, usize)>), Error> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("cube") => {
            let bytes = std::fs::read(path)?;
            let img = io::decode_cube(&bytes)?;
            let grid = (img.height, img.width);
            Ok((img.to_dataset()?, Some(grid)))
        }
        _ => {
            let text = std::fs::read_to_string(path)?;
            Ok((io::parse_dataset_csv(&text)?, None))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit { shared, model, x_depth, y_depth, degree, k } => {
            commands::cmd_fit(&shared, model, x_depth, y_depth, degree, k)
        }
        Command::Select { shared, model, selection } => {
            commands::cmd_select(&shared, model, &selection)
        }
        Command::Segment { shared, model_file } => commands::cmd_segment(&shared, &model_file),
        Command::Simulate { shared, scenario, n } => commands::cmd_simulate(&shared, &scenario, n),
        Command::Risk { shared, scenario, divergence } => {
            commands::cmd_risk(&shared, &scenario, &divergence)
        }
        Command::Slope { shared, scenario, n } => commands::cmd_slope(&shared, &scenario, n),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
