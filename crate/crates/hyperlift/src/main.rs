//! Command-line front door. Flags override config-file values; the resolved
//! config is echoed into the output directory. On failure a machine-readable
//! error record is printed to stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use hyperlift::cli::{
    cmd_bench, cmd_eval, cmd_kernels, cmd_sample, cmd_train, CliError, DataSource, RunConfig,
};
use hyperlift::denoiser::{Fusion, GraphScale};

#[derive(Parser)]
#[command(
    name = "hyperlift",
    about = "2D-to-3D pose lifting: diffusion sampling with a multi-scale hypergraph GCN denoiser"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run-config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (mandatory, here or in the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Skeleton file path, or "default" for the built-in 17-joint skeleton.
    #[arg(long)]
    skeleton: Option<String>,
    /// Embedding width d_m.
    #[arg(long)]
    dm: Option<usize>,
    /// Number of stacked blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Branch fusion strategy: weighted, concat, or product.
    #[arg(long, value_parser = Fusion::from_str)]
    fusion: Option<Fusion>,
    /// Comma-separated graph scales, e.g. joint,part,body.
    #[arg(long)]
    scales: Option<String>,
    /// Total diffusion timesteps T.
    #[arg(long)]
    timesteps: Option<usize>,
    /// Hypothesis count H.
    #[arg(long)]
    hypotheses: Option<usize>,
    /// Refinement iterations K.
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory for artifacts and the resolved config echo.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Record file (one JSON document per line).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate a synthetic dataset with this many records instead.
    #[arg(long, conflicts_with = "data")]
    synth: Option<usize>,
    /// Gaussian noise applied to synthetic 2D keypoints.
    #[arg(long)]
    noise_2d: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser and write a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Minibatch size.
        #[arg(long)]
        batch: Option<usize>,
        /// Adam learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Millimeters-per-model-unit normalization.
        #[arg(long)]
        pose_scale: Option<f64>,
    },
    /// Sample pose hypotheses from a checkpoint.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prediction file to write (defaults to <out>/predictions.jsonl).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Score a prediction file against ground truth.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Report parameter and FLOP counts plus measured throughput.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Wall-clock measurement window in seconds (0 disables timing).
        #[arg(long)]
        bench_seconds: Option<f64>,
    },
    /// Print the convolution kernels and degree vectors.
    Kernels {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn parse_scales(text: &str) -> Result<Vec<GraphScale>, CliError> {
    let scales: Result<Vec<GraphScale>, String> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| GraphScale::from_str(s.trim()))
        .collect();
    let scales = scales.map_err(CliError::Config)?;
    if scales.is_empty() {
        return Err(CliError::Config("scales flag is empty".into()));
    }
    Ok(scales)
}

fn base_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = Some(seed);
    }
    if let Some(skeleton) = &common.skeleton {
        config.skeleton = skeleton.clone();
    }
    if let Some(dm) = common.dm {
        config.denoiser.embed_dim = dm;
    }
    if let Some(blocks) = common.blocks {
        config.denoiser.blocks = blocks;
    }
    if let Some(fusion) = common.fusion {
        config.denoiser.fusion = fusion;
    }
    if let Some(scales) = &common.scales {
        config.denoiser.scales = parse_scales(scales)?;
    }
    if let Some(timesteps) = common.timesteps {
        config.timesteps = timesteps;
    }
    if let Some(h) = common.hypotheses {
        config.hypotheses = h;
    }
    if let Some(k) = common.iterations {
        config.iterations = k;
    }
    if let Some(out) = &common.out {
        config.out = Some(out.display().to_string());
    }
    Ok(config)
}

fn apply_data_args(config: &mut RunConfig, data: &DataArgs) {
    if let Some(path) = &data.data {
        config.data = Some(DataSource::Path(path.display().to_string()));
    } else if let Some(records) = data.synth {
        config.data = Some(DataSource::Synth {
            records,
            noise_2d: data.noise_2d.unwrap_or(0.0),
        });
    } else if let (Some(noise), Some(DataSource::Synth { records, .. })) =
        (data.noise_2d, config.data.clone())
    {
        config.data = Some(DataSource::Synth {
            records,
            noise_2d: noise,
        });
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            common,
            data,
            epochs,
            batch,
            lr,
            pose_scale,
        } => {
            let mut config = base_config(&common)?;
            apply_data_args(&mut config, &data);
            if let Some(epochs) = epochs {
                config.epochs = epochs;
            }
            if let Some(batch) = batch {
                config.batch_size = batch;
            }
            if let Some(lr) = lr {
                config.optimizer.lr = lr;
            }
            if let Some(scale) = pose_scale {
                config.pose_scale = scale;
            }
            let summary = cmd_train(&config)?;
            println!("{summary}");
        }
        Command::Sample {
            common,
            data,
            checkpoint,
            predictions,
        } => {
            let mut config = base_config(&common)?;
            apply_data_args(&mut config, &data);
            if let Some(path) = checkpoint {
                config.checkpoint = Some(path.display().to_string());
            }
            if let Some(path) = predictions {
                config.predictions = Some(path.display().to_string());
            }
            let summary = cmd_sample(&config)?;
            println!("{summary}");
        }
        Command::Eval {
            common,
            data,
            predictions,
        } => {
            let mut config = base_config(&common)?;
            apply_data_args(&mut config, &data);
            if let Some(path) = predictions {
                config.predictions = Some(path.display().to_string());
            }
            let report = cmd_eval(&config)?;
            println!("{report}");
        }
        Command::Bench {
            common,
            bench_seconds,
        } => {
            let mut config = base_config(&common)?;
            if let Some(secs) = bench_seconds {
                config.bench_seconds = secs;
            }
            let report = cmd_bench(&config)?;
            println!("{report}");
            if let Some(fps) = report.poses_per_second {
                eprintln!("poses_per_second (wall clock, not reproducible): {fps:.1}");
            }
        }
        Command::Kernels { common } => {
            let config = base_config(&common)?;
            let text = cmd_kernels(&config)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let record = serde_json::json!({
            "error": { "kind": err.kind(), "message": err.to_string() }
        });
        eprintln!("{record}");
        std::process::exit(1);
    }
}
