mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::RunContext;
use config::RunConfig;
use error::{validation, CliResult};

#[derive(Parser)]
#[command(name = "mmnav", version, about = "Multi-magnification slide navigation pipeline")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.steps=50`. Repeatable; flags win over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-slide parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Accept upstream artifacts produced under a different config hash.
    #[arg(long, global = true)]
    allow_mixed: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic slides with planted tumors and navigation maps.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(short = 'n', long)]
        slides: Option<usize>,
    },
    /// Train the fusion network with the navigation-driven loss.
    TrainCmt {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the navigation agent on every slide and write JSONL traces.
    Navigate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the slides' navigation annotations as heatmaps.
        #[arg(long)]
        oracle: bool,
        /// `heuristic`, `remote` or `scripted:<policy>`.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate the bag classifier over patch budgets.
    Classify {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Comma-separated budget fractions.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score heatmaps against the navigation annotations and tumor masks.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-level PNG overlays of heatmaps and trace regions.
    Render {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        slide: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    match &cli.command {
        Command::Synth { slides: Some(n), .. } => overrides.push(format!("num_slides={n}")),
        Command::TrainCmt { steps: Some(s), .. } => overrides.push(format!("train.steps={s}")),
        Command::Navigate { backend: Some(b), .. } => {
            overrides.push(format!("backend.selection={}", serde_json::to_string(b)?))
        }
        Command::Classify { budgets: Some(b), .. } => overrides.push(format!("budgets={}", serde_json::to_string(b)?)),
        _ => {}
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides).map_err(validation)?;
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    let root = config.output_dir.clone();
    let ctx = RunContext {
        hash: config.hash(),
        config,
        force: cli.force,
        allow_mixed: cli.allow_mixed,
    };
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| root.join("data"));
    let out_dir = |o: &Option<PathBuf>, name: &str| o.clone().unwrap_or_else(|| root.join(name));
    let default_ckpt = root.join("model").join(commands::CHECKPOINT);
    match &cli.command {
        Command::Synth { out, .. } => commands::cmd_synth(&ctx, &out_dir(out, "data")),
        Command::TrainCmt { data, out, .. } => commands::cmd_train(&ctx, &data_dir(data), &out_dir(out, "model")),
        Command::Navigate {
            data,
            checkpoint,
            oracle,
            out,
            ..
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| default_ckpt.clone());
            commands::cmd_navigate(&ctx, &data_dir(data), Some(&ckpt), *oracle, &out_dir(out, "navigate"))
        }
        Command::Classify { data, traces, out, .. } => {
            let traces = traces.clone().unwrap_or_else(|| root.join("navigate").join("traces"));
            commands::cmd_classify(&ctx, &data_dir(data), &traces, &out_dir(out, "classify"))
        }
        Command::Evaluate {
            data,
            checkpoint,
            oracle,
            out,
        } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| default_ckpt.clone());
            commands::cmd_evaluate(&ctx, &data_dir(data), Some(&ckpt), *oracle, &out_dir(out, "evaluate"))
        }
        Command::Render {
            data,
            slide,
            checkpoint,
            oracle,
            trace,
            out,
        } => commands::cmd_render(
            &ctx,
            &data_dir(data),
            slide,
            checkpoint.as_deref(),
            *oracle,
            trace.as_deref(),
            &out_dir(out, "render"),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.kind as u8)
        }
    }
}
