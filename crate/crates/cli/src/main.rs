use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stereopifu_cli::{
    cmd_depth, cmd_eval, cmd_gen, cmd_reconstruct, cmd_train, exit_code, PipelineConfig,
    ReconOptions, TrainOptions,
};

#[derive(Parser)]
#[command(
    name = "stpf",
    version,
    about = "Stereo implicit surface reconstruction at desk scale"
)]
struct Cli {
    /// Worker threads (defaults to STPF_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes with ground truth.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Two-stage training on a generated scene set.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Mesh a stereo pair with a trained model.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Scene file whose exact occupancy replaces the learned field.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Point-to-surface and Chamfer distances against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        recon: PathBuf,
        /// Ground-truth OBJ, or a scene file meshed internally.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Predicted disparity, depth and normal maps.
    Depth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
    },
}

enum Failure {
    Config(stereopifu::Error),
    Run(stereopifu::Error),
}

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let cfg = match &common.config {
        Some(path) => PipelineConfig::load(path).map_err(Failure::Config)?,
        None => PipelineConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn configure_threads(flag: Option<usize>) -> Result<(), Failure> {
    let env = std::env::var("STPF_THREADS").ok();
    let threads = match (flag, env) {
        (Some(n), _) => Some(n),
        (None, Some(v)) => Some(v.trim().parse::<usize>().map_err(|_| {
            Failure::Config(stereopifu::Error::Config(format!(
                "STPF_THREADS must be a positive integer, got {v:?}"
            )))
        })?),
        (None, None) => None,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Config(stereopifu::Error::Config(
                "thread count must be >= 1".into(),
            )));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(stereopifu::Error::Config(e.to_string())))?;
    }
    Ok(())
}

fn print_path(label: &str, path: &Path) {
    println!("{label}: {}", path.display());
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Gen { common } => {
            let cfg = load_config(&common)?;
            let manifest = cmd_gen(&cfg, &common.out).map_err(Failure::Run)?;
            println!("generated {} scenes", manifest.scenes.len());
            print_path(
                "manifest",
                &common.out.join(stereopifu_cli::dataset::MANIFEST),
            );
        }
        Command::Train {
            common,
            data,
            resume,
            max_epochs,
        } => {
            let cfg = load_config(&common)?;
            let opts = TrainOptions { resume, max_epochs };
            let logs = cmd_train(&cfg, &data, &common.out, &opts).map_err(Failure::Run)?;
            if let Some(last) = logs.last() {
                println!(
                    "stage {} epoch {} loss {}",
                    last.stage, last.epoch, last.loss
                );
            }
            print_path(
                "checkpoint",
                &common.out.join(stereopifu_cli::commands::CHECKPOINT),
            );
        }
        Command::Reconstruct {
            common,
            model,
            left,
            right,
            oracle,
        } => {
            let grid = match &common.config {
                Some(_) => Some(
                    load_config(&common)?
                        .recon_grid()
                        .map_err(Failure::Config)?,
                ),
                None => None,
            };
            let opts = ReconOptions { oracle, grid };
            let out =
                cmd_reconstruct(&model, &left, &right, &common.out, &opts).map_err(Failure::Run)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} vertices, {} triangles",
                out.mesh.vertices.len(),
                out.mesh.triangles.len()
            );
            print_path("mesh", &common.out.join(stereopifu_cli::commands::MESH));
        }
        Command::Eval { common, recon, gt } => {
            load_config(&common)?;
            let report = cmd_eval(&recon, &gt, &common.out).map_err(Failure::Run)?;
            println!("{}", report.metrics);
            print_path("report", &common.out.join(stereopifu_cli::commands::REPORT));
        }
        Command::Depth {
            common,
            model,
            left,
            right,
        } => {
            load_config(&common)?;
            cmd_depth(&model, &left, &right, &common.out).map_err(Failure::Run)?;
            print_path("depth", &common.out.join(stereopifu_cli::commands::DEPTH));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
