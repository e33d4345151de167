//! Command-line entry point: training phases, evaluation, depth-image
//! rendering, and training-curve plots.
//!
//! Exit codes: 0 ok, 2 config error, 3 numerical fault, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pointfoot_core::depthcam::render_depth;
use pointfoot_core::distill::BarlowMode;
use pointfoot_core::harness::{
    evaluate_checkpoint, plot::plot_runs, train_student, train_teacher, RunConfig,
};
use pointfoot_core::terrain::{generate_terrain, TerrainKind};
use pointfoot_core::Error;

#[derive(Parser)]
#[command(name = "pointfoot-lab", version, about = "Terrain-curriculum biped locomotion lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BarlowModeArg {
    Standard,
    Literal,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Environment count override.
    #[arg(long)]
    envs: Option<usize>,
    /// Iteration count override for the phase being run.
    #[arg(long)]
    iters: Option<usize>,
    /// Write a per-step trace CSV for environment 0.
    #[arg(long)]
    trace: bool,
    /// Barlow Twins objective form.
    #[arg(long, value_enum)]
    barlow_mode: Option<BarlowModeArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Phase one: PPO teacher (or the Blind baseline when depth is off).
    TrainTeacher(CommonArgs),
    /// Phase two: distill the depth student from a teacher checkpoint.
    TrainStudent {
        #[command(flatten)]
        common: CommonArgs,
        /// Teacher checkpoint path.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint over the fixed-proportion terrain fleet.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render depth images (PGM) and terrain grids (CSV) for inspection.
    RenderDepth(CommonArgs),
    /// Overlay metrics CSVs into SVG charts.
    Plot {
        #[command(flatten)]
        common: CommonArgs,
        /// Metrics CSV files.
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::defaults(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(envs) = common.envs {
        cfg.env_count = envs;
    }
    if let Some(mode) = common.barlow_mode {
        cfg.distill.mode = match mode {
            BarlowModeArg::Standard => BarlowMode::Standard,
            BarlowModeArg::Literal => BarlowMode::Literal,
        };
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainTeacher(common) => {
            let mut cfg = load_config(&common)?;
            if let Some(iters) = common.iters {
                cfg.teacher_iterations = iters;
            }
            let outcome = train_teacher(&cfg, &common.out, common.trace)?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics:    {}", outcome.metrics_csv.display());
        }
        Command::TrainStudent { common, checkpoint } => {
            let mut cfg = load_config(&common)?;
            if let Some(iters) = common.iters {
                cfg.student_iterations = iters;
            }
            let outcome = train_student(&cfg, &checkpoint, &common.out, common.trace)?;
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics:    {}", outcome.metrics_csv.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let report = evaluate_checkpoint(&cfg, &checkpoint)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("eval.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&report).map_err(Error::from)?,
            )?;
            println!(
                "{:<8} {:>10} {:>10} {:>10}",
                "terrain", "vel err", "h err", "survival"
            );
            for (kind, s) in &report.per_terrain {
                println!(
                    "{:<8} {:>10.3} {:>10.3} {:>10.1}",
                    kind, s.velocity_error, s.height_error, s.survival_s
                );
            }
            println!(
                "{:<8} {:>10.3} {:>10.3} {:>10.1}",
                "all", report.velocity_error, report.height_error, report.survival_s
            );
            println!("report: {}", path.display());
        }
        Command::RenderDepth(common) => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let difficulty = cfg.eval.difficulty;
            for kind in TerrainKind::ALL {
                let hf = generate_terrain(
                    kind,
                    difficulty,
                    cfg.env.terrain_extent,
                    cfg.env.terrain_cell,
                    cfg.seed,
                )?;
                let pose = nalgebra::Vector3::new(0.0, 0.0, hf.sample(0.0, 0.0) + 0.66);
                let img = render_depth(
                    &hf,
                    pose,
                    &nalgebra::UnitQuaternion::identity(),
                    &cfg.env.camera,
                    0.0,
                );
                let pgm = common.out.join(format!("depth_{}.pgm", kind.name()));
                std::fs::write(&pgm, img.to_pgm())?;
                let csv = common.out.join(format!("terrain_{}.csv", kind.name()));
                std::fs::write(&csv, hf.to_csv())?;
                println!("{} + {}", pgm.display(), csv.display());
            }
        }
        Command::Plot { common, csvs } => {
            let written = plot_runs(&csvs, &common.out)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config { .. } | Error::InvalidParameter(_) => ExitCode::from(2),
                Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
