use std::path::PathBuf;
use std::process::ExitCode;

use basinscape::pipeline::{
    cmd_evaluate, cmd_generate, cmd_histogram, cmd_plot, cmd_screen, cmd_simulate, PipelineError, RunConfig,
};
use clap::{Args, Parser, Subcommand};

/// Basin-stability landscapes for second-order Kuramoto power-grid models.
///
/// All data goes to files under the output directory; progress and errors
/// go to standard error.
#[derive(Debug, Parser)]
#[command(name = "basinscape", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON run configuration; flags given here override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Number of graphs.
    #[arg(long, global = true)]
    graphs: Option<usize>,
    /// Nodes per graph (even).
    #[arg(long, global = true)]
    nodes: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Perturbation trials per node.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Landscape grid resolution M.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Simulation horizon in seconds.
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Synchronization threshold on the final frequency.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw graphs with stable operating points and write the manifest.
    Generate,
    /// Compute landscapes, training labels and final-frequency histograms.
    Simulate,
    /// Rank critical perturbation cells from truth or from predictions.
    Screen {
        /// Directory of per-graph prediction CSVs (`graph_00000.csv`, ...).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Score predicted heatmaps against the simulated landscapes.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Pool the per-graph final-frequency histograms.
    Histogram,
    /// Render landscapes and critical-cell overlays as PGM images.
    Plot,
}

fn resolve(o: &Overrides) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.graphs {
        cfg.graphs = v;
    }
    if let Some(v) = o.nodes {
        cfg.growth.target_n = v;
    }
    if let Some(v) = o.seed {
        cfg.master_seed = v;
    }
    if let Some(v) = o.samples {
        cfg.n_trials = v;
    }
    if let Some(v) = o.grid {
        cfg.grid_res = v;
    }
    if let Some(v) = o.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = o.horizon {
        cfg.sim.horizon = v;
    }
    if let Some(v) = o.threshold {
        cfg.sim.sync_threshold = v;
    }
    if let Some(v) = &o.out {
        cfg.output_dir = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = resolve(&cli.overrides)?;
    match &cli.command {
        Command::Generate => {
            let r = cmd_generate(&cfg)?;
            log::info!(
                "{} graphs, mean {:.2} edges, {} rejected draws, {:.1} s",
                r.graphs,
                r.mean_edges,
                r.rejected.len(),
                r.timing.wall_time_s
            );
        }
        Command::Simulate => {
            let r = cmd_simulate(&cfg)?;
            log::info!(
                "mean SNBS {:.4}, {} failed trials, {:.1} s wall, {:.1} s CPU",
                r.mean_snbs,
                r.failed_trials,
                r.timing.wall_time_s,
                r.timing.cpu_time_s
            );
        }
        Command::Screen { predictions } => {
            let cells = cmd_screen(&cfg, predictions.as_deref())?;
            log::info!(
                "ranked {} critical cells over {} graphs",
                cells.values().map(Vec::len).sum::<usize>(),
                cells.len()
            );
        }
        Command::Evaluate { predictions } => {
            let r = cmd_evaluate(&cfg, predictions)?;
            log::info!(
                "SSIM {:.4}, R2 {:.4}, IoU {:.4}, relaxed {:.4}",
                r.ssim_mean,
                r.r2,
                r.iou_topk,
                r.relaxed_containment
            );
        }
        Command::Histogram => {
            let h = cmd_histogram(&cfg)?;
            log::info!(
                "{} outcomes, {:.4} above threshold",
                h.total,
                h.frac_above_threshold
            );
        }
        Command::Plot => {
            let n = cmd_plot(&cfg)?;
            log::info!("wrote {n} images");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let report = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{report}");
            ExitCode::from(code as u8)
        }
    }
}
