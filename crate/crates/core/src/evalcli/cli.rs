//! Command-line front end. Kept in the library so it can be driven from tests.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::checkpoint::checkpoint_load;
use super::config::ExperimentConfig;
use super::grid::export_decision_grid;
use super::runner::{
    evaluate_checkpoint, run_experiment, run_matrix, run_probe, run_sweep, run_teacher, SweepAxis,
    SweepSpec,
};
use crate::atesc::Distiller;
use crate::domains::make_toy_domains;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ntldfkd", version, about = "Non-transferable teachers, data-free distillation and trap escaping on 2D toy domains")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config; omitted sections and keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the teacher and distillation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "NTLDFKD_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads for sweeps and the matrix.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured teacher and export its checkpoint and grid.
    TrainTeacher,
    /// Train (or load) a teacher and distill a student from it.
    Distill {
        /// Overrides `eval.distiller`.
        #[arg(long)]
        distiller: Option<Distiller>,
    },
    /// Teacher prediction consistency under PGD, on ID and OOD test sets.
    Probe,
    /// Decision-region lattice of a saved model.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `eval.grid_resolution`.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// ATEsc runs over a grid of ε or λ values and seeds.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Read ε values as multiples of the ID blob std.
        #[arg(long)]
        relative: bool,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Every teacher variant under every distiller.
    Matrix,
    /// Accuracies of a saved model on the configured domains.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SweepAxisArg {
    Epsilon,
    Lambda,
}

pub fn resolve_config(global: &GlobalArgs) -> Result<ExperimentConfig> {
    let cfg = match &global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match global.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Executes a parsed command line; returns what should be printed.
pub fn execute(cli: Cli) -> Result<String> {
    let mut cfg = resolve_config(&cli.global)?;
    if let Command::Distill {
        distiller: Some(d),
    } = &cli.command
    {
        cfg.eval.distiller = *d;
    }
    if cli.global.print_config {
        return Ok(cfg.to_json());
    }
    let out = &cli.global.out;
    Ok(match cli.command {
        Command::TrainTeacher => {
            let m = run_teacher(&cfg, out)?;
            format!("teacher iacc={:.4} oacc={:.4} olacc={:.4}", m.iacc, m.oacc, m.olacc)
        }
        Command::Distill { .. } => {
            let o = run_experiment(&cfg, out)?;
            format!(
                "teacher iacc={:.4} olacc={:.4}\nstudent iacc={:.4} oacc={:.4} olacc={:.4}",
                o.teacher.iacc, o.teacher.olacc, o.student.iacc, o.student.oacc, o.student.olacc
            )
        }
        Command::Probe => {
            let curve = run_probe(&cfg, out)?;
            curve
                .iter()
                .map(|(k, id, ood)| format!("K={k} id={id:.4} ood={ood:.4}"))
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::Grid {
            checkpoint,
            resolution,
        } => {
            let pair = make_toy_domains(&cfg.domain)?;
            let model = checkpoint_load(&checkpoint)?.model;
            let r = resolution.unwrap_or(cfg.eval.grid_resolution);
            let path = out.join("grid.csv");
            write(&path, &export_decision_grid(&model, &pair.bounding_box, r)?)?;
            format!("wrote {}", path.display())
        }
        Command::Sweep {
            axis,
            values,
            relative,
            seeds,
        } => {
            let axis = match axis {
                SweepAxisArg::Epsilon => SweepAxis::Epsilon,
                SweepAxisArg::Lambda => SweepAxis::Lambda,
            };
            let scale = if relative && axis == SweepAxis::Epsilon {
                cfg.domain.std
            } else {
                1.0
            };
            let spec = SweepSpec {
                axis,
                values: values.iter().map(|v| v * scale).collect(),
                seeds: (0..seeds).collect(),
            };
            let pts = run_sweep(&cfg, &spec, out, cli.global.jobs)?;
            format!("{} runs, summary in {}", pts.len(), out.join("sweep_summary.csv").display())
        }
        Command::Matrix => {
            let cells = run_matrix(&cfg, out, cli.global.jobs)?;
            format!("{} cells, summary in {}", cells.len(), out.join("matrix_summary.csv").display())
        }
        Command::Eval { checkpoint } => {
            let m = evaluate_checkpoint(&cfg, &checkpoint)?;
            format!("iacc={:.4} oacc={:.4} olacc={:.4} asr={:.4}", m.iacc, m.oacc, m.olacc, m.asr)
        }
    })
}

/// Parses `args` and runs; clap handles `--help` and usage errors itself.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(Cli::parse_from(args))
}
