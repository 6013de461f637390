use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use meshinvert::{run, ExperimentConfig, Overrides};

/// Wave-equation inverse problems on irregular meshes.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// Task to run; overrides `task` in the config file. One of gen-mesh,
    /// gen-data, train-gnn, train-prior, solve, eval, report.
    task: Option<String>,
    /// Experiment configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent solves.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MESHINVERT_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let overrides = Overrides {
        task: cli.task,
        seed: cli.seed,
        jobs: cli.jobs,
        out: cli.out,
    };
    let result = ExperimentConfig::from_file(&cli.config, &overrides).and_then(|cfg| run(&cfg));
    match result {
        Ok(summary) => {
            log::info!("wrote {} artifacts, manifest {}", summary.artifacts.len(), summary.manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
