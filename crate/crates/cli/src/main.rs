use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use keldysh_cli::{run_file, thread_count, CliError, THREADS_ENV};

/// Runs a Keldysh-contour simulation described by a JSON config.
#[derive(Debug, Parser)]
#[command(name = "keldysh", version)]
struct Args {
    /// Path to the run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the KELDYSH_THREADS environment variable.
    #[arg(long)]
    threads: Option<usize>,
    /// Base seed; overrides `base_seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let env = std::env::var(THREADS_ENV).ok();
    match thread_count(args.threads, env.as_deref()) {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                return fail(&CliError::io(format!("thread pool: {e}")));
            }
        }
        Ok(None) => {}
        Err(e) => return fail(&e),
    }
    match run_file(&args.config, args.out.as_deref(), args.seed) {
        Ok((dir, output)) => {
            if let Some(e) = output.failure {
                if let Err(io) = std::fs::write(dir.join("error.json"), e.to_json() + "\n") {
                    eprintln!("{}", CliError::from(io).to_json());
                }
                return fail(&e);
            }
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
