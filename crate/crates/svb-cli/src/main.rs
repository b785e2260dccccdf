//! `svb`: batch commands over the speaker-verification back-end library.
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::path::PathBuf;

use clap::Parser;

mod commands;
mod config;

use config::Settings;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(svb_core::Error),
}

impl From<svb_core::Error> for CliError {
    fn from(e: svb_core::Error) -> Self {
        CliError::Data(e)
    }
}

#[derive(Parser)]
#[command(
    name = "svb",
    version,
    about = "Speaker-verification back-end: scoring, normalization, calibration, metrics, clustering, adaptation"
)]
struct Cli {
    /// Config file (key = value); $SVB_CONFIG is used when absent
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every randomized operation (default 42)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: commands::Command,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                0
            } else {
                1
            };
        }
    };
    let mut settings = match Settings::load(cli.config.as_deref()) {
        Ok(s) => s,
        Err(e) => return report(e),
    };
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return report(CliError::Usage("--threads must be at least 1".into()));
        }
        settings.threads = Some(threads);
    }
    if let Some(threads) = settings.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure the thread pool: {e}");
            return 1;
        }
    }
    match commands::run(&cli.command, &settings) {
        Ok(()) => 0,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> i32 {
    match e {
        CliError::Usage(msg) => {
            eprintln!("error: {msg}");
            1
        }
        CliError::Data(err) => {
            eprintln!("error: {err}");
            2
        }
    }
}
