use std::process::ExitCode;

use clap::Parser;
use tlhmm_scene::cli::{self, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match cli::run(cli) {
        Ok(outcome) if outcome.failures.is_empty() => {
            println!("{}", outcome.out_dir.display());
            ExitCode::SUCCESS
        }
        Ok(outcome) => {
            for f in &outcome.failures {
                eprintln!("failed event {}: {}", f.event_id, f.error);
            }
            eprintln!("{} event(s) failed; outputs in {}", outcome.failures.len(), outcome.out_dir.display());
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
