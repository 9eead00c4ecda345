use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tumour_rom::config::{Command, RunConfig};
use tumour_rom::runner::run;

#[derive(Parser)]
#[command(name = "tumour-rom", version, about = "Tumour growth parameter estimation with POD/DEIM reduced models")]
struct Cli {
    #[command(subcommand)]
    action: Action,
}

#[derive(Subcommand)]
enum Action {
    /// Execute a run configuration.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Phantom RNG seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (overrides the config and TUMOUR_ROM_THREADS).
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_enum)]
        command: Option<Command>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.action {
        Action::DefaultConfig => {
            let cfg = RunConfig::default();
            println!("{}", serde_json::to_string_pretty(&cfg).expect("serializable"));
            ExitCode::SUCCESS
        }
        Action::Run {
            config,
            out,
            seed,
            threads,
            command,
        } => {
            let mut cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(e.exit_code() as u8);
                }
            };
            if let Some(out) = out {
                cfg.output = out;
            }
            if seed.is_some() {
                cfg.seed = seed;
            }
            if threads.is_some() {
                cfg.threads = threads;
            }
            if let Some(c) = command {
                cfg.command = c;
            }
            match run(&cfg) {
                Ok(outcome) => {
                    println!("{}", outcome.summary);
                    ExitCode::from(outcome.exit_code as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
