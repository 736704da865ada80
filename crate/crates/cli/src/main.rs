use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use koopmon::runner::{self, Overrides};
use koopmon::Error;

/// Mixed quantum-classical particle dynamics on two-level benchmark models.
#[derive(Parser)]
#[command(name = "koopmon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its artifacts.
    Run {
        /// TOML configuration file.
        config: Option<PathBuf>,
        /// Start from a built-in preset (see `presets`).
        #[arg(long)]
        preset: Option<String>,
        /// koopmon, ehrenfest, bohmion or soft.
        #[arg(long)]
        method: Option<String>,
        /// Override a configuration key, e.g. `--set n=200 --set init.mu_p=12`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compare completed runs of the same model.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// List built-in presets.
    Presets,
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_config_error() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, preset, method, set, out, workers } => {
            let overrides = Overrides { preset, method, set, output_dir: out, workers };
            let cfg = match &config {
                Some(path) => runner::load_config(path, &overrides),
                None => runner::preset_config(&overrides),
            };
            let cfg = match cfg {
                Ok(c) => c,
                Err(Error::Io(e)) => {
                    eprintln!("error: cannot read configuration: {e}");
                    return ExitCode::from(1);
                }
                Err(e) => return exit_for(&e),
            };
            match runner::run(&cfg) {
                Ok(outcome) => {
                    let s = &outcome.summary;
                    println!(
                        "{} {} finished: t = {}, P1 = {:.6}, purity = {:.6}, max drift = {:.3e}",
                        s.model, s.method, s.t_reached, s.final_p1, s.final_purity, s.max_energy_drift
                    );
                    println!("artifacts in {}", outcome.dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("partial artifacts in {}", cfg.output_dir.display());
                    exit_for(&e)
                }
            }
        }
        Command::Compare { dirs, json } => match runner::compare(&dirs) {
            Ok(report) => {
                if json {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                } else {
                    print!("{report}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => exit_for(&e),
        },
        Command::Presets => {
            for p in runner::presets() {
                println!(
                    "{:<8} {}\n         N = {}, alpha = {}, dt = {}, t_final = {}, snapshots {:?}",
                    p.name, p.description, p.n, p.alpha, p.dt, p.t_final, p.snapshot_times
                );
            }
            ExitCode::SUCCESS
        }
    }
}
