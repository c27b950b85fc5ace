use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedabc_cli::compare::{compare, render_table, write_csv};
use fedabc_cli::{ablation_grid, apply_env, parse_config, run_experiment, CliError};

#[derive(Parser)]
#[command(name = "fedabc", version, about = "Personalized federated learning simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured seed and write the run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` overrides applied after the file.
        overrides: Vec<String>,
    },
    /// Tabulate the summary rows of stored runs.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write the comparison CSV.
        #[arg(long, default_value = "comparison.csv")]
        out: PathBuf,
    },
    /// Run the four loss-toggle arms with FedABC and compare them.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let mut cfg = parse_config(&config, &overrides)?;
            apply_env(&mut cfg);
            let out = run_experiment(&cfg)?;
            println!(
                "{}: {} seeds, final pfl_acc {:.4}, drift {:.4}",
                out.dir.display(),
                out.seeds.len(),
                out.mean_pfl_accuracy(),
                out.mean_drift()
            );
        }
        Command::Compare { dirs, out } => {
            let rows = compare(&dirs)?;
            print!("{}", render_table(&rows));
            write_csv(&rows, &out)?;
        }
        Command::Ablation { config, overrides } => {
            let mut base = parse_config(&config, &overrides)?;
            apply_env(&mut base);
            let mut dirs = Vec::new();
            for (name, cfg) in ablation_grid(&base) {
                let out = run_experiment(&cfg)?;
                eprintln!("{name}: final pfl_acc {:.4}", out.mean_pfl_accuracy());
                dirs.push(cfg.output_dir);
            }
            let rows = compare(&dirs)?;
            print!("{}", render_table(&rows));
            write_csv(&rows, &base.output_dir.join("comparison.csv"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedabc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
