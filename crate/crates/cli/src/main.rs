use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afm_core::harness::{self, read_rounds, write_plot_data, RunConfig, RunOutput};
use afm_core::verify;
use afm_core::AfmError;
use clap::{Args, Parser, Subcommand};

/// Active flow matching: run, compare, verify.
#[derive(Parser)]
#[command(name = "afm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Active generation with AFM fine-tuning.
    Run(RunArgs),
    /// The same loop with uniformly random batches.
    Baseline(RunArgs),
    /// Exact-oracle acceptance checks on tiny instances.
    Verify,
    /// Regret curves of one or more run directories as long-format CSV.
    Plotdata {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    config: PathBuf,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(short, long)]
    seed: Option<u64>,
}

const VERIFY_FAILED: u8 = 1;

fn load(args: &RunArgs) -> Result<RunConfig, AfmError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = Some(out.clone());
    }
    Ok(config)
}

fn report(output: &RunOutput) {
    match &output.summary {
        Some(s) => {
            let rto = s.rounds_to_optimum.map(|r| r.to_string()).unwrap_or_else(|| "never".into());
            println!(
                "rounds {}  oracle calls {}  final regret {}  best y {}  optimum reached at round {}",
                output.records.len(),
                output.oracle_calls,
                s.final_regret,
                s.final_best_y,
                rto
            );
        }
        None => println!("no rounds run; oracle calls {}", output.oracle_calls),
    }
}

fn plotdata(runs: &[PathBuf], out: Option<&Path>) -> Result<(), AfmError> {
    let mut curves = Vec::with_capacity(runs.len());
    for dir in runs {
        let file = if dir.is_dir() { dir.join("rounds.csv") } else { dir.clone() };
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        curves.push((name, read_rounds(&file)?));
    }
    match out {
        Some(path) => write_plot_data(&curves, &mut fs::File::create(path)?),
        None => write_plot_data(&curves, &mut io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => load(&args).and_then(|c| harness::run(&c)).map(|o| report(&o)),
        Command::Baseline(args) => load(&args).and_then(|c| harness::baseline_random(&c)).map(|o| report(&o)),
        Command::Verify => {
            let checks = verify::run_all();
            print!("{}", verify::format_table(&checks));
            if checks.iter().all(|c| c.pass) {
                Ok(())
            } else {
                return ExitCode::from(VERIFY_FAILED);
            }
        }
        Command::Plotdata { runs, out } => plotdata(&runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
