use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use trunc_milstein::config::{run, RunConfig};
use trunc_milstein::Error;

/// Run a truncated Milstein experiment described by a TOML config.
#[derive(Parser, Debug)]
#[command(name = "tmilstein", version)]
struct Cli {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,

    /// Override a config key, e.g. `--set policy.epsilon=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads; 0 uses all cores. Never changes output bytes.
    #[arg(long, default_value_t = 0)]
    workers: usize,

    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let result = RunConfig::load(&cli.config, &overrides).and_then(|mut config| {
        if let Some(out) = &cli.out {
            config.output_dir = out.clone();
        }
        run(&config, cli.workers)
    });
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for p in &outcome.artifacts {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
