use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ldm_core::cli::{self, DataSpec, ExperimentConfig, RunOptions};
use ldm_core::LdmError;

#[derive(Parser)]
#[command(name = "ldm", version, about = "Latent distribution matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Replace the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the configured number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// No progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate one experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Check a config and list its violations.
    Validate { config: PathBuf },
    /// Entropy estimators against analytic entropies.
    BenchEntropy {
        config: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Run every config matching a glob in separate processes.
    Sweep {
        pattern: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        o: Overrides,
    },
}

fn load(path: &Path, o: &Overrides) -> Result<ExperimentConfig, LdmError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(s) = o.steps {
        cfg.optim.steps = s;
    }
    Ok(cfg)
}

fn run(cfg: &ExperimentConfig, o: &Overrides) -> Result<(), LdmError> {
    let report = cli::run(
        cfg,
        &RunOptions {
            out: o.out.clone(),
            quiet: o.quiet,
        },
    )?;
    for (k, v) in &report.metrics {
        println!("{k} = {v}");
    }
    println!("config_hash = {}", report.config_hash);
    println!("metrics = {}", report.metrics_csv.display());
    println!("wall_time_s = {:.1}", report.wall_time_s);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Cmd::Run { config, o } => load(config, o).and_then(|c| run(&c, o)),
        Cmd::BenchEntropy { config, o } => load(config, o).and_then(|c| match c.data_spec()? {
            DataSpec::Bench(_) => run(&c, o),
            _ => Err(LdmError::ConfigInvalid {
                field: "experiment".into(),
                reason: "bench-entropy needs an entropy_bench config".into(),
            }),
        }),
        Cmd::Validate { config } => match cli::validate_file(config) {
            Ok(v) => {
                for w in &v.warnings {
                    println!("warning: {w}");
                }
                for x in &v.violations {
                    println!("violation: {x}");
                }
                if v.is_ok() {
                    println!("ok");
                    Ok(())
                } else {
                    return ExitCode::from(1);
                }
            }
            Err(e) => Err(e),
        },
        Cmd::Sweep { pattern, jobs, o } => {
            let mut extra = Vec::new();
            if let Some(s) = o.seed {
                extra.extend(["--seed".to_string(), s.to_string()]);
            }
            if let Some(s) = o.steps {
                extra.extend(["--steps".to_string(), s.to_string()]);
            }
            if o.quiet {
                extra.push("--quiet".into());
            }
            if o.out.is_some() {
                eprintln!("sweep: --out is ignored; each run uses its own output directory");
            }
            match std::env::current_exe()
                .map_err(LdmError::from)
                .and_then(|exe| cli::sweep(&exe, pattern, *jobs, &extra))
            {
                Ok(results) => {
                    for r in &results {
                        println!("{} {}", if r.success { "ok  " } else { "FAIL" }, r.config.display());
                    }
                    if results.iter().any(|r| !r.success) {
                        return ExitCode::from(1);
                    }
                    Ok(())
                }
                Err(e) => Err(e),
            }
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
