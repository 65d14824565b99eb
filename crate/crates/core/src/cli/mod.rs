//! Experiment harness: TOML configs, seeded training runs, the entropy
//! bench and a process-level sweep driver.

mod bench;
mod config;
pub mod plot;
mod train;

pub use bench::{
    bench_entropy, corrected_estimate, estimator_name, half_normal_entropy_numeric, BenchDistribution, BenchResult,
    BenchRow, BenchSpec,
};
pub use config::{
    AnnealSpec, DataSpec, EncoderKind, EncoderSpec, ExperimentConfig, ExperimentKind, MeanKind, ModelSection,
    OptimSection, PredictorSpec, Validation, Violation, validate_str,
};
pub use train::{cluster_accuracy, run, validate_file, RunOptions, RunReport, JACOBIAN_TOL};

use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use crate::error::{LdmError, Result};

/// Outcome of one sweep member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepResult {
    pub config: PathBuf,
    pub success: bool,
}

/// Runs `exe run <config> <extra…>` for every config matching `pattern`,
/// at most `jobs` processes at a time, in sorted path order.
pub fn sweep(exe: &Path, pattern: &str, jobs: usize, extra: &[String]) -> Result<Vec<SweepResult>> {
    let mut configs: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| LdmError::ConfigInvalid {
            field: "<glob>".into(),
            reason: e.to_string(),
        })?
        .filter_map(|p| p.ok())
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(LdmError::ConfigInvalid {
            field: "<glob>".into(),
            reason: format!("no config matches {pattern}"),
        });
    }
    let jobs = jobs.max(1);
    let mut results: Vec<Option<bool>> = vec![None; configs.len()];
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut next = 0;
    while next < configs.len() || !running.is_empty() {
        while running.len() < jobs && next < configs.len() {
            let child = Command::new(exe).arg("run").arg(&configs[next]).args(extra).spawn()?;
            running.push((next, child));
            next += 1;
        }
        let (i, mut child) = running.remove(0);
        results[i] = Some(child.wait()?.success());
    }
    Ok(configs
        .into_iter()
        .zip(results)
        .map(|(config, ok)| SweepResult {
            config,
            success: ok.unwrap_or(false),
        })
        .collect())
}
