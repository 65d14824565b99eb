use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::entropy::{
    entropy_kde_corrected, entropy_knn_corrected, entropy_logdet, gaussian_entropy_constant, EntropyEstimator,
    Kernel, LogDetMode,
};
use crate::error::{LdmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchDistribution {
    /// Standard normal per coordinate.
    Gaussian,
    /// `U[0, 1]` per coordinate.
    Uniform,
    /// `|N(0, 1)|` per coordinate.
    HalfNormal,
}

impl BenchDistribution {
    pub fn name(self) -> &'static str {
        match self {
            BenchDistribution::Gaussian => "gaussian",
            BenchDistribution::Uniform => "uniform",
            BenchDistribution::HalfNormal => "half_normal",
        }
    }

    /// Differential entropy in nats of the `d`-dimensional product law.
    pub fn entropy(self, d: usize) -> f64 {
        let g = gaussian_entropy_constant(1);
        d as f64
            * match self {
                BenchDistribution::Gaussian => g,
                BenchDistribution::Uniform => 0.0,
                BenchDistribution::HalfNormal => g - 2f64.ln(),
            }
    }

    pub fn sample(self, n: usize, d: usize, rng: &mut crate::Rng) -> Tensor {
        let data = (0..n * d)
            .map(|_| match self {
                BenchDistribution::Gaussian => crate::synthdata::normal(rng),
                BenchDistribution::Uniform => rng.random::<f64>(),
                BenchDistribution::HalfNormal => crate::synthdata::normal(rng).abs(),
            })
            .collect();
        Tensor::matrix(n, d, data).expect("shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub distributions: Vec<BenchDistribution>,
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub estimators: Vec<EntropyEstimator>,
    /// KDE is quadratic in `N` and is skipped above this size.
    pub kde_max_n: usize,
    /// Sample size of the one-dimensional folding check.
    pub folding_n: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            distributions: vec![
                BenchDistribution::Gaussian,
                BenchDistribution::Uniform,
                BenchDistribution::HalfNormal,
            ],
            sizes: vec![1_000, 10_000, 100_000],
            dim: 2,
            estimators: vec![
                EntropyEstimator::LogDet {
                    mode: LogDetMode::Exact,
                    vc: Default::default(),
                },
                EntropyEstimator::Knn {
                    k: 3,
                    p_norm: 2.0,
                    discard_top_frac: 0.0,
                },
                EntropyEstimator::Kde {
                    bandwidth: 0.25,
                    kernel: Kernel::Gaussian,
                },
            ],
            kde_max_n: 10_000,
            folding_n: 100_000,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(LdmError::ConfigInvalid {
                field: format!("data.{field}"),
                reason: reason.into(),
            })
        };
        if self.dim == 0 {
            return bad("dim", "must be >= 1");
        }
        if self.sizes.iter().any(|&n| n < 10) {
            return bad("sizes", "every size must be >= 10");
        }
        if self.folding_n < 10 {
            return bad("folding_n", "must be >= 10");
        }
        for e in &self.estimators {
            e.validate().map_err(|err| LdmError::ConfigInvalid {
                field: "data.estimators".into(),
                reason: err.to_string(),
            })?;
            match e {
                EntropyEstimator::StopGradPlugin => return bad("estimators", "the plugin estimator needs a predictor"),
                EntropyEstimator::LogDet { mode, .. } if *mode != LogDetMode::Exact => {
                    return bad("estimators", "only exact LogDet estimates an entropy")
                }
                EntropyEstimator::Kde { kernel: Kernel::Vmf, .. } => {
                    return bad("estimators", "the vMF kernel needs spherical data")
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn estimator_name(e: &EntropyEstimator) -> String {
    match e {
        EntropyEstimator::Kde { bandwidth, .. } => format!("kde_h{bandwidth}"),
        EntropyEstimator::Knn {
            k,
            p_norm,
            discard_top_frac,
        } => format!("knn_k{k}_p{p_norm}_q{discard_top_frac}"),
        EntropyEstimator::LogDet { .. } => "logdet_exact".into(),
        EntropyEstimator::StopGradPlugin => "plugin".into(),
    }
}

/// An entropy estimate in nats with every additive constant restored.
pub fn corrected_estimate(e: &EntropyEstimator, x: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let z = tape.constant(x.clone());
    match *e {
        EntropyEstimator::Kde { bandwidth, .. } => entropy_kde_corrected(&z, bandwidth),
        EntropyEstimator::Knn {
            k,
            p_norm,
            discard_top_frac,
        } => entropy_knn_corrected(&z, k, p_norm, discard_top_frac),
        EntropyEstimator::LogDet { mode, vc } => {
            Ok(entropy_logdet(&z, mode, vc)?.item() + gaussian_entropy_constant(x.cols()))
        }
        EntropyEstimator::StopGradPlugin => Err(LdmError::ConfigInvalid {
            field: "data.estimators".into(),
            reason: "the plugin estimator needs a predictor".into(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub distribution: String,
    pub n: usize,
    pub dim: usize,
    pub estimator: String,
    pub estimate: f64,
    pub analytic: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// `Ĥ[x] − Ĥ[|x|]` for one-dimensional standard normal `x`, by kNN.
    pub folding_gap_estimate: f64,
    /// The same gap from numerically integrated densities.
    pub folding_gap_numeric: f64,
}

impl BenchResult {
    pub fn find(&self, distribution: &str, n: usize, estimator_prefix: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.distribution == distribution && r.n == n && r.estimator.starts_with(estimator_prefix))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("distribution,n,dim,estimator,estimate,analytic,error\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.distribution, r.n, r.dim, r.estimator, r.estimate, r.analytic, r.error
            ));
        }
        s
    }
}

/// `−∫ p log p` of the half-normal density on `[0, 12]` by the composite
/// Simpson rule.
pub fn half_normal_entropy_numeric() -> f64 {
    let f = |x: f64| {
        let p = (2.0 / std::f64::consts::PI).sqrt() * (-0.5 * x * x).exp();
        if p > 0.0 {
            -p * p.ln()
        } else {
            0.0
        }
    };
    let (a, b, n) = (0.0, 12.0, 20_000);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Estimator error against analytic entropies over the configured grid,
/// plus the folding check `H[x] − H[|x|] = log 2`.
pub fn bench_entropy(spec: &BenchSpec, seed: u64) -> Result<BenchResult> {
    spec.validate()?;
    let mut rows = Vec::new();
    for (di, dist) in spec.distributions.iter().enumerate() {
        for (ni, &n) in spec.sizes.iter().enumerate() {
            let mut rng = crate::Rng::seed_from_u64(seed);
            rng.set_stream((di * 64 + ni) as u64 + 1);
            let x = dist.sample(n, spec.dim, &mut rng);
            let analytic = dist.entropy(spec.dim);
            for e in &spec.estimators {
                if matches!(e, EntropyEstimator::Kde { .. }) && n > spec.kde_max_n {
                    continue;
                }
                let estimate = corrected_estimate(e, &x)?;
                rows.push(BenchRow {
                    distribution: dist.name().into(),
                    n,
                    dim: spec.dim,
                    estimator: estimator_name(e),
                    estimate,
                    analytic,
                    error: estimate - analytic,
                });
            }
        }
    }
    let mut rng = crate::Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let x = BenchDistribution::Gaussian.sample(spec.folding_n, 1, &mut rng);
    let folded = x.map(f64::abs);
    let knn = EntropyEstimator::Knn {
        k: 3,
        p_norm: 2.0,
        discard_top_frac: 0.0,
    };
    let folding_gap_estimate = corrected_estimate(&knn, &x)? - corrected_estimate(&knn, &folded)?;
    let folding_gap_numeric = gaussian_entropy_constant(1) - half_normal_entropy_numeric();
    Ok(BenchResult {
        rows,
        folding_gap_estimate,
        folding_gap_numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_half_normal_entropy_matches_closed_form() {
        let closed = 0.5 * (std::f64::consts::PI * std::f64::consts::E / 2.0).ln();
        assert!((half_normal_entropy_numeric() - closed).abs() < 1e-9);
    }

    #[test]
    fn small_grid_runs_and_is_deterministic() {
        let spec = BenchSpec {
            sizes: vec![500],
            folding_n: 2_000,
            ..BenchSpec::default()
        };
        let a = bench_entropy(&spec, 1).unwrap();
        assert_eq!(a.rows.len(), 9);
        assert_eq!(a, bench_entropy(&spec, 1).unwrap());
        assert!(a.rows.iter().all(|r| r.estimate.is_finite()));
        assert!(a.to_csv().lines().count() == 10);
    }

    #[test]
    fn plugin_is_rejected() {
        let spec = BenchSpec {
            estimators: vec![EntropyEstimator::StopGradPlugin],
            ..BenchSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
