use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{linalg, Tensor};
use crate::error::{LdmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceFamily {
    Laplace,
    Uniform,
    /// Stationary Ornstein-Uhlenbeck paths, one rate per source. Paths are
    /// normalized to unit stationary variance, so `sigma` only sets the
    /// scale before normalization.
    OuProcess {
        theta: Vec<f64>,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default = "one")]
        dt: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcaTask {
    pub n_sources: usize,
    pub source_family: SourceFamily,
    pub n_samples: usize,
    #[serde(default = "max_cond")]
    pub max_condition: f64,
    #[serde(default)]
    pub identity_mixing: bool,
}

fn max_cond() -> f64 {
    100.0
}

pub struct IcaData {
    /// `[N, d]`, rows in time order for OU sources.
    pub x: Tensor,
    pub s_true: Tensor,
    pub mixing: Tensor,
}

impl IcaTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| {
            Err(LdmError::ConfigInvalid {
                field: format!("data.{field}"),
                reason: reason.into(),
            })
        };
        if self.n_sources == 0 {
            return bad("n_sources", "must be >= 1");
        }
        if self.n_samples < 2 {
            return bad("n_samples", "must be >= 2");
        }
        if !(self.max_condition > 1.0) {
            return bad("max_condition", "must be > 1");
        }
        if let SourceFamily::OuProcess { theta, sigma, dt } = &self.source_family {
            if theta.len() != self.n_sources {
                return bad("source_family.theta", "needs one rate per source");
            }
            if theta.iter().any(|t| !(*t > 0.0)) || !(*sigma > 0.0) || !(*dt > 0.0) {
                return bad("source_family", "theta, sigma and dt must be > 0");
            }
        }
        Ok(())
    }

    /// Lag-one correlations `exp(−θ dt)` of OU sources.
    pub fn ou_rho(&self) -> Option<Vec<f64>> {
        match &self.source_family {
            SourceFamily::OuProcess { theta, dt, .. } => Some(theta.iter().map(|t| (-t * dt).exp()).collect()),
            _ => None,
        }
    }
}

/// Random mixing with condition number below `max_cond`, scaled to `|det| = 1`.
pub(crate) fn random_mixing(d: usize, max_cond: f64, rng: &mut crate::Rng) -> Result<Tensor> {
    for _ in 0..10_000 {
        let m = Tensor::matrix(d, d, (0..d * d).map(|_| StandardNormal.sample(rng)).collect())?;
        let sv = linalg::singular_values(&m)?;
        let (hi, lo) = (sv[0], sv[d - 1]);
        if lo > 0.0 && hi / lo < max_cond {
            let (_, logdet) = linalg::slogdet(&m)?;
            return Ok(m.scale((-logdet / d as f64).exp()));
        }
    }
    Err(LdmError::DegenerateBatch("no well-conditioned mixing found".into()))
}

/// Sources and mixtures `x = s·Mᵀ`, every source with unit variance.
pub fn gen_ica(task: &IcaTask, seed: u64) -> Result<IcaData> {
    task.validate()?;
    let mut rng = crate::rng(seed);
    let (n, d) = (task.n_samples, task.n_sources);
    let mut s = Tensor::zeros(&[n, d]);
    match &task.source_family {
        SourceFamily::Laplace => {
            let e = Exp::new(1.0).expect("rate");
            for v in s.data_mut() {
                let mag: f64 = e.sample(&mut rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                *v = sign * mag / std::f64::consts::SQRT_2;
            }
        }
        SourceFamily::Uniform => {
            let a = 3f64.sqrt();
            for v in s.data_mut() {
                *v = rng.random_range(-a..a);
            }
        }
        SourceFamily::OuProcess { theta, sigma, dt } => {
            for (j, &th) in theta.iter().enumerate() {
                let rho = (-th * dt).exp();
                let stat_sd = sigma / (2.0 * th).sqrt();
                let innov = stat_sd * (1.0 - rho * rho).sqrt();
                let mut x = stat_sd * super::normal(&mut rng);
                for i in 0..n {
                    if i > 0 {
                        x = rho * x + innov * super::normal(&mut rng);
                    }
                    s.set(i, j, x / stat_sd);
                }
            }
        }
    }
    let mixing = if task.identity_mixing {
        Tensor::eye(d)
    } else {
        random_mixing(d, task.max_condition, &mut rng)?
    };
    let x = s.matmul(&mixing.transpose()?)?;
    Ok(IcaData { x, s_true: s, mixing })
}
