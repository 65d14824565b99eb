use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{LdmError, Result};

/// Points around random cluster centres, each seen through two noisy views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsTask {
    pub n_clusters: usize,
    pub dim: usize,
    pub n_samples: usize,
    #[serde(default = "d_sep")]
    pub separation: f64,
    #[serde(default = "d_spread")]
    pub spread: f64,
    #[serde(default = "d_view")]
    pub view_noise: f64,
}

fn d_sep() -> f64 {
    4.0
}
fn d_spread() -> f64 {
    0.5
}
fn d_view() -> f64 {
    0.2
}

pub struct BlobData {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub labels: Vec<usize>,
    pub centres: Tensor,
}

impl BlobsTask {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 || self.dim == 0 || self.n_samples < self.n_clusters {
            return Err(LdmError::ConfigInvalid {
                field: "data".into(),
                reason: "need >= 2 clusters, dim >= 1 and at least one sample per cluster".into(),
            });
        }
        if !(self.separation > 0.0 && self.spread >= 0.0 && self.view_noise >= 0.0) {
            return Err(LdmError::ConfigInvalid {
                field: "data.separation".into(),
                reason: "separation must be > 0; spread and view_noise >= 0".into(),
            });
        }
        Ok(())
    }
}

pub fn gen_blobs(task: &BlobsTask, seed: u64) -> Result<BlobData> {
    task.validate()?;
    let mut rng = crate::rng(seed);
    let (k, d, n) = (task.n_clusters, task.dim, task.n_samples);
    let g = |s: f64, rng: &mut crate::Rng| s * super::normal(rng);
    let centres = Tensor::matrix(k, d, (0..k * d).map(|_| g(task.separation, &mut rng)).collect())?;
    let mut a = Tensor::zeros(&[n, d]);
    let mut b = Tensor::zeros(&[n, d]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..k);
        labels.push(c);
        for j in 0..d {
            let x = centres.get(c, j) + g(task.spread, &mut rng);
            a.set(i, j, x + g(task.view_noise, &mut rng));
            b.set(i, j, x + g(task.view_noise, &mut rng));
        }
    }
    Ok(BlobData {
        view_a: a,
        view_b: b,
        labels,
        centres,
    })
}
