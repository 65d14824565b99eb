use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{linalg, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    #[default]
    UniformFanIn,
    /// Weights with orthonormal rows or columns, zero biases.
    OrthogonalLinear,
}

/// A `rows x cols` matrix with orthonormal columns (if `rows >= cols`) or rows.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut dyn rand::RngCore) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g: Vec<f64> = (0..tall * short)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let m = linalg::to_nalgebra(&Tensor::matrix(tall, short, g).expect("shape"));
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // fix column signs so the draw is Haar distributed
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = linalg::from_nalgebra(&q);
    if rows >= cols {
        q
    } else {
        q.transpose().expect("matrix")
    }
}
