//! Evaluation: affine probes, gradient alignment, spectra, encoder Jacobian
//! rank and ICA source recovery.

use rand::seq::SliceRandom;

use crate::diffcore::{linalg, Tape, Tensor};
use crate::error::{shape_err, LdmError, Result};
use crate::nets::{Encoder, Module};

const RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// `[d + 1, k]`; the last row is the intercept.
    pub weights: Tensor,
    pub r2_per_dim: Vec<f64>,
    pub r2_overall: f64,
    /// Test-split residual covariance `[k, k]`.
    pub residual_cov: Tensor,
    /// The normal equations were rank deficient and a ridge was added.
    pub ridge_used: bool,
}

impl ProbeResult {
    pub fn predict(&self, z: &Tensor) -> Result<Tensor> {
        with_intercept(z).matmul(&self.weights)
    }
}

fn with_intercept(z: &Tensor) -> Tensor {
    let ones = Tensor::ones(&[z.rows(), 1]);
    Tensor::hcat(&[z, &ones]).expect("same rows")
}

/// Ordinary least squares with intercept on a seeded 80% split, scored by
/// `R² = 1 − SSE/SST` on the remaining 20%.
pub fn affine_probe(z: &Tensor, target: &Tensor, seed: u64) -> Result<ProbeResult> {
    let (n, d) = z.require_matrix("affine_probe")?;
    let (nt, k) = target.require_matrix("affine_probe")?;
    if nt != n {
        return Err(shape_err("affine_probe", z.shape(), target.shape()));
    }
    if n <= d + 1 {
        return Err(LdmError::DegenerateBatch(format!("probe needs N > d + 1, got N = {n}, d = {d}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::rng(seed));
    let n_train = ((n as f64) * 0.8).round() as usize;
    let n_train = n_train.clamp(d + 1, n - 1);
    let (tr, te) = idx.split_at(n_train);
    let xtr = with_intercept(&z.select_rows(tr));
    let ytr = target.select_rows(tr);
    let xtx = xtr.transpose()?.matmul(&xtr)?;
    let xty = xtr.transpose()?.matmul(&ytr)?;
    let (eig, _) = linalg::sym_eigen(&xtx)?;
    let (hi, lo) = (eig[0], *eig.last().expect("nonempty"));
    let ridge_used = !(lo > 1e-12 * hi.max(1e-300));
    let weights = if ridge_used {
        let reg = xtx.add(&Tensor::eye(d + 1).scale(RIDGE * hi.max(1.0)))?;
        linalg::solve(&reg, &xty)?
    } else {
        linalg::solve(&xtx, &xty)?
    };
    let xte = with_intercept(&z.select_rows(te));
    let yte = target.select_rows(te);
    let resid = yte.sub(&xte.matmul(&weights)?)?;
    let means = yte.col_means();
    let mut r2 = Vec::with_capacity(k);
    let (mut sse_all, mut sst_all) = (0.0, 0.0);
    for j in 0..k {
        let sse: f64 = resid.col(j).iter().map(|e| e * e).sum();
        let sst: f64 = yte.col(j).iter().map(|y| (y - means[j]).powi(2)).sum();
        r2.push(if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN });
        sse_all += sse;
        sst_all += sst;
    }
    let residual_cov = if te.len() > 1 { resid.covariance() } else { Tensor::zeros(&[k, k]) };
    let r2_overall = 1.0 - sse_all / sst_all;
    if !weights.is_finite() || !r2_overall.is_finite() {
        return Err(LdmError::NumericalBlowup("affine probe".into()));
    }
    Ok(ProbeResult {
        weights,
        r2_per_dim: r2,
        r2_overall,
        residual_cov,
        ridge_used,
    })
}

/// `g₁·g₂ / (‖g₁‖‖g₂‖)`, zero when either norm is below `1e-12`.
pub fn grad_cosine(g1: &[f64], g2: &[f64]) -> f64 {
    assert_eq!(g1.len(), g2.len(), "gradients must share a parameter ordering");
    let dot: f64 = g1.iter().zip(g2).map(|(a, b)| a * b).sum();
    let n1 = g1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2 = g2.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 < 1e-12 || n2 < 1e-12 {
        0.0
    } else {
        dot / (n1 * n2)
    }
}

/// Descending eigenvalues of the sample covariance, clamped at zero.
pub fn eigenspectrum(z: &Tensor) -> Result<Vec<f64>> {
    let (n, _) = z.require_matrix("eigenspectrum")?;
    if n < 3 {
        return Err(LdmError::DegenerateBatch("eigenspectrum needs N > 2".into()));
    }
    let (vals, _) = linalg::sym_eigen(&z.covariance())?;
    Ok(vals.into_iter().map(|v| v.max(0.0)).collect())
}

/// Per-sample encoder Jacobians `[d_out, d_in]` at each row of `x`, by one
/// backward pass per output dimension over the whole batch.
pub fn jacobians(encoder: &Encoder, x: &Tensor) -> Result<Vec<Tensor>> {
    let (n, d_in) = x.require_matrix("jacobians")?;
    let d_out = encoder.out_dim();
    let mut jac = vec![Tensor::zeros(&[d_out, d_in]); n];
    for k in 0..d_out {
        let tape = Tape::new();
        let p = encoder.bind_frozen(&tape);
        let xv = tape.leaf(x.clone());
        let y = encoder.forward(&p, &xv)?;
        let yk = y.slice_cols(k, k + 1)?.sum();
        tape.backward(&yk)?;
        let g = xv.grad().expect("input is a leaf");
        for (i, j) in jac.iter_mut().enumerate() {
            for c in 0..d_in {
                j.set(k, c, g.get(i, c));
            }
        }
    }
    Ok(jac)
}

/// Per-sample numeric rank of the encoder Jacobian (singular values above
/// `tol·σ_max`) and the mean rank.
pub fn jacobian_rank(encoder: &Encoder, x: &Tensor, tol: f64) -> Result<(Vec<usize>, f64)> {
    let jac = jacobians(encoder, x)?;
    let mut ranks = Vec::with_capacity(jac.len());
    for j in &jac {
        let sv = linalg::singular_values(j)?;
        let top = sv.first().copied().unwrap_or(0.0);
        ranks.push(if top > 0.0 { sv.iter().filter(|&&s| s > tol * top).count() } else { 0 });
    }
    let mean = ranks.iter().sum::<usize>() as f64 / jac.len().max(1) as f64;
    Ok((ranks, mean))
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        c += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        c / (va * vb).sqrt()
    }
}

/// Minimum-cost perfect assignment on a square cost matrix (row → column),
/// by the shortest augmenting path method with potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    // p[j]: row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (inf, 0);
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Mean absolute correlation between each true source and its estimate
/// under the best one-to-one matching.
pub fn source_recovery_score(s_hat: &Tensor, s_true: &Tensor) -> Result<f64> {
    if s_hat.shape() != s_true.shape() || s_hat.rank() != 2 {
        return Err(shape_err("source_recovery_score", s_hat.shape(), s_true.shape()));
    }
    let d = s_true.cols();
    let cols_t: Vec<Vec<f64>> = (0..d).map(|j| s_true.col(j)).collect();
    let cols_h: Vec<Vec<f64>> = (0..d).map(|j| s_hat.col(j)).collect();
    let c: Vec<Vec<f64>> = cols_t
        .iter()
        .map(|t| cols_h.iter().map(|h| correlation(t, h).abs()).collect())
        .collect();
    let cost: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
    let assign = hungarian(&cost);
    Ok(assign.iter().enumerate().map(|(i, &j)| c[i][j]).sum::<f64>() / d as f64)
}
