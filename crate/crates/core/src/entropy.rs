//! Differential-entropy estimators for the uniformity term.
//!
//! Each estimator takes an `N x d` batch on the tape and returns a
//! differentiable scalar. The forms used in losses drop additive constants;
//! the `*_corrected` functions restore them for accuracy checks.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::diffcore::{linalg, BackwardFn, Tensor, Var};
use crate::error::{LdmError, Result};

/// Points closer than this to their nearest neighbour count as duplicates.
pub const DUPLICATE_TOL: f64 = 1e-12;
/// Exact LogDet refuses covariances whose smallest eigenvalue is below this.
pub const EIGEN_FLOOR: f64 = 1e-10;
pub const MAX_LOGDET_DIM: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Gaussian,
    /// `exp(zᵢᵀz_j / h)` on unit-norm rows.
    Vmf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogDetMode {
    #[default]
    Exact,
    Taylor,
    VarianceCovariance,
}

/// Weights of the hinge-variance / covariance surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VcWeights {
    /// Target standard deviation of the hinge.
    pub gamma: f64,
    pub eps: f64,
    pub mu: f64,
    pub nu: f64,
}

impl Default for VcWeights {
    fn default() -> Self {
        VcWeights {
            gamma: 1.0,
            eps: 1e-4,
            mu: 25.0,
            nu: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EntropyEstimator {
    Kde {
        bandwidth: f64,
        #[serde(default)]
        kernel: Kernel,
    },
    Knn {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_p")]
        p_norm: f64,
        #[serde(default = "default_discard")]
        discard_top_frac: f64,
    },
    LogDet {
        #[serde(default)]
        mode: LogDetMode,
        #[serde(default)]
        vc: VcWeights,
    },
    StopGradPlugin,
}

fn default_k() -> usize {
    3
}

fn default_p() -> f64 {
    2.0
}

fn default_discard() -> f64 {
    0.1
}

impl Default for EntropyEstimator {
    fn default() -> Self {
        EntropyEstimator::Knn {
            k: default_k(),
            p_norm: default_p(),
            discard_top_frac: default_discard(),
        }
    }
}

impl EntropyEstimator {
    pub fn validate(&self) -> Result<()> {
        let bad = |what, value: f64, reason: &str| {
            Err(LdmError::OutOfRange {
                what,
                value,
                reason: reason.into(),
            })
        };
        match *self {
            EntropyEstimator::Kde { bandwidth, .. } if !(bandwidth > 0.0) => {
                bad("bandwidth", bandwidth, "must be > 0")
            }
            EntropyEstimator::Knn { k, .. } if k < 1 => bad("k", k as f64, "must be >= 1"),
            EntropyEstimator::Knn { p_norm, .. } if !(p_norm >= 1.0) => {
                bad("p_norm", p_norm, "must be >= 1")
            }
            EntropyEstimator::Knn {
                discard_top_frac, ..
            } if !(0.0..0.5).contains(&discard_top_frac) => {
                bad("discard_top_frac", discard_top_frac, "must lie in [0, 0.5)")
            }
            _ => Ok(()),
        }
    }

    /// Marginal entropy estimate of a batch. The plugin estimator needs a
    /// predictor and is assembled by the objectives instead.
    pub fn estimate(&self, z: &Var) -> Result<Var> {
        match *self {
            EntropyEstimator::Kde { bandwidth, kernel } => entropy_kde(z, bandwidth, kernel),
            EntropyEstimator::Knn {
                k,
                p_norm,
                discard_top_frac,
            } => entropy_knn(z, k, p_norm, discard_top_frac),
            EntropyEstimator::LogDet { mode, vc } => entropy_logdet(z, mode, vc),
            EntropyEstimator::StopGradPlugin => Err(LdmError::ConfigInvalid {
                field: "model.estimator".into(),
                reason: "the plugin estimator requires a predictor".into(),
            }),
        }
    }

    /// Joint entropy `H[z, z′]` of a paired batch, by column concatenation.
    pub fn estimate_joint(&self, z: &Var, zp: &Var) -> Result<Var> {
        self.estimate(&Var::concat_cols(&[z, zp])?)
    }
}

fn batch_dims(z: &Var, min_n: usize) -> Result<(usize, usize)> {
    let s = z.shape();
    if s.len() != 2 {
        return Err(crate::error::shape_err("entropy", &s, &[0, 0]));
    }
    if s[0] < min_n {
        return Err(LdmError::DegenerateBatch(format!(
            "need at least {min_n} samples, got {}",
            s[0]
        )));
    }
    Ok((s[0], s[1]))
}

/// Leave-one-out KDE estimate `−(1/N)Σᵢ log[(1/(N−1)) Σ_{j≠i} κ(zᵢ, z_j)]`.
pub fn entropy_kde(z: &Var, h: f64, kernel: Kernel) -> Result<Var> {
    EntropyEstimator::Kde { bandwidth: h, kernel }.validate()?;
    let (n, d) = batch_dims(z, 2)?;
    let zv = z.value();
    if kernel == Kernel::Vmf {
        for i in 0..n {
            let norm = zv.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(LdmError::NotNormalized { row: i, norm });
            }
        }
    }
    let x = zv.data();
    let score = |i: usize, j: usize| -> f64 {
        let (a, b) = (&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
        match kernel {
            Kernel::Gaussian => {
                -a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / (2.0 * h * h)
            }
            Kernel::Vmf => a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / h,
        }
    };
    // softmax weights over j ≠ i, stored row-major with zeros on the diagonal
    let mut weights = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        let row = &mut weights[i * n..(i + 1) * n];
        let mut m = f64::NEG_INFINITY;
        for (j, w) in row.iter_mut().enumerate() {
            if j != i {
                *w = score(i, j);
                m = m.max(*w);
            }
        }
        let mut s = 0.0;
        for (j, w) in row.iter_mut().enumerate() {
            if j != i {
                *w = (*w - m).exp();
                s += *w;
            }
        }
        row.iter_mut().for_each(|w| *w /= s);
        total += m + s.ln() - ((n - 1) as f64).ln();
    }
    let value = -total / n as f64;
    let bw: BackwardFn = Box::new(move |ctx| {
        let x = ctx.inputs[0].data();
        let g = ctx.grad.data()[0] * (-1.0 / n as f64);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..n {
                let a = weights[i * n + j];
                if j == i || a == 0.0 {
                    continue;
                }
                for c in 0..d {
                    match kernel {
                        Kernel::Gaussian => {
                            let diff = (x[i * d + c] - x[j * d + c]) / (h * h);
                            out[i * d + c] -= g * a * diff;
                            out[j * d + c] += g * a * diff;
                        }
                        Kernel::Vmf => {
                            out[i * d + c] += g * a * x[j * d + c] / h;
                            out[j * d + c] += g * a * x[i * d + c] / h;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::matrix(n, d, out).expect("shape"))]
    });
    Ok(z.tape().custom(&[z], Tensor::scalar(value), bw))
}

/// Gaussian-kernel KDE with the normalizing constants restored.
pub fn entropy_kde_corrected(z: &Var, h: f64) -> Result<f64> {
    let (_, d) = batch_dims(z, 2)?;
    let est = entropy_kde(z, h, Kernel::Gaussian)?.item();
    Ok(est + 0.5 * d as f64 * (2.0 * std::f64::consts::PI * h * h).ln())
}

/// Bookkeeping of one kNN evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnStats {
    /// Samples entering the sum.
    pub kept: usize,
    /// Samples excluded as duplicates.
    pub duplicates: usize,
    /// Samples excluded by the top-fraction discard.
    pub discarded: usize,
}

fn pnorm(a: &[f64], b: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    } else if p == 1.0 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
    } else {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}

/// For every row: distance to and index of its k-th nearest neighbour, and
/// its nearest-neighbour distance.
///
/// Rows are swept in order of the first coordinate; the scan stops once the
/// coordinate gap alone exceeds the current k-th best distance.
fn knn_search(x: &[f64], n: usize, d: usize, k: usize, p: f64) -> Vec<(f64, usize, f64)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a * d].total_cmp(&x[b * d]).then(a.cmp(&b)));
    let mut out = vec![(0.0, 0, 0.0); n];
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (pos, &i) in order.iter().enumerate() {
        best.clear();
        let xi = &x[i * d..(i + 1) * d];
        let consider = |j: usize, best: &mut Vec<(f64, usize)>| {
            let dist = pnorm(xi, &x[j * d..(j + 1) * d], p);
            if best.len() < k || dist < best[best.len() - 1].0 {
                let at = best.partition_point(|e| e.0 <= dist);
                best.insert(at, (dist, j));
                best.truncate(k);
            }
        };
        let (mut lo, mut hi) = (pos, pos + 1);
        loop {
            let bound = if best.len() == k {
                best[k - 1].0
            } else {
                f64::INFINITY
            };
            let gap_lo = (lo > 0).then(|| xi[0] - x[order[lo - 1] * d]);
            let gap_hi = (hi < n).then(|| x[order[hi] * d] - xi[0]);
            let next = match (gap_lo, gap_hi) {
                (Some(a), Some(b)) => Some(a <= b),
                (Some(_), None) => Some(true),
                (None, Some(_)) => Some(false),
                (None, None) => None,
            };
            match next {
                Some(true) if gap_lo.expect("lo") <= bound => {
                    lo -= 1;
                    consider(order[lo], &mut best);
                }
                Some(false) if gap_hi.expect("hi") <= bound => {
                    consider(order[hi], &mut best);
                    hi += 1;
                }
                _ => break,
            }
        }
        out[i] = (best[k - 1].0, best[k - 1].1, best[0].0);
    }
    out
}

fn knn_core(z: &Var, k: usize, p: f64, discard: f64) -> Result<(Var, KnnStats)> {
    EntropyEstimator::Knn {
        k,
        p_norm: p,
        discard_top_frac: discard,
    }
    .validate()?;
    let (n, d) = batch_dims(z, k + 2)?;
    let zv = z.value();
    let nb = knn_search(zv.data(), n, d, k, p);
    let mut candidates: Vec<usize> = (0..n).filter(|&i| nb[i].2 >= DUPLICATE_TOL).collect();
    let duplicates = n - candidates.len();
    candidates.sort_by(|&a, &b| nb[a].0.total_cmp(&nb[b].0).then(a.cmp(&b)));
    let drop = (discard * candidates.len() as f64).floor() as usize;
    candidates.truncate(candidates.len() - drop);
    let m = candidates.len();
    if m == 0 {
        return Err(LdmError::DegenerateBatch("no distinct samples left".into()));
    }
    candidates.sort_unstable();
    let scale = d as f64 / m as f64;
    let value = scale * candidates.iter().map(|&i| nb[i].0.ln()).sum::<f64>();
    let kept: Vec<(usize, usize, f64)> = candidates.iter().map(|&i| (i, nb[i].1, nb[i].0)).collect();
    let bw: BackwardFn = Box::new(move |ctx| {
        let x = ctx.inputs[0].data();
        let g = ctx.grad.data()[0] * scale;
        let mut out = vec![0.0; n * d];
        for &(i, j, eps) in &kept {
            // ∂ log ε / ∂Δ for Δ = zᵢ − z_j
            for c in 0..d {
                let delta = x[i * d + c] - x[j * d + c];
                let de = if p == 2.0 {
                    delta / eps
                } else {
                    delta.signum() * (delta.abs() / eps).powf(p - 1.0)
                };
                let v = g * de / eps;
                out[i * d + c] += v;
                out[j * d + c] -= v;
            }
        }
        vec![Some(Tensor::matrix(n, d, out).expect("shape"))]
    });
    Ok((
        z.tape().custom(&[z], Tensor::scalar(value), bw),
        KnnStats {
            kept: m,
            duplicates,
            discarded: drop,
        },
    ))
}

/// Kozachenko–Leonenko form `(d/M)·Σ log ε_ik` over the kept samples.
pub fn entropy_knn(z: &Var, k: usize, p_norm: f64, discard_top_frac: f64) -> Result<Var> {
    Ok(knn_core(z, k, p_norm, discard_top_frac)?.0)
}

/// Like [`entropy_knn`], also reporting which samples were excluded.
pub fn entropy_knn_with_stats(
    z: &Var,
    k: usize,
    p_norm: f64,
    discard_top_frac: f64,
) -> Result<(Var, KnnStats)> {
    knn_core(z, k, p_norm, discard_top_frac)
}

/// Log-volume of the unit `p`-ball in `d` dimensions.
pub fn log_unit_ball_volume(d: usize, p: f64) -> f64 {
    let d = d as f64;
    d * (2.0 * ln_gamma(1.0 / p + 1.0).exp()).ln() - ln_gamma(d / p + 1.0)
}

/// kNN estimate with `ψ(N) − ψ(k) + log V_{d,p}` restored.
pub fn entropy_knn_corrected(z: &Var, k: usize, p_norm: f64, discard_top_frac: f64) -> Result<f64> {
    let (n, d) = batch_dims(z, k + 2)?;
    let est = entropy_knn(z, k, p_norm, discard_top_frac)?.item();
    Ok(est + digamma(n as f64) - digamma(k as f64) + log_unit_ball_volume(d, p_norm))
}

/// Sample covariance `(1/(N−1)) Σ (zᵢ − μ)(zᵢ − μ)ᵀ` on the tape.
pub fn covariance(z: &Var) -> Result<Var> {
    let (n, d) = batch_dims(z, 2)?;
    let mu = z.sum_cols()?.scale(1.0 / n as f64).reshape(&[1, d])?;
    let c = z.sub(&mu)?;
    Ok(c.transpose()?.matmul(&c)?.scale(1.0 / (n as f64 - 1.0)))
}

/// `Σᵢ log Σᵢᵢ − ½ Σ_{j≠i} ΣᵢⱼΣⱼᵢ/(ΣᵢᵢΣⱼⱼ)`, a second-order expansion of `log|Σ|`.
pub fn taylor_logdet(cov: &Var) -> Result<Var> {
    let d = cov.shape()[0];
    let diag = cov.diagonal()?;
    let inv_sd = cov
        .tape()
        .constant(Tensor::ones(&[d]))
        .div(&diag.sqrt()?)?;
    let outer = inv_sd
        .reshape(&[d, 1])?
        .matmul(&inv_sd.reshape(&[1, d])?)?;
    let corr = cov.mul(&outer)?;
    // the diagonal of corr² is exactly one
    let off = corr.mul(&corr.transpose()?)?.sum().add_scalar(-(d as f64));
    diag.log()?.sum().sub(&off.scale(0.5))
}

/// Hinge on per-dimension standard deviations plus squared off-diagonal
/// covariances, negated so that larger is more uniform:
/// `−(μ·(1/d)Σ max(0, γ − sqrt(Var + ε)) + ν·(1/d)Σ_{i≠j} C_ij²)`.
pub fn variance_covariance(z: &Var, w: VcWeights) -> Result<Var> {
    let cov = covariance(z)?;
    let d = cov.shape()[0] as f64;
    let sd = cov.diagonal()?.add_scalar(w.eps).sqrt()?;
    let hinge = sd.neg().add_scalar(w.gamma).relu().sum().scale(1.0 / d);
    let sq = cov.square();
    let off = sq.sum().sub(&sq.diagonal()?.sum())?.scale(1.0 / d);
    Ok(hinge.scale(w.mu).add(&off.scale(w.nu))?.neg())
}

/// Gaussian entropy from the sample covariance, constants dropped.
///
/// `Exact` returns `½ log|Σ|`; `Taylor` returns half the second-order
/// expansion so both modes estimate the same quantity.
pub fn entropy_logdet(z: &Var, mode: LogDetMode, vc: VcWeights) -> Result<Var> {
    let (n, d) = batch_dims(z, 2)?;
    match mode {
        LogDetMode::Exact => {
            if n <= d {
                return Err(LdmError::DegenerateBatch(format!(
                    "exact LogDet needs N > d, got N = {n}, d = {d}"
                )));
            }
            if d > MAX_LOGDET_DIM {
                return Err(LdmError::OutOfRange {
                    what: "d",
                    value: d as f64,
                    reason: format!("exact LogDet supports d <= {MAX_LOGDET_DIM}"),
                });
            }
            let cov = covariance(z)?;
            let (vals, _) = linalg::sym_eigen(&cov.value())?;
            let min = vals.last().copied().unwrap_or(0.0);
            if min < EIGEN_FLOOR {
                return Err(LdmError::RankDeficient {
                    min_eigenvalue: min,
                });
            }
            Ok(cov.slogdet()?.1.scale(0.5))
        }
        LogDetMode::Taylor => Ok(taylor_logdet(&covariance(z)?)?.scale(0.5)),
        LogDetMode::VarianceCovariance => variance_covariance(z, vc),
    }
}

/// The additive constant `d/2 (1 + log 2π)` of the Gaussian entropy.
pub fn gaussian_entropy_constant(d: usize) -> f64 {
    0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln())
}

/// Plugin conditional-entropy estimate `−mean log p̂(z_t | z_{:t})`.
///
/// `logp` must come from a predictor whose parameters and conditioning
/// inputs were passed through `stopgrad`.
pub fn entropy_conditional_plugin(logp: &Var) -> Var {
    logp.mean().neg()
}

/// Entropy of the batch-averaged categorical distribution `−Σ_k p̄_k log p̄_k`.
pub fn entropy_categorical(p: &Var) -> Result<Var> {
    let (n, _) = batch_dims(p, 1)?;
    let pbar = p.sum_cols()?.scale(1.0 / n as f64);
    Ok(pbar.mul(&pbar.clamp_min(1e-300).log()?)?.sum().neg())
}

/// Joint entropy of a pair of categorical encodings, using
/// `p̄(k, k′) = mean_i p_ik p′_ik′`.
pub fn entropy_categorical_joint(p: &Var, pp: &Var) -> Result<Var> {
    let (n, _) = batch_dims(p, 1)?;
    let joint = p.transpose()?.matmul(pp)?.scale(1.0 / n as f64);
    Ok(joint.mul(&joint.clamp_min(1e-300).log()?)?.sum().neg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, Tape};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn on_tape<R>(t: &Tensor, f: impl FnOnce(&Var) -> R) -> R {
        let tape = Tape::new();
        f(&tape.constant(t.clone()))
    }

    fn brute_knn(x: &Tensor, k: usize, p: f64) -> Vec<f64> {
        let (n, d) = (x.rows(), x.cols());
        (0..n)
            .map(|i| {
                let mut ds: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| pnorm(&x.data()[i * d..(i + 1) * d], &x.data()[j * d..(j + 1) * d], p))
                    .collect();
                ds.sort_by(f64::total_cmp);
                ds[k - 1]
            })
            .collect()
    }

    #[test]
    fn sweep_search_matches_brute_force() {
        for (d, p) in [(1, 2.0), (2, 2.0), (3, 1.0), (2, 3.0)] {
            let x = normal_batch(300, d, d as u64 + 10);
            let fast = knn_search(x.data(), 300, d, 3, p);
            let slow = brute_knn(&x, 3, p);
            for (f, s) in fast.iter().zip(&slow) {
                assert_eq!(f.0, *s);
            }
        }
    }

    #[test]
    fn out_of_range_parameters_are_errors() {
        let x = normal_batch(20, 2, 1);
        on_tape(&x, |z| {
            for (k, p, q) in [(0, 2.0, 0.0), (3, 0.5, 0.0), (3, 2.0, 0.5), (3, 2.0, 1.5), (3, 2.0, -0.1)] {
                assert!(matches!(entropy_knn(z, k, p, q), Err(LdmError::OutOfRange { .. })));
            }
            assert!(matches!(entropy_kde(z, 0.0, Kernel::Gaussian), Err(LdmError::OutOfRange { .. })));
        });
    }

    #[test]
    fn kde_collapse_is_minimal() {
        let same = Tensor::full(&[16, 2], 0.3);
        let collapsed = on_tape(&same, |z| entropy_kde(z, 0.5, Kernel::Gaussian).unwrap().item());
        assert_eq!(collapsed, 0.0);
        let spread = on_tape(&normal_batch(16, 2, 1), |z| {
            entropy_kde(z, 0.5, Kernel::Gaussian).unwrap().item()
        });
        assert!(spread > collapsed);
    }

    #[test]
    fn kde_gaussian_accuracy() {
        let x = normal_batch(10_000, 1, 7);
        let h = on_tape(&x, |z| entropy_kde_corrected(z, 0.3).unwrap());
        let truth = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((h - truth).abs() < 0.1, "{h} vs {truth}");
    }

    #[test]
    fn kde_translation_invariance() {
        let x = normal_batch(50, 3, 2);
        let shifted = x.map(|v| v + 0.75);
        let a = on_tape(&x, |z| entropy_kde(z, 0.4, Kernel::Gaussian).unwrap().item());
        let b = on_tape(&shifted, |z| entropy_kde(z, 0.4, Kernel::Gaussian).unwrap().item());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batches() {
        let one = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            on_tape(&one, |z| entropy_kde(z, 1.0, Kernel::Gaussian)),
            Err(LdmError::DegenerateBatch(_))
        ));
        let four = normal_batch(4, 2, 0);
        assert!(matches!(
            on_tape(&four, |z| entropy_knn(z, 3, 2.0, 0.0)),
            Err(LdmError::DegenerateBatch(_))
        ));
        assert!(matches!(
            on_tape(&four, |z| entropy_kde(z, 1.0, Kernel::Vmf)),
            Err(LdmError::NotNormalized { .. })
        ));
    }

    #[test]
    fn knn_uniform_square_accuracy() {
        let mut rng = crate::rng(42);
        use rand::Rng;
        let x = Tensor::matrix(10_000, 2, (0..20_000).map(|_| rng.random::<f64>()).collect()).unwrap();
        let h = on_tape(&x, |z| entropy_knn_corrected(z, 3, 2.0, 0.0).unwrap());
        assert!(h.abs() < 0.1, "{h}");
    }

    #[test]
    fn knn_duplicates_are_excluded() {
        let mut x = normal_batch(40, 2, 3);
        let row: Vec<f64> = x.row(5).to_vec();
        x.data_mut()[12 * 2..13 * 2].copy_from_slice(&row);
        let (_, stats) = on_tape(&x, |z| entropy_knn_with_stats(z, 3, 2.0, 0.0).unwrap());
        assert_eq!(stats.duplicates, 2);
        assert_eq!(stats.kept, 38);
    }

    #[test]
    fn unit_ball_volumes() {
        assert!((log_unit_ball_volume(2, 2.0) - std::f64::consts::PI.ln()).abs() < 1e-12);
        assert!((log_unit_ball_volume(1, 2.0) - 2f64.ln()).abs() < 1e-12);
        assert!((log_unit_ball_volume(3, 1.0) - (8.0f64 / 6.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn logdet_examples() {
        let tape = Tape::new();
        let cov = tape.constant(Tensor::from_rows(&[vec![1.0, 0.1], vec![0.1, 1.0]]).unwrap());
        let t = taylor_logdet(&cov).unwrap().item();
        assert!((t + 0.01).abs() < 1e-12);
        let exact = cov.slogdet().unwrap().1.item();
        assert!((exact - 0.99f64.ln()).abs() < 1e-14);
        assert!((0.5 * exact + 0.005025).abs() < 1e-6);

        // whitened batch: covariance exactly the identity
        let w = Tensor::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ])
        .unwrap()
        .scale(0.75f64.sqrt());
        let e = on_tape(&w, |z| entropy_logdet(z, LogDetMode::Exact, VcWeights::default()).unwrap().item());
        assert!(e.abs() < 1e-14);
    }

    #[test]
    fn logdet_rank_deficiency() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(
            on_tape(&x, |z| entropy_logdet(z, LogDetMode::Exact, VcWeights::default())),
            Err(LdmError::RankDeficient { .. })
        ));
    }

    #[test]
    fn logdet_invariant_to_batch_duplication() {
        // covariance with 1/N normalization is invariant; with 1/(N−1) the
        // duplicated batch differs by the factor (N−1)·2/(2N−1) per axis
        let x = normal_batch(30, 3, 5);
        let xx = Tensor::vcat(&[&x, &x]).unwrap();
        let a = on_tape(&x, |z| entropy_logdet(z, LogDetMode::Exact, VcWeights::default()).unwrap().item());
        let b = on_tape(&xx, |z| entropy_logdet(z, LogDetMode::Exact, VcWeights::default()).unwrap().item());
        let n = 30.0_f64;
        let shift = 0.5 * 3.0 * ((n - 1.0) * 2.0 / (2.0 * n - 1.0)).ln();
        assert!((b - a - shift).abs() < 1e-12);
    }

    #[test]
    fn gaussian_convergence() {
        let truth = gaussian_entropy_constant(2) + 0.5 * 4f64.ln();
        for n in [1_000usize, 10_000] {
            let mut x = normal_batch(n, 2, 100 + n as u64);
            for r in 0..n {
                x.data_mut()[r * 2 + 1] *= 2.0;
            }
            let ld = on_tape(&x, |z| {
                entropy_logdet(z, LogDetMode::Exact, VcWeights::default()).unwrap().item()
            }) + gaussian_entropy_constant(2);
            let kn = on_tape(&x, |z| entropy_knn_corrected(z, 3, 2.0, 0.0).unwrap());
            // at N = 1e3 the sampling sd of ½log|Σ̂| is about sqrt(d/(2N)) ≈ 0.032
            let tol = if n >= 10_000 { 0.02 } else { 0.1 };
            assert!((ld - truth).abs() < tol, "logdet {ld} vs {truth} at {n}");
            assert!((kn - truth).abs() < 0.15, "knn {kn} vs {truth} at {n}");
        }
    }

    #[test]
    fn plugin_at_the_mean() {
        let tape = Tape::new();
        let d = 3.0;
        let logp = tape.constant(Tensor::full(&[5], -0.5 * d * (2.0 * std::f64::consts::PI).ln()));
        let h = entropy_conditional_plugin(&logp).item();
        assert!((h - 0.5 * d * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn categorical_entropies() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        assert!((entropy_categorical(&p).unwrap().item() - 2f64.ln()).abs() < 1e-14);
        assert!((entropy_categorical_joint(&p, &p).unwrap().item() - 2f64.ln()).abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn knn_scale_equivariance(seed in 0u64..1000, s in 0.1f64..10.0) {
            let x = normal_batch(64, 3, seed);
            let a = on_tape(&x, |z| entropy_knn(z, 3, 2.0, 0.0).unwrap().item());
            let b = on_tape(&x.scale(s), |z| entropy_knn(z, 3, 2.0, 0.0).unwrap().item());
            prop_assert!((b - a - 3.0 * s.ln()).abs() < 1e-9);
        }

        #[test]
        fn knn_translation_invariance(seed in 0u64..1000, c in -5.0f64..5.0) {
            let x = normal_batch(64, 2, seed);
            let a = on_tape(&x, |z| entropy_knn(z, 3, 2.0, 0.1).unwrap().item());
            let b = on_tape(&x.map(|v| v + c), |z| entropy_knn(z, 3, 2.0, 0.1).unwrap().item());
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn estimator_gradients(seed in 0u64..1000) {
            let x = normal_batch(32, 2, seed);
            for est in [
                EntropyEstimator::Kde { bandwidth: 0.7, kernel: Kernel::Gaussian },
                EntropyEstimator::Knn { k: 3, p_norm: 2.0, discard_top_frac: 0.1 },
                EntropyEstimator::LogDet { mode: LogDetMode::Exact, vc: VcWeights::default() },
                EntropyEstimator::LogDet { mode: LogDetMode::Taylor, vc: VcWeights::default() },
                EntropyEstimator::LogDet { mode: LogDetMode::VarianceCovariance, vc: VcWeights { gamma: 2.0, ..VcWeights::default() } },
            ] {
                let err = gradcheck(|_, xs| est.estimate(&xs[0]), std::slice::from_ref(&x), 1e-6).unwrap();
                prop_assert!(err < 1e-3, "{est:?}: {err}");
            }
            let err = gradcheck(
                |_, xs| entropy_kde(&xs[0].l2_normalize_rows()?, 0.5, Kernel::Vmf),
                std::slice::from_ref(&x),
                1e-6,
            ).unwrap();
            prop_assert!(err < 1e-3, "vmf: {err}");
        }
    }
}
