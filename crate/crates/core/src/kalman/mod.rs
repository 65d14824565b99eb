//! Linear-Gaussian latent predictor.
//!
//! [`KalmanModel`] and [`KalmanState`] hold plain values and implement the
//! textbook recursions. [`KalmanParams`] is the learnable counterpart that
//! runs the same recursions on the tape for a batch of sequences.

mod learn;

pub use learn::{filter_values, FilterOutput, KalmanParams, NoiseSource, ObservationMode};

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffcore::{linalg, Tensor};
use crate::error::{shape_err, LdmError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanModel {
    /// Transition `[n, n]`.
    pub f: Tensor,
    /// Process noise `[n, n]`.
    pub q: Tensor,
    /// Observation map `[m, n]`.
    pub a: Tensor,
    /// Observation noise `[m, m]`.
    pub robs: Tensor,
    pub h0: Tensor,
    pub p0: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    pub h: Tensor,
    pub p: Tensor,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub h_pred: Tensor,
    pub p_pred: Tensor,
    pub z_mean: Tensor,
    pub sigma_e: Tensor,
}

fn col(v: &Tensor) -> Result<Tensor> {
    v.clone().reshape(&[v.numel(), 1])
}

fn check_finite(what: &str, ts: &[&Tensor]) -> Result<()> {
    if ts.iter().all(|t| t.is_finite()) {
        Ok(())
    } else {
        Err(LdmError::NumericalBlowup(what.to_string()))
    }
}

impl KalmanModel {
    pub fn n(&self) -> usize {
        self.f.rows()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn initial_state(&self) -> KalmanState {
        KalmanState {
            h: self.h0.clone(),
            p: self.p0.clone(),
            t: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        self.f.require_square("kalman.f")?;
        let ok = self.q.shape() == [n, n]
            && self.a.shape() == [m, n]
            && self.robs.shape() == [m, m]
            && self.h0.shape() == [n]
            && self.p0.shape() == [n, n];
        if !ok {
            return Err(shape_err("kalman model", self.f.shape(), self.a.shape()));
        }
        Ok(())
    }
}

/// `h_pred = F h`, `P_pred = F P Fᵀ + Q`, `z_mean = A h_pred`, `Σ_e = A P_pred Aᵀ + R`.
pub fn predict(model: &KalmanModel, state: &KalmanState) -> Result<Prediction> {
    let h_pred = model.f.matmul(&col(&state.h)?)?;
    let ft = model.f.transpose()?;
    let mut p_pred = model.f.matmul(&state.p)?.matmul(&ft)?.add(&model.q)?;
    p_pred.symmetrize();
    let z_mean = model.a.matmul(&h_pred)?;
    let mut sigma_e = model
        .a
        .matmul(&p_pred)?
        .matmul(&model.a.transpose()?)?
        .add(&model.robs)?;
    sigma_e.symmetrize();
    check_finite("kalman predict", &[&h_pred, &p_pred, &sigma_e])?;
    Ok(Prediction {
        h_pred: Tensor::vector(h_pred.into_data()),
        p_pred,
        z_mean: Tensor::vector(z_mean.into_data()),
        sigma_e,
    })
}

/// Gain `K = P_pred Aᵀ Σ_e⁻¹` (by solving), then the posterior mean and the
/// symmetrized covariance `(I − K A) P_pred`.
pub fn update(model: &KalmanModel, pred: &Prediction, z_obs: &Tensor, t: usize) -> Result<KalmanState> {
    let m = model.m();
    if z_obs.numel() != m {
        return Err(shape_err("kalman update", z_obs.shape(), &[m]));
    }
    let lu = linalg::Lu::factor(&pred.sigma_e).map_err(|_| LdmError::SingularInnovation)?;
    // Kᵀ = Σ_e⁻¹ A P_pred since both Σ_e and P_pred are symmetric
    let kt = lu.solve(&model.a.matmul(&pred.p_pred)?)?;
    let k = kt.transpose()?;
    let innov = z_obs.sub(&pred.z_mean)?;
    let h = pred.h_pred.add(&Tensor::vector(k.matmul(&col(&innov)?)?.into_data()))?;
    let mut p = pred.p_pred.sub(&k.matmul(&model.a)?.matmul(&pred.p_pred)?)?;
    p.symmetrize();
    check_finite("kalman update", &[&h, &p])?;
    Ok(KalmanState { h, p, t })
}

/// `log N(z; mean, Σ)` including the `(m/2) log 2π` term.
pub fn gaussian_logpdf(z: &Tensor, mean: &Tensor, sigma: &Tensor) -> Result<f64> {
    let m = z.numel();
    let lu = linalg::Lu::factor(sigma).map_err(|_| LdmError::SingularInnovation)?;
    let e = z.sub(mean)?;
    let w = lu.solve(&e)?;
    let quad: f64 = e.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let (_, logdet) = lu.slogdet();
    Ok(-0.5 * (quad + logdet + m as f64 * LN_2PI))
}

/// One row of a filter trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub h: Vec<f64>,
    pub p_diag: Vec<f64>,
    pub z_obs: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub loglik: f64,
}

/// Runs the filter over `z_seq` (`[T, m]`), returning the total and per-step
/// predictive log-densities and the trace.
pub fn filter(model: &KalmanModel, z_seq: &Tensor) -> Result<(f64, Vec<f64>, Vec<TraceRow>)> {
    let (t_len, m) = z_seq.require_matrix("sequence_loglik")?;
    if m != model.m() {
        return Err(shape_err("sequence_loglik", z_seq.shape(), &[t_len, model.m()]));
    }
    if t_len == 0 {
        return Err(LdmError::DegenerateBatch("empty sequence".into()));
    }
    let mut state = model.initial_state();
    let mut per_step = Vec::with_capacity(t_len);
    let mut trace = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let z = Tensor::vector(z_seq.row(t).to_vec());
        let pred = predict(model, &state)?;
        let ll = gaussian_logpdf(&z, &pred.z_mean, &pred.sigma_e)?;
        if !ll.is_finite() {
            return Err(LdmError::NumericalBlowup(format!("log-likelihood at step {t}")));
        }
        state = update(model, &pred, &z, t + 1)?;
        per_step.push(ll);
        trace.push(TraceRow {
            t,
            h: state.h.data().to_vec(),
            p_diag: state.p.diagonal(),
            z_obs: z.data().to_vec(),
            z_mean: pred.z_mean.data().to_vec(),
            loglik: ll,
        });
    }
    Ok((per_step.iter().sum(), per_step, trace))
}

/// Total and per-step predictive log-density of a sequence.
pub fn sequence_loglik(model: &KalmanModel, z_seq: &Tensor) -> Result<(f64, Vec<f64>)> {
    let (total, per, _) = filter(model, z_seq)?;
    Ok((total, per))
}

/// Writes a trace as CSV: `t, h_*, p_diag_*, z_obs_*, z_mean_*, loglik`.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(r) = trace.first() {
        let mut cols = vec!["t".to_string()];
        let named = |p: &str, k: usize| (0..k).map(|i| format!("{p}_{i}")).collect::<Vec<_>>();
        cols.extend(named("h", r.h.len()));
        cols.extend(named("p_diag", r.p_diag.len()));
        cols.extend(named("z_obs", r.z_obs.len()));
        cols.extend(named("z_mean", r.z_mean.len()));
        cols.push("loglik".into());
        writeln!(f, "{}", cols.join(","))?;
    }
    for r in trace {
        let mut vals = vec![r.t.to_string()];
        for v in r.h.iter().chain(&r.p_diag).chain(&r.z_obs).chain(&r.z_mean) {
            vals.push(format!("{v}"));
        }
        vals.push(format!("{}", r.loglik));
        writeln!(f, "{}", vals.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Two-sided standard-normal quantile for `level` (1.959964 at 0.95).
pub fn normal_quantile(level: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + 0.5 * level)
}

/// Interval `J h + c ± z·sqrt(diag(J P Jᵀ))` for an affine probe.
pub fn confidence_interval(
    state: &KalmanState,
    j: &Tensor,
    c: &[f64],
    level: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (k, n) = j.require_matrix("confidence_interval")?;
    if n != state.h.numel() || c.len() != k {
        return Err(shape_err("confidence_interval", j.shape(), &[c.len(), state.h.numel()]));
    }
    let mean = j.matmul(&col(&state.h)?)?;
    let cov = j.matmul(&state.p)?.matmul(&j.transpose()?)?;
    let q = normal_quantile(level);
    let half: Vec<f64> = cov.diagonal().iter().map(|v| q * v.max(0.0).sqrt()).collect();
    let centre: Vec<f64> = mean.data().iter().zip(c).map(|(a, b)| a + b).collect();
    Ok((
        centre.iter().zip(&half).map(|(m, h)| m - h).collect(),
        centre.iter().zip(&half).map(|(m, h)| m + h).collect(),
    ))
}

/// Sampling interval for a nonlinear probe: draws `h ~ N(h, P)`, maps each
/// sample through `probe` (`[S, n] -> [S, k]`) and returns empirical quantiles.
pub fn confidence_interval_mc(
    state: &KalmanState,
    probe: &dyn Fn(&Tensor) -> Result<Tensor>,
    level: f64,
    samples: usize,
    rng: &mut crate::Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = state.h.numel();
    let jitter = Tensor::eye(n).scale(1e-12);
    let l = linalg::cholesky(&state.p.add(&jitter)?)?;
    let mut draws = Vec::with_capacity(samples * n);
    for _ in 0..samples {
        let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for i in 0..n {
            let s: f64 = (0..=i).map(|k| l.get(i, k) * e[k]).sum();
            draws.push(state.h.data()[i] + s);
        }
    }
    let out = probe(&Tensor::matrix(samples, n, draws)?)?;
    let k = out.cols();
    let (mut lo, mut hi) = (Vec::with_capacity(k), Vec::with_capacity(k));
    let alpha = 0.5 * (1.0 - level);
    for c in 0..k {
        let mut v = out.col(c);
        v.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&v, alpha));
        hi.push(quantile_sorted(&v, 1.0 - alpha));
    }
    Ok((lo, hi))
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

/// Draws a sequence `[T, m]` from the model itself.
pub fn simulate(model: &KalmanModel, t_len: usize, rng: &mut crate::Rng) -> Result<Tensor> {
    let (n, m) = (model.n(), model.m());
    let lq = linalg::cholesky(&model.q.add(&Tensor::eye(n).scale(1e-300))?)?;
    let lr = linalg::cholesky(&model.robs)?;
    let lp = linalg::cholesky(&model.p0)?;
    let noise = |l: &Tensor, k: usize, rng: &mut crate::Rng| -> Tensor {
        let e: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::vector((0..k).map(|i| (0..=i).map(|j| l.get(i, j) * e[j]).sum()).collect())
    };
    let mut h = model.h0.add(&noise(&lp, n, rng))?;
    let mut out = Vec::with_capacity(t_len * m);
    for _ in 0..t_len {
        h = Tensor::vector(model.f.matmul(&col(&h)?)?.into_data()).add(&noise(&lq, n, rng))?;
        let z = Tensor::vector(model.a.matmul(&col(&h)?)?.into_data()).add(&noise(&lr, m, rng))?;
        out.extend_from_slice(z.data());
    }
    Tensor::matrix(t_len, m, out)
}
