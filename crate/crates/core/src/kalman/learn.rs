use serde::{Deserialize, Serialize};

use super::{KalmanModel, LN_2PI};
use crate::diffcore::{softplus, Tape, Tensor, Var};
use crate::error::{LdmError, Result};
use crate::nets::{uniform_fill, InitScheme, Mlp, Module};

pub(crate) const NOISE_FLOOR: f64 = 1e-6;

/// How the observation map `A` is set up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// `A` is a free parameter.
    #[default]
    Learned,
    /// `A = [I_m | 0]`, fixed: the first `m` hidden dims are observed.
    Selector,
}

/// Learnable filter parameters. Noise variances are `softplus(raw) + 1e-6`
/// and `P0 = L Lᵀ` with `L` the lower triangle of `p0_chol`.
#[derive(Clone, Debug)]
pub struct KalmanParams {
    pub f: Tensor,
    pub q_raw: Tensor,
    pub a: Tensor,
    pub r_raw: Tensor,
    pub h0: Tensor,
    pub p0_chol: Tensor,
    pub observation: ObservationMode,
    /// Maps an observation `x_t` to raw per-step noise variances.
    pub noise_net: Option<Mlp>,
    /// Score each step with `N(z_t; A h_t, σ²I)` instead of the filter's own
    /// innovation covariance. The belief recursion is unchanged.
    pub predictive_sigma2: Option<f64>,
}

/// Per-step observation-noise inputs.
pub enum NoiseSource<'a> {
    /// Use the learned constant `Robs`.
    Fixed,
    /// Inputs to the noise network, one `[B, x_dim]` var per step.
    PerStep(&'a [Var]),
}

pub struct FilterOutput {
    /// Predictive log-density per step, each `[B]`.
    pub loglik: Vec<Var>,
    /// Posterior means per step, each `[B, n]`.
    pub hidden: Vec<Var>,
    /// Predicted observation means per step, each `[B, m]`.
    pub z_mean: Vec<Var>,
    /// Posterior covariances per step: one shared entry, or one per sequence
    /// when the noise is input-dependent.
    pub cov: Vec<Vec<Tensor>>,
}

impl FilterOutput {
    /// Sum over steps of the batch-mean log-density.
    pub fn total_mean_loglik(&self) -> Result<Var> {
        let mut acc = self.loglik[0].mean();
        for l in &self.loglik[1..] {
            acc = acc.add(&l.mean())?;
        }
        Ok(acc)
    }
}

fn inv_softplus(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

fn selector(m: usize, n: usize) -> Tensor {
    let mut a = Tensor::zeros(&[m, n]);
    for i in 0..m.min(n) {
        a.set(i, i, 1.0);
    }
    a
}

impl KalmanParams {
    /// Defaults: `F = I`, `Q = R = 0.1·I`, `h0 = 0`, `P0 = I`, and a selector
    /// `A` (also the starting point when `A` is learned).
    pub fn new(n: usize, m: usize, observation: ObservationMode) -> Self {
        KalmanParams {
            f: Tensor::eye(n),
            q_raw: Tensor::full(&[n], inv_softplus(0.1)),
            a: selector(m, n),
            r_raw: Tensor::full(&[m], inv_softplus(0.1)),
            h0: Tensor::zeros(&[n]),
            p0_chol: Tensor::eye(n),
            observation,
            noise_net: None,
            predictive_sigma2: None,
        }
    }

    /// Adds a noise network `x_dim → hidden → m`.
    pub fn with_noise_net(mut self, x_dim: usize, hidden: usize) -> Self {
        let m = self.m();
        self.noise_net = Some(Mlp::new(
            &[x_dim, hidden, m],
            crate::nets::Activation::Tanh,
            crate::nets::OutputMap::Identity,
        ));
        self
    }

    pub fn n(&self) -> usize {
        self.f.rows()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    fn lower(&self) -> Tensor {
        let n = self.n();
        let mut l = self.p0_chol.clone();
        for i in 0..n {
            for j in i + 1..n {
                l.set(i, j, 0.0);
            }
        }
        l
    }

    /// Current parameter values as a plain model with constant noise.
    pub fn to_model(&self) -> Result<KalmanModel> {
        let var = |raw: &Tensor| Tensor::diag(&raw.data().iter().map(|&r| softplus(r) + NOISE_FLOOR).collect::<Vec<_>>());
        let l = self.lower();
        Ok(KalmanModel {
            f: self.f.clone(),
            q: var(&self.q_raw),
            a: self.a.clone(),
            robs: var(&self.r_raw),
            h0: self.h0.clone(),
            p0: l.matmul(&l.transpose()?)?,
        })
    }

    /// Runs the filter on a batch of sequences. `p` holds this module's bound
    /// parameters; `z_seq[t]` is `[B, m]`.
    pub fn filter(&self, p: &[Var], z_seq: &[Var], noise: NoiseSource<'_>) -> Result<FilterOutput> {
        self.filter_detached(p, z_seq, noise, false)
    }

    /// As [`filter`](Self::filter); with `detach_conditioning` the belief
    /// updates see `stopgrad(z_t)` while each step's log-density still
    /// depends on the live `z_t`.
    pub fn filter_detached(
        &self,
        p: &[Var],
        z_seq: &[Var],
        noise: NoiseSource<'_>,
        detach_conditioning: bool,
    ) -> Result<FilterOutput> {
        if z_seq.is_empty() {
            return Err(LdmError::DegenerateBatch("empty sequence".into()));
        }
        let tape = z_seq[0].tape().clone();
        let (n, m) = (self.n(), self.m());
        let b = z_seq[0].shape()[0];
        let f = &p[0];
        let q = p[1].softplus().add_scalar(NOISE_FLOOR).diag_embed()?;
        let a = match self.observation {
            ObservationMode::Learned => p[2].clone(),
            ObservationMode::Selector => p[2].stopgrad(),
        };
        let r = p[3].softplus().add_scalar(NOISE_FLOOR);
        let mut mask = Tensor::ones(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                mask.set(i, j, 0.0);
            }
        }
        let l = p[5].mul(&tape.constant(mask))?;
        let p0 = l.matmul_t(&l)?;
        let h0 = p[4].reshape(&[1, n])?;

        let mut out = FilterOutput {
            loglik: Vec::with_capacity(z_seq.len()),
            hidden: Vec::with_capacity(z_seq.len()),
            z_mean: Vec::with_capacity(z_seq.len()),
            cov: Vec::with_capacity(z_seq.len()),
        };
        match noise {
            NoiseSource::Fixed => {
                let rm = r.diag_embed()?;
                let mut h = tape.constant(Tensor::zeros(&[b, n])).add(&h0)?;
                let mut pc = p0;
                for (t, z) in z_seq.iter().enumerate() {
                    let zc = if detach_conditioning { z.stopgrad() } else { z.clone() };
                    let s = step(f, &q, &a, &rm, &h, &pc, z, &zc, self.predictive_sigma2, t)?;
                    out.cov.push(vec![s.p.value()]);
                    out.loglik.push(s.loglik);
                    out.hidden.push(s.h.clone());
                    out.z_mean.push(s.z_mean);
                    h = s.h;
                    pc = s.p;
                }
            }
            NoiseSource::PerStep(xs) => {
                let net = self
                    .noise_net
                    .as_ref()
                    .ok_or_else(|| LdmError::ConfigInvalid {
                        field: "kalman.noise_net".into(),
                        reason: "input-dependent noise needs a noise network".into(),
                    })?;
                if xs.len() != z_seq.len() {
                    return Err(LdmError::ConfigInvalid {
                        field: "kalman.noise_inputs".into(),
                        reason: "noise inputs and sequence differ in length".into(),
                    });
                }
                let np = &p[6..];
                let r_steps = xs
                    .iter()
                    .map(|x| Ok(net.forward(np, x)?.softplus().add_scalar(NOISE_FLOOR)))
                    .collect::<Result<Vec<_>>>()?;
                let mut hs = vec![h0.clone(); b];
                let mut ps = vec![p0; b];
                for (t, z) in z_seq.iter().enumerate() {
                    let (mut ll, mut hid, mut zm, mut cov) = (vec![], vec![], vec![], vec![]);
                    for i in 0..b {
                        let rm = r_steps[t].gather_rows(&[i])?.reshape(&[m])?.diag_embed()?;
                        let zi = z.gather_rows(&[i])?;
                        let zc = if detach_conditioning { zi.stopgrad() } else { zi.clone() };
                        let s = step(f, &q, &a, &rm, &hs[i], &ps[i], &zi, &zc, self.predictive_sigma2, t)?;
                        ll.push(s.loglik);
                        hid.push(s.h.clone());
                        zm.push(s.z_mean);
                        cov.push(s.p.value());
                        hs[i] = s.h;
                        ps[i] = s.p;
                    }
                    let ll_cols: Vec<Var> = ll.iter().map(|v| v.reshape(&[1, 1])).collect::<Result<_>>()?;
                    out.loglik.push(Var::concat_rows(&refs(&ll_cols))?.reshape(&[b])?);
                    out.hidden.push(Var::concat_rows(&refs(&hid))?);
                    out.z_mean.push(Var::concat_rows(&refs(&zm))?);
                    out.cov.push(cov);
                }
            }
        }
        Ok(out)
    }
}

fn refs(v: &[Var]) -> Vec<&Var> {
    v.iter().collect()
}

struct StepOut {
    h: Var,
    p: Var,
    z_mean: Var,
    loglik: Var,
}

#[allow(clippy::too_many_arguments)]
fn step(
    f: &Var,
    q: &Var,
    a: &Var,
    r: &Var,
    h: &Var,
    p: &Var,
    z: &Var,
    z_cond: &Var,
    sigma2: Option<f64>,
    t: usize,
) -> Result<StepOut> {
    let m = a.shape()[0];
    let h_pred = h.matmul_t(f)?;
    let p_pred = f.matmul(p)?.matmul_t(f)?.add(q)?;
    let z_mean = h_pred.matmul_t(a)?;
    let ap = a.matmul(&p_pred)?;
    let s = ap.matmul_t(a)?.add(r)?;
    let s = s.add(&s.transpose()?)?.scale(0.5);
    let e = z.sub(&z_mean)?;
    let loglik = match sigma2 {
        Some(v) => e.square().sum_rows()?.scale(1.0 / v).add_scalar(m as f64 * (LN_2PI + v.ln())).scale(-0.5),
        None => {
            let w = s.solve(&e.transpose()?).map_err(|_| LdmError::SingularInnovation)?;
            let quad = e.transpose()?.mul(&w)?.sum_cols()?;
            let (_, logdet) = s.slogdet().map_err(|_| LdmError::SingularInnovation)?;
            quad.add(&logdet)?.add_scalar(m as f64 * LN_2PI).scale(-0.5)
        }
    };
    let kt = s.solve(&ap)?;
    let h_new = h_pred.add(&z_cond.sub(&z_mean)?.matmul(&kt)?)?;
    let p_new = p_pred.sub(&kt.transpose()?.matmul(&ap)?)?;
    let p_new = p_new.add(&p_new.transpose()?)?.scale(0.5);
    if !(loglik.value().is_finite() && h_new.value().is_finite() && p_new.value().is_finite()) {
        return Err(LdmError::NumericalBlowup(format!("kalman filter at step {t}")));
    }
    Ok(StepOut {
        h: h_new,
        p: p_new,
        z_mean,
        loglik,
    })
}

impl Module for KalmanParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("kalman.f".to_string(), &self.f),
            ("kalman.q_raw".to_string(), &self.q_raw),
            ("kalman.a".to_string(), &self.a),
            ("kalman.r_raw".to_string(), &self.r_raw),
            ("kalman.h0".to_string(), &self.h0),
            ("kalman.p0_chol".to_string(), &self.p0_chol),
        ];
        if let Some(net) = &self.noise_net {
            v.extend(net.named_params().into_iter().map(|(n, t)| (format!("noise.{n}"), t)));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.f,
            &mut self.q_raw,
            &mut self.a,
            &mut self.r_raw,
            &mut self.h0,
            &mut self.p0_chol,
        ];
        if let Some(net) = &mut self.noise_net {
            v.extend(net.params_mut());
        }
        v
    }

    fn init(&mut self, rng: &mut dyn rand::RngCore, scheme: InitScheme) {
        let (n, m) = (self.n(), self.m());
        let fresh = KalmanParams::new(n, m, self.observation);
        self.f = fresh.f;
        self.q_raw = fresh.q_raw;
        self.r_raw = fresh.r_raw;
        self.h0 = fresh.h0;
        self.p0_chol = fresh.p0_chol;
        self.a = fresh.a;
        if self.observation == ObservationMode::Learned && m > n {
            uniform_fill(&mut self.a, 1.0 / (n as f64).sqrt(), rng);
        }
        if let Some(net) = &mut self.noise_net {
            net.init(rng, scheme);
        }
    }
}

/// Binds `params` and runs the filter on constant sequences; convenience for
/// evaluation without gradients.
pub fn filter_values(params: &KalmanParams, z_seq: &[Tensor]) -> Result<FilterOutput> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let zs: Vec<Var> = z_seq.iter().map(|z| tape.constant(z.clone())).collect();
    params.filter(&p, &zs, NoiseSource::Fixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck;
    use crate::nets::init_params;
    use rand::Rng;

    fn perturbed(n: usize, m: usize, seed: u64) -> KalmanParams {
        let mut k = KalmanParams::new(n, m, ObservationMode::Learned);
        let mut rng = crate::rng(seed);
        for t in k.params_mut() {
            for x in t.data_mut() {
                *x += 0.2 * (rng.random::<f64>() - 0.5);
            }
        }
        k.f = k.f.scale(0.8);
        k
    }

    fn batch(t_len: usize, b: usize, m: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = crate::rng(seed);
        (0..t_len)
            .map(|_| Tensor::matrix(b, m, (0..b * m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap())
            .collect()
    }

    #[test]
    fn tape_filter_matches_plain_filter() {
        let k = perturbed(3, 2, 1);
        let model = k.to_model().unwrap();
        let zs = batch(6, 4, 2, 2);
        let out = filter_values(&k, &zs).unwrap();
        for i in 0..4 {
            let seq = Tensor::from_rows(&zs.iter().map(|z| z.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let (_, per, trace) = super::super::filter(&model, &seq).unwrap();
            for t in 0..6 {
                assert!((out.loglik[t].value().data()[i] - per[t]).abs() < 1e-10);
                let h = out.hidden[t].value();
                for j in 0..3 {
                    assert!((h.get(i, j) - trace[t].h[j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn gradient_wrt_f_matches_finite_differences() {
        let k = perturbed(2, 2, 5);
        let zs = batch(4, 1, 2, 6);
        let mut inputs: Vec<Tensor> = k.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.extend(zs.iter().cloned());
        let err = gradcheck(
            |_, v| {
                let out = k.filter(&v[..6], &v[6..], NoiseSource::Fixed)?;
                out.total_mean_loglik()
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn fixed_predictive_variance_scores_squared_error() {
        let mut k = perturbed(2, 2, 3);
        let zs = batch(5, 3, 2, 4);
        let learned = filter_values(&k, &zs).unwrap();
        k.predictive_sigma2 = Some(0.5);
        let fixed = filter_values(&k, &zs).unwrap();
        for t in 0..5 {
            let (z, mean) = (&zs[t], learned.z_mean[t].value());
            for i in 0..3 {
                let sq: f64 = (0..2).map(|j| (z.get(i, j) - mean.get(i, j)).powi(2)).sum();
                let want = -sq / (2.0 * 0.5) - (2.0 * std::f64::consts::PI * 0.5).ln();
                assert!((fixed.loglik[t].value().data()[i] - want).abs() < 1e-12);
            }
            assert_eq!(fixed.hidden[t].value(), learned.hidden[t].value());
        }
        let mut inputs: Vec<Tensor> = k.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.extend(batch(4, 1, 2, 6));
        let err = gradcheck(|_, v| k.filter(&v[..6], &v[6..], NoiseSource::Fixed)?.total_mean_loglik(), &inputs, 1e-6).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn selector_mode_freezes_a() {
        let k = KalmanParams::new(3, 2, ObservationMode::Selector);
        assert_eq!(k.a, Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let tape = Tape::new();
        let p = k.bind(&tape);
        let zs: Vec<Var> = batch(3, 2, 2, 1).into_iter().map(|z| tape.constant(z)).collect();
        let loss = k.filter(&p, &zs, NoiseSource::Fixed).unwrap().total_mean_loglik().unwrap();
        tape.backward(&loss).unwrap();
        assert!(p[2].grad().is_none_or(|g| g.max_abs() == 0.0));
        assert!(p[0].grad().unwrap().max_abs() > 0.0);
    }

    #[test]
    fn noise_network_receives_gradient_and_matches_fixed_noise_when_constant() {
        let mut k = perturbed(2, 2, 7).with_noise_net(3, 4);
        init_params(&mut k, 3, InitScheme::UniformFanIn);
        let tape = Tape::new();
        let p = k.bind(&tape);
        let zs: Vec<Var> = batch(4, 3, 2, 2).into_iter().map(|z| tape.constant(z)).collect();
        let xs: Vec<Var> = batch(4, 3, 3, 9).into_iter().map(|x| tape.constant(x)).collect();
        let loss = k.filter(&p, &zs, NoiseSource::PerStep(&xs)).unwrap().total_mean_loglik().unwrap();
        tape.backward(&loss).unwrap();
        for v in &p[6..] {
            assert!(v.grad().unwrap().max_abs() > 0.0);
        }

        // a noise network with zero weights and bias r_raw reproduces Robs
        let mut c = k.clone();
        let net = c.noise_net.as_mut().unwrap();
        for t in net.params_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let last = net.params_mut().pop().unwrap();
        *last = c.r_raw.clone();
        let tape = Tape::new();
        let p = c.bind_frozen(&tape);
        let zs: Vec<Var> = batch(4, 3, 2, 2).into_iter().map(|z| tape.constant(z)).collect();
        let xs: Vec<Var> = batch(4, 3, 3, 9).into_iter().map(|x| tape.constant(x)).collect();
        let a = c.filter(&p, &zs, NoiseSource::PerStep(&xs)).unwrap();
        let b = c.filter(&p, &zs, NoiseSource::Fixed).unwrap();
        for t in 0..4 {
            assert!(a.loglik[t].value().sub(&b.loglik[t].value()).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn noise_floor_keeps_variances_positive() {
        let mut k = KalmanParams::new(2, 2, ObservationMode::Learned);
        k.q_raw = Tensor::full(&[2], -800.0);
        k.r_raw = Tensor::full(&[2], -800.0);
        let m = k.to_model().unwrap();
        assert!(m.q.diagonal().iter().all(|&v| v >= NOISE_FLOOR));
        assert!(m.robs.diagonal().iter().all(|&v| v >= NOISE_FLOOR));
    }
}
