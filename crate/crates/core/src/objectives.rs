//! Training objectives: pairwise and temporal distribution matching, the
//! stop-gradient predictive surrogate, and linear ICA.
//!
//! Every loss is `−(alignment + entropy_term)`; both addends are returned
//! for logging.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tensor, Var};
use crate::entropy::{entropy_categorical, entropy_categorical_joint, entropy_conditional_plugin, EntropyEstimator};
use crate::error::{shape_err, LdmError, Result};
use crate::kalman::{KalmanParams, NoiseSource};
use crate::latentmodels::{Family, LatentModel};
use crate::nets::{InitScheme, Mlp, Module, Rnn};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    PairLdm,
    PairMi,
    TemporalLdm,
    TemporalMi,
    TemporalStopGrad,
    LinearIca,
}

impl Flavor {
    pub fn is_temporal(self) -> bool {
        matches!(self, Flavor::TemporalLdm | Flavor::TemporalMi | Flavor::TemporalStopGrad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub flavor: Flavor,
    pub latent_model: LatentModel,
    pub estimator: EntropyEstimator,
}

/// A loss with its two addends.
#[derive(Clone)]
pub struct LossBreakdown {
    pub loss: Var,
    pub alignment: Var,
    pub entropy_term: Var,
}

impl LossBreakdown {
    fn assemble(alignment: Var, entropy_term: Var) -> Result<Self> {
        let loss = alignment.add(&entropy_term)?.neg();
        Ok(LossBreakdown {
            loss,
            alignment,
            entropy_term,
        })
    }

    /// `(loss, alignment, entropy_term)` as numbers.
    pub fn values(&self) -> (f64, f64, f64) {
        (self.loss.item(), self.alignment.item(), self.entropy_term.item())
    }
}

impl Objective {
    pub fn new(flavor: Flavor, latent_model: LatentModel, estimator: EntropyEstimator) -> Self {
        Objective {
            flavor,
            latent_model,
            estimator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.latent_model.validate()?;
        self.estimator.validate()?;
        let plugin = matches!(self.estimator, EntropyEstimator::StopGradPlugin);
        match self.flavor {
            Flavor::TemporalLdm | Flavor::TemporalStopGrad => {
                if !matches!(self.latent_model.family, Family::PlaneGaussian { .. }) {
                    return Err(LdmError::ConfigInvalid {
                        field: "model.latent.family".into(),
                        reason: "conditional-entropy flavors need a Gaussian predictor family".into(),
                    });
                }
                Ok(())
            }
            Flavor::PairLdm | Flavor::PairMi | Flavor::TemporalMi if plugin => Err(LdmError::ConfigInvalid {
                field: "model.estimator".into(),
                reason: "the plugin estimator only applies to conditional-entropy flavors".into(),
            }),
            _ => Ok(()),
        }
    }

    fn marginal(&self, z: &Var) -> Result<Var> {
        match self.latent_model.family {
            Family::Categorical { .. } => entropy_categorical(z),
            _ => self.estimator.estimate(z),
        }
    }

    fn joint(&self, z: &Var, zp: &Var) -> Result<Var> {
        match self.latent_model.family {
            Family::Categorical { .. } => entropy_categorical_joint(z, zp),
            _ => self.estimator.estimate_joint(z, zp),
        }
    }

    /// Pairwise loss on two views `[b, d]`: `H[z, z′]` for `PairLdm`,
    /// `2·H[z]` for `PairMi`.
    pub fn loss_pair(&self, z: &Var, zp: &Var) -> Result<LossBreakdown> {
        let alignment = self.latent_model.alignment(z, zp)?;
        let entropy_term = match self.flavor {
            Flavor::PairLdm => self.joint(z, zp)?,
            Flavor::PairMi => self.marginal(z)?.scale(2.0),
            other => {
                return Err(LdmError::ConfigInvalid {
                    field: "model.flavor".into(),
                    reason: format!("{other:?} is not a pairwise flavor"),
                })
            }
        };
        LossBreakdown::assemble(alignment, entropy_term)
    }

    /// Temporal loss on `z_seq` (`T` steps of `[b, d]`).
    ///
    /// The alignment is the summed batch-mean predictive log-density. The
    /// conditional flavors use the plugin estimate from a detached copy of
    /// the predictor; `TemporalMi` pools all predicted `z_t` into one sample
    /// set and counts its entropy once per predicted step.
    pub fn loss_temporal(
        &self,
        z_seq: &[Var],
        predictor: &Predictor,
        pred_params: &[Var],
        noise: Option<&[Var]>,
    ) -> Result<LossBreakdown> {
        if z_seq.len() < 2 {
            return Err(shape_err("loss_temporal", &[z_seq.len()], &[2]));
        }
        let logp = predictor.log_probs(pred_params, z_seq, noise, false)?;
        let alignment = sum_means(&logp)?;
        let entropy_term = match self.flavor {
            Flavor::TemporalLdm | Flavor::TemporalStopGrad => {
                let frozen: Vec<Var> = pred_params.iter().map(Var::stopgrad).collect();
                let sg = predictor.log_probs(&frozen, z_seq, noise, true)?;
                let mut acc = entropy_conditional_plugin(&sg[0]);
                for l in &sg[1..] {
                    acc = acc.add(&entropy_conditional_plugin(l))?;
                }
                acc
            }
            Flavor::TemporalMi => {
                let first = z_seq.len() - logp.len();
                let targets: Vec<&Var> = z_seq[first..].iter().collect();
                let pooled = Var::concat_rows(&targets)?;
                self.marginal(&pooled)?.scale(logp.len() as f64)
            }
            other => {
                return Err(LdmError::ConfigInvalid {
                    field: "model.flavor".into(),
                    reason: format!("{other:?} is not a temporal flavor"),
                })
            }
        };
        LossBreakdown::assemble(alignment, entropy_term)
    }
}

fn sum_means(xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0].mean();
    for x in &xs[1..] {
        acc = acc.add(&x.mean())?;
    }
    Ok(acc)
}

/// Per-row Gaussian log-density `log N(z; μ, diag(exp(log σ²)))`, `[b]`.
pub fn gaussian_rows_logpdf(z: &Var, mean: &Var, log_sigma2: &Var) -> Result<Var> {
    let d = z.shape()[1];
    let inv = log_sigma2.neg().exp();
    let quad = z.sub(mean)?.square().mul(&inv)?.sum_rows()?;
    let logdet = log_sigma2.sum();
    Ok(quad.add(&logdet)?.add_scalar(d as f64 * LN_2PI).scale(-0.5))
}

/// How a Gaussian predictor forms its conditional mean.
#[derive(Clone, Debug)]
pub enum MeanMap {
    /// `μ_t = W z_{t−1}`.
    Linear(Tensor),
    /// `μ_t = z_{t−1} + g(z_{t−1})`.
    ResidualMlp(Mlp),
    /// `μ_t` read from a recurrent state over `z_{<t}`.
    Recurrent(Rnn),
}

/// Gaussian conditional `P(z_t | z_{<t}) = N(μ_t, diag σ²)` with learned
/// `log σ²`. Scores steps `1..T`.
#[derive(Clone, Debug)]
pub struct GaussianPredictor {
    pub mean: MeanMap,
    pub log_sigma2: Tensor,
}

impl GaussianPredictor {
    pub fn new(mean: MeanMap, d: usize, sigma2: f64) -> Self {
        GaussianPredictor {
            mean,
            log_sigma2: Tensor::full(&[d], sigma2.ln()),
        }
    }

    fn mean_params(&self) -> usize {
        match &self.mean {
            MeanMap::Linear(_) => 1,
            MeanMap::ResidualMlp(m) => m.num_params(),
            MeanMap::Recurrent(r) => r.num_params(),
        }
    }

    fn log_probs(&self, p: &[Var], z_seq: &[Var], detach: bool) -> Result<Vec<Var>> {
        let k = self.mean_params();
        let (mp, ls) = (&p[..k], &p[k]);
        let cond: Vec<Var> = if detach {
            z_seq.iter().map(Var::stopgrad).collect()
        } else {
            z_seq.to_vec()
        };
        let means: Vec<Var> = match &self.mean {
            MeanMap::Linear(_) => cond[..cond.len() - 1]
                .iter()
                .map(|z| z.matmul_t(&mp[0]))
                .collect::<Result<_>>()?,
            MeanMap::ResidualMlp(net) => cond[..cond.len() - 1]
                .iter()
                .map(|z| z.add(&net.forward(mp, z)?))
                .collect::<Result<_>>()?,
            MeanMap::Recurrent(rnn) => rnn.forward_recurrent(mp, &cond)?.0.split_off(1),
        };
        means
            .iter()
            .zip(&z_seq[1..])
            .map(|(m, z)| gaussian_rows_logpdf(z, m, ls))
            .collect()
    }
}

impl Module for GaussianPredictor {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = match &self.mean {
            MeanMap::Linear(w) => vec![("mean.w".into(), w)],
            MeanMap::ResidualMlp(m) => m.named_params(),
            MeanMap::Recurrent(r) => r.named_params(),
        };
        v.push(("log_sigma2".into(), &self.log_sigma2));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = match &mut self.mean {
            MeanMap::Linear(w) => vec![w],
            MeanMap::ResidualMlp(m) => m.params_mut(),
            MeanMap::Recurrent(r) => r.params_mut(),
        };
        v.push(&mut self.log_sigma2);
        v
    }

    fn init(&mut self, rng: &mut dyn rand::RngCore, scheme: InitScheme) {
        match &mut self.mean {
            MeanMap::Linear(w) => *w = Tensor::eye(w.rows()),
            MeanMap::ResidualMlp(m) => m.init(rng, scheme),
            MeanMap::Recurrent(r) => r.init(rng, scheme),
        }
    }
}

/// A latent predictor scoring `log P(z_t | z_{<t})`.
#[derive(Clone, Debug)]
pub enum Predictor {
    Kalman(KalmanParams),
    Gaussian(GaussianPredictor),
}

impl Predictor {
    /// Index of the first step that receives a predictive density.
    pub fn first_predicted_step(&self) -> usize {
        match self {
            Predictor::Kalman(_) => 0,
            Predictor::Gaussian(_) => 1,
        }
    }

    /// Per-step log-densities, each `[b]`. With `detach` the conditioning
    /// inputs are passed through `stopgrad`.
    pub fn log_probs(&self, p: &[Var], z_seq: &[Var], noise: Option<&[Var]>, detach: bool) -> Result<Vec<Var>> {
        match self {
            Predictor::Kalman(k) => {
                let src = match noise {
                    Some(xs) => NoiseSource::PerStep(xs),
                    None => NoiseSource::Fixed,
                };
                Ok(k.filter_detached(p, z_seq, src, detach)?.loglik)
            }
            Predictor::Gaussian(g) => g.log_probs(p, z_seq, detach),
        }
    }
}

impl Module for Predictor {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Predictor::Kalman(k) => k.named_params(),
            Predictor::Gaussian(g) => g.named_params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Predictor::Kalman(k) => k.params_mut(),
            Predictor::Gaussian(g) => g.params_mut(),
        }
    }

    fn init(&mut self, rng: &mut dyn rand::RngCore, scheme: InitScheme) {
        match self {
            Predictor::Kalman(k) => k.init(rng, scheme),
            Predictor::Gaussian(g) => g.init(rng, scheme),
        }
    }
}

/// Log-density of a unit-variance source model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceLogPdf {
    #[default]
    Laplace,
    Gaussian,
}

impl SourceLogPdf {
    pub fn eval(self, s: &Var) -> Result<Var> {
        Ok(match self {
            SourceLogPdf::Laplace => s.abs().scale(-std::f64::consts::SQRT_2).add_scalar(-0.5 * 2f64.ln()),
            SourceLogPdf::Gaussian => s.square().scale(-0.5).add_scalar(-0.5 * LN_2PI),
        })
    }
}

/// `−[mean Σᵢ log p((Wx)ᵢ) + ½ log|WWᵀ|]` for square `W` and `x: [b, d]`.
pub fn loss_linear_ica(w: &Var, x: &Var, source: SourceLogPdf) -> Result<LossBreakdown> {
    let (r, c) = match w.shape()[..] {
        [r, c] => (r, c),
        _ => return Err(shape_err("loss_linear_ica", &w.shape(), &[0, 0])),
    };
    if r != c || x.shape().get(1) != Some(&c) {
        return Err(shape_err("loss_linear_ica", &w.shape(), &x.shape()));
    }
    let b = x.shape()[0] as f64;
    let s = x.matmul_t(w)?;
    let alignment = source.eval(&s)?.sum().scale(1.0 / b);
    // ½ log|WWᵀ| = log|det W| for square W
    let (_, logdet) = w.slogdet()?;
    LossBreakdown::assemble(alignment, logdet)
}

/// Pairwise temporal loss for stationary unit-variance AR(1) sources with
/// known lag-one correlations `rho`: the joint model of `(z, z′)` is
/// `N(z; 0, I)·Πᵢ N(z′ᵢ; ρᵢ zᵢ, 1 − ρᵢ²)` and the joint entropy of
/// `(Wx, Wx′)` is `2 log|det W|` up to a constant.
pub fn loss_linear_ica_temporal(w: &Var, x: &Var, x_next: &Var, rho: &[f64]) -> Result<LossBreakdown> {
    let d = w.shape()[0];
    if rho.len() != d || x.shape() != x_next.shape() {
        return Err(shape_err("loss_linear_ica_temporal", &x.shape(), &x_next.shape()));
    }
    if rho.iter().any(|r| !(r.abs() < 1.0)) {
        return Err(LdmError::OutOfRange {
            what: "rho",
            value: rho.iter().fold(0.0_f64, |a, r| a.max(r.abs())),
            reason: "lag-one correlations must lie in (−1, 1)".into(),
        });
    }
    let tape = w.tape();
    let z = x.matmul_t(w)?;
    let zn = x_next.matmul_t(w)?;
    let zeros = tape.constant(Tensor::zeros(&[1, d]));
    let unit = tape.constant(Tensor::zeros(&[d]));
    let rho_row = tape.constant(Tensor::new(vec![1, d], rho.to_vec())?);
    let cond_ls = tape.constant(Tensor::vector(rho.iter().map(|r| (1.0 - r * r).ln()).collect()));
    let prior = gaussian_rows_logpdf(&z, &zeros, &unit)?;
    let trans = gaussian_rows_logpdf(&zn, &z.mul(&rho_row)?, &cond_ls)?;
    let alignment = prior.add(&trans)?.mean();
    let (_, logdet) = w.slogdet()?;
    LossBreakdown::assemble(alignment, logdet.scale(2.0))
}

/// Closed-form `(⟨log P⟩_R, H[R])` for `R = N(m₁, s₁²)`, `P = N(m₂, s₂²)`;
/// their sum is `−KL(R‖P)`.
pub fn gaussian_kl_decomposition(m1: f64, s1: f64, m2: f64, s2: f64) -> (f64, f64) {
    let cross = -0.5 * (LN_2PI + 2.0 * s2.ln()) - (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2);
    let ent = 0.5 * (1.0 + LN_2PI) + s1.ln();
    (cross, ent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, Tape};
    use crate::entropy::{Kernel, LogDetMode, VcWeights};
    use crate::nets::{init_params, Activation, OutputMap};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rows: usize, cols: usize, rng: &mut crate::Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn unit_rows(t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for i in 0..t.rows() {
            let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            for j in 0..t.cols() {
                out.set(i, j, t.get(i, j) / n);
            }
        }
        out
    }

    /// Contrastive loss with in-view negatives, written out directly:
    /// `mean_i [−β zᵢ·z′ᵢ + 2 log((1/(N−1)) Σ_{j≠i} exp(β zᵢ·z_j))]`.
    fn simclr_form(z: &Tensor, zp: &Tensor, beta: f64) -> f64 {
        let n = z.rows();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let pos = beta * dot(z.row(i), zp.row(i));
            let logits: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| beta * dot(z.row(i), z.row(j))).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            total += -pos + 2.0 * (lse - ((n - 1) as f64).ln());
        }
        total / n as f64
    }

    /// Invariance + variance + covariance regularizer:
    /// `λ·MSE + 2(μ·v + ν·c)` with unbiased per-dimension statistics.
    fn vicreg_form(z: &Tensor, zp: &Tensor, lambda: f64, w: VcWeights) -> f64 {
        let (n, d) = (z.rows(), z.cols());
        let mut mse = 0.0;
        for i in 0..n {
            for j in 0..d {
                mse += (z.get(i, j) - zp.get(i, j)).powi(2);
            }
        }
        mse /= (n * d) as f64;
        let mu: Vec<f64> = (0..d).map(|j| (0..n).map(|i| z.get(i, j)).sum::<f64>() / n as f64).collect();
        let mut cov = vec![vec![0.0; d]; d];
        for a in 0..d {
            for b in 0..d {
                cov[a][b] = (0..n).map(|i| (z.get(i, a) - mu[a]) * (z.get(i, b) - mu[b])).sum::<f64>() / (n - 1) as f64;
            }
        }
        let v = (0..d).map(|j| (w.gamma - (cov[j][j] + w.eps).sqrt()).max(0.0)).sum::<f64>() / d as f64;
        let mut c = 0.0;
        for a in 0..d {
            for b in 0..d {
                if a != b {
                    c += cov[a][b] * cov[a][b];
                }
            }
        }
        c /= d as f64;
        lambda * mse + 2.0 * (w.mu * v + w.nu * c)
    }

    #[test]
    fn pair_mi_matches_simclr_form() {
        let mut rng = crate::rng(3);
        let beta = 5.0;
        let obj = Objective::new(
            Flavor::PairMi,
            LatentModel::new(Family::SphereVmf { beta }),
            EntropyEstimator::Kde {
                bandwidth: 1.0 / beta,
                kernel: Kernel::Vmf,
            },
        );
        for _ in 0..5 {
            let z = unit_rows(&gauss(64, 8, &mut rng));
            let zp = unit_rows(&z.add(&gauss(64, 8, &mut rng).scale(0.3)).unwrap());
            let tape = Tape::new();
            let l = obj.loss_pair(&tape.constant(z.clone()), &tape.constant(zp.clone())).unwrap();
            assert!((l.loss.item() - simclr_form(&z, &zp, beta)).abs() < 1e-6);
        }
    }

    #[test]
    fn pair_mi_matches_vicreg_form() {
        let mut rng = crate::rng(4);
        let (d, lambda) = (8, 25.0);
        let w = VcWeights::default();
        let obj = Objective::new(
            Flavor::PairMi,
            LatentModel::new(Family::PlaneGaussian {
                sigma2: d as f64 / (2.0 * lambda),
            }),
            EntropyEstimator::LogDet {
                mode: LogDetMode::VarianceCovariance,
                vc: w,
            },
        );
        for _ in 0..5 {
            let z = gauss(64, d, &mut rng).scale(0.7);
            let zp = z.add(&gauss(64, d, &mut rng).scale(0.2)).unwrap();
            let tape = Tape::new();
            let l = obj.loss_pair(&tape.constant(z.clone()), &tape.constant(zp.clone())).unwrap();
            assert!((l.loss.item() - vicreg_form(&z, &zp, lambda, w)).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_views_have_zero_gaussian_alignment() {
        let mut rng = crate::rng(5);
        let z = gauss(200, 3, &mut rng);
        let tape = Tape::new();
        let zv = tape.constant(z);
        for flavor in [Flavor::PairLdm, Flavor::PairMi] {
            let obj = Objective::new(
                flavor,
                LatentModel::new(Family::PlaneGaussian { sigma2: 1.0 }),
                EntropyEstimator::LogDet {
                    mode: LogDetMode::Exact,
                    vc: VcWeights::default(),
                },
            );
            if flavor == Flavor::PairLdm {
                // duplicated columns make the joint covariance singular
                assert!(obj.loss_pair(&zv, &zv).is_err());
                continue;
            }
            let l = obj.loss_pair(&zv, &zv).unwrap();
            let (loss, a, e) = l.values();
            assert_eq!(a, 0.0);
            assert_eq!(loss, -e);
        }
    }

    #[test]
    fn pair_ldm_uses_joint_entropy() {
        let mut rng = crate::rng(6);
        let z = gauss(300, 2, &mut rng);
        let zp = z.add(&gauss(300, 2, &mut rng).scale(0.5)).unwrap();
        let est = EntropyEstimator::LogDet {
            mode: LogDetMode::Exact,
            vc: VcWeights::default(),
        };
        let obj = Objective::new(Flavor::PairLdm, LatentModel::new(Family::PlaneGaussian { sigma2: 1.0 }), est);
        let tape = Tape::new();
        let (zv, zpv) = (tape.constant(z.clone()), tape.constant(zp.clone()));
        let l = obj.loss_pair(&zv, &zpv).unwrap();
        let joint = est.estimate(&tape.constant(Tensor::hcat(&[&z, &zp]).unwrap())).unwrap();
        assert_eq!(l.entropy_term.item(), joint.item());
        assert_eq!(l.loss.item(), -(l.alignment.item() + l.entropy_term.item()));
    }

    #[test]
    fn categorical_family_uses_analytic_entropies() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let obj = Objective::new(
            Flavor::PairMi,
            LatentModel::new(Family::Categorical { n: 2, beta: 1.0 }),
            EntropyEstimator::default(),
        );
        let l = obj.loss_pair(&p, &p).unwrap();
        assert!((l.entropy_term.item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let obj = Objective { flavor: Flavor::PairLdm, ..obj };
        let l = obj.loss_pair(&p, &p).unwrap();
        assert!((l.entropy_term.item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn validation_rules() {
        let g = LatentModel::new(Family::PlaneGaussian { sigma2: 1.0 });
        let s = LatentModel::new(Family::SphereVmf { beta: 1.0 });
        assert!(Objective::new(Flavor::TemporalStopGrad, s, EntropyEstimator::StopGradPlugin).validate().is_err());
        assert!(Objective::new(Flavor::TemporalStopGrad, g, EntropyEstimator::StopGradPlugin).validate().is_ok());
        assert!(Objective::new(Flavor::PairMi, g, EntropyEstimator::StopGradPlugin).validate().is_err());
    }

    fn residual_predictor(d: usize, seed: u64) -> Predictor {
        let mut g = GaussianPredictor::new(
            MeanMap::ResidualMlp(Mlp::new(&[d, 6, d], Activation::Tanh, OutputMap::Identity)),
            d,
            0.5,
        );
        init_params(&mut g, seed, InitScheme::UniformFanIn);
        Predictor::Gaussian(g)
    }

    fn seq(t_len: usize, b: usize, d: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = crate::rng(seed);
        (0..t_len).map(|_| gauss(b, d, &mut rng)).collect()
    }

    #[test]
    fn perfect_prediction_leaves_only_the_normalizer() {
        let (t_len, b, d, sigma2) = (5, 4, 3, 0.3);
        let w = Tensor::from_rows(&[vec![0.9, 0.1, 0.0], vec![0.0, 0.8, 0.0], vec![0.2, 0.0, 0.7]]).unwrap();
        let pred = Predictor::Gaussian(GaussianPredictor::new(MeanMap::Linear(w.clone()), d, sigma2));
        let mut zs = vec![gauss(b, d, &mut crate::rng(1))];
        for t in 1..t_len {
            zs.push(zs[t - 1].matmul(&w.transpose().unwrap()).unwrap());
        }
        let obj = Objective::new(Flavor::TemporalMi, LatentModel::new(Family::PlaneGaussian { sigma2 }), EntropyEstimator::default());
        let tape = Tape::new();
        let p = pred.bind(&tape);
        let zv: Vec<Var> = zs.into_iter().map(|z| tape.constant(z)).collect();
        let l = obj.loss_temporal(&zv, &pred, &p, None).unwrap();
        let expect = -((t_len - 1) as f64) * (d as f64 / 2.0) * (2.0 * std::f64::consts::PI * sigma2).ln();
        assert!((l.alignment.item() - expect).abs() < 1e-10);
    }

    #[test]
    fn entropy_flavor_changes_only_the_uniformity_term() {
        let pred = residual_predictor(2, 3);
        let zs = seq(6, 20, 2, 4);
        let mut aligns = Vec::new();
        for flavor in [Flavor::TemporalLdm, Flavor::TemporalMi, Flavor::TemporalStopGrad] {
            let est = if flavor == Flavor::TemporalMi {
                EntropyEstimator::default()
            } else {
                EntropyEstimator::StopGradPlugin
            };
            let obj = Objective::new(flavor, LatentModel::new(Family::PlaneGaussian { sigma2: 1.0 }), est);
            let tape = Tape::new();
            let p = pred.bind(&tape);
            let zv: Vec<Var> = zs.iter().map(|z| tape.constant(z.clone())).collect();
            let l = obj.loss_temporal(&zv, &pred, &p, None).unwrap();
            aligns.push(l.alignment.item().to_bits());
        }
        assert!(aligns.iter().all(|&a| a == aligns[0]));
    }

    #[test]
    fn plugin_entropy_equals_negated_alignment_in_value() {
        let pred = residual_predictor(2, 8);
        let zs = seq(5, 10, 2, 9);
        let obj = Objective::new(Flavor::TemporalStopGrad, LatentModel::new(Family::PlaneGaussian { sigma2: 1.0 }), EntropyEstimator::StopGradPlugin);
        let tape = Tape::new();
        let p = pred.bind(&tape);
        let zv: Vec<Var> = zs.iter().map(|z| tape.leaf(z.clone())).collect();
        let l = obj.loss_temporal(&zv, &pred, &p, None).unwrap();
        assert!((l.alignment.item() + l.entropy_term.item()).abs() < 1e-12);
        tape.backward(&l.loss).unwrap();
        // the target path cancels, so the last step only receives its
        // gradient through being a target and gets none
        assert!(zv[4].grad().is_none_or(|g| g.max_abs() < 1e-12));
        assert!(zv[0].grad().unwrap().max_abs() > 1e-6);
        // predictor parameters are trained by the alignment alone
        assert!(p[0].grad().unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn kalman_plugin_detaches_conditioning() {
        let k = KalmanParams::new(2, 2, crate::kalman::ObservationMode::Learned);
        let pred = Predictor::Kalman(k);
        let zs = seq(4, 6, 2, 2);
        let obj = Objective::new(Flavor::TemporalLdm, LatentModel::new(Family::PlaneGaussian { sigma2: 1.0 }), EntropyEstimator::StopGradPlugin);
        let tape = Tape::new();
        let p = pred.bind(&tape);
        let zv: Vec<Var> = zs.iter().map(|z| tape.leaf(z.clone())).collect();
        let l = obj.loss_temporal(&zv, &pred, &p, None).unwrap();
        assert!((l.alignment.item() + l.entropy_term.item()).abs() < 1e-12);
        tape.backward(&l.loss).unwrap();
        assert!(zv[3].grad().is_none_or(|g| g.max_abs() < 1e-12));
        assert!(zv[1].grad().unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn temporal_mi_gradient_matches_finite_differences() {
        let pred = residual_predictor(2, 12);
        let est = EntropyEstimator::LogDet {
            mode: LogDetMode::Exact,
            vc: VcWeights::default(),
        };
        let obj = Objective::new(Flavor::TemporalMi, LatentModel::new(Family::PlaneGaussian { sigma2: 1.0 }), est);
        let np = pred.num_params();
        let mut inputs: Vec<Tensor> = pred.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.extend(seq(4, 8, 2, 13));
        let err = gradcheck(
            |_, v| Ok(obj.loss_temporal(&v[np..], &pred, &v[..np], None)?.loss),
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    /// The surrogate's gradient is the alignment gradient through the
    /// predictor and the conditioning inputs only; checked against finite
    /// differences of a hand-written linear-Gaussian alignment in which the
    /// targets are held fixed.
    #[test]
    fn stopgrad_gradient_flows_through_conditioning_only() {
        let (t_len, b, d) = (4, 5, 2);
        let w0 = Tensor::from_rows(&[vec![0.8, 0.3], vec![-0.2, 0.6]]).unwrap();
        let mut g = GaussianPredictor::new(MeanMap::Linear(w0.clone()), d, 0.7);
        g.log_sigma2 = Tensor::vector(vec![-0.3, 0.4]);
        let ls0 = g.log_sigma2.clone();
        let pred = Predictor::Gaussian(g);
        let zs = seq(t_len, b, d, 31);
        let align = |w: &Tensor, ls: &Tensor, cond: &[Tensor]| -> f64 {
            let mut total = 0.0;
            for t in 1..t_len {
                let mut acc = 0.0;
                for i in 0..b {
                    for j in 0..d {
                        let mu: f64 = (0..d).map(|k| w.get(j, k) * cond[t - 1].get(i, k)).sum();
                        let s2 = ls.data()[j].exp();
                        acc += -0.5 * ((zs[t].get(i, j) - mu).powi(2) / s2 + ls.data()[j] + LN_2PI);
                    }
                }
                total += acc / b as f64;
            }
            total
        };
        let obj = Objective::new(Flavor::TemporalStopGrad, LatentModel::new(Family::PlaneGaussian { sigma2: 1.0 }), EntropyEstimator::StopGradPlugin);
        let tape = Tape::new();
        let p = pred.bind(&tape);
        let zv: Vec<Var> = zs.iter().map(|z| tape.leaf(z.clone())).collect();
        let l = obj.loss_temporal(&zv, &pred, &p, None).unwrap();
        tape.backward(&l.loss).unwrap();
        let eps = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64| (f(eps) - f(-eps)) / (2.0 * eps);
        for k in 0..4 {
            let num = fd(&|e| {
                let mut w = w0.clone();
                w.data_mut()[k] += e;
                -align(&w, &ls0, &zs)
            });
            assert!((p[0].grad().unwrap().data()[k] - num).abs() < 1e-6);
        }
        for k in 0..2 {
            let num = fd(&|e| {
                let mut ls = ls0.clone();
                ls.data_mut()[k] += e;
                -align(&w0, &ls, &zs)
            });
            assert!((p[1].grad().unwrap().data()[k] - num).abs() < 1e-6);
        }
        for t in 0..t_len {
            let got = zv[t].grad().unwrap_or_else(|| Tensor::zeros(&[b, d]));
            for k in 0..b * d {
                let num = fd(&|e| {
                    let mut cond = zs.clone();
                    cond[t].data_mut()[k] += e;
                    -align(&w0, &ls0, &cond)
                });
                assert!((got.data()[k] - num).abs() < 1e-6, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn recurrent_mean_scores_all_but_the_first_step() {
        let head = Mlp::new(&[4, 2], Activation::Tanh, OutputMap::Identity);
        let mut g = GaussianPredictor::new(MeanMap::Recurrent(Rnn::new(2, 4, head)), 2, 1.0);
        init_params(&mut g, 2, InitScheme::UniformFanIn);
        let pred = Predictor::Gaussian(g);
        let tape = Tape::new();
        let p = pred.bind(&tape);
        let zv: Vec<Var> = seq(5, 3, 2, 1).into_iter().map(|z| tape.constant(z)).collect();
        let lp = pred.log_probs(&p, &zv, None, false).unwrap();
        assert_eq!(lp.len(), 4);
        assert_eq!(lp[0].shape(), vec![3]);
    }

    #[test]
    fn linear_ica_examples() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::eye(2).scale(2.0));
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let l = linear_ica_at(&w, &x, SourceLogPdf::Gaussian);
        assert!((l.entropy_term.item() - 4f64.ln()).abs() < 1e-14);
        assert!((l.entropy_term.item() - 0.5 * 16f64.ln()).abs() < 1e-14);

        // identity unmixing of whitened Gaussian data
        let d = 3;
        let x = gauss(100_000, d, &mut crate::rng(1));
        let tape = Tape::new();
        let l = linear_ica_at(&tape.constant(Tensor::eye(d)), &tape.constant(x), SourceLogPdf::Gaussian);
        let target = d as f64 / 2.0 * (1.0 + LN_2PI);
        assert!((l.loss.item() - target).abs() < 0.02, "{}", l.loss.item());
        assert_eq!(l.entropy_term.item(), 0.0);

        let tape = Tape::new();
        let sing = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap());
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(loss_linear_ica(&sing, &x, SourceLogPdf::Laplace).is_err());
    }

    fn linear_ica_at(w: &Var, x: &Var, s: SourceLogPdf) -> LossBreakdown {
        loss_linear_ica(w, x, s).unwrap()
    }

    #[test]
    fn linear_ica_recovers_laplace_sources() {
        let mut rng = crate::rng(21);
        let n = 4000;
        let lap = rand_distr::Exp::new(1.0).unwrap();
        let s: Vec<f64> = (0..2 * n)
            .map(|_| {
                let e: f64 = lap.sample(&mut rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * e / std::f64::consts::SQRT_2
            })
            .collect();
        let s = Tensor::matrix(n, 2, s).unwrap();
        let mix = Tensor::from_rows(&[vec![1.0, 0.6], vec![0.4, 1.0]]).unwrap();
        let x = s.matmul(&mix.transpose().unwrap()).unwrap();
        let mut w = Tensor::from_rows(&[vec![0.9, 0.1], vec![-0.2, 1.1]]).unwrap();
        let mut opt = crate::nets::Adam::new(0.02);
        for _ in 0..1500 {
            let tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let l = loss_linear_ica(&wv, &tape.constant(x.clone()), SourceLogPdf::Laplace).unwrap();
            tape.backward(&l.loss).unwrap();
            let g = wv.grad().unwrap();
            opt.step(vec![&mut w], &[g]);
        }
        let shat = x.matmul(&w.transpose().unwrap()).unwrap();
        for i in 0..2 {
            let best = (0..2).map(|j| corr(&s.col(i), &shat.col(j)).abs()).fold(0.0, f64::max);
            assert!(best > 0.95, "source {i}: {best}");
        }
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn temporal_ica_loss_gradient() {
        let mut rng = crate::rng(2);
        let inputs = vec![
            Tensor::from_rows(&[vec![1.1, 0.2], vec![-0.3, 0.9]]).unwrap(),
            gauss(10, 2, &mut rng),
            gauss(10, 2, &mut rng),
        ];
        let err = gradcheck(|_, v| Ok(loss_linear_ica_temporal(&v[0], &v[1], &v[2], &[0.9, 0.3])?.loss), &inputs, 1e-6).unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn kl_decomposition_matches_closed_form() {
        let kl = |m1: f64, s1: f64, m2: f64, s2: f64| (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5;
        let (a, h) = gaussian_kl_decomposition(0.3, 1.2, -0.5, 0.7);
        assert!((a + h + kl(0.3, 1.2, -0.5, 0.7)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_affine_invariant(m1 in -3.0..3.0f64, s1 in 0.1..3.0f64, m2 in -3.0..3.0f64, s2 in 0.1..3.0f64,
                                  a in prop_oneof![-4.0..-0.25f64, 0.25..4.0f64], b in -3.0..3.0f64) {
            let (al, h) = gaussian_kl_decomposition(m1, s1, m2, s2);
            let (al2, h2) = gaussian_kl_decomposition(a * m1 + b, a.abs() * s1, a * m2 + b, a.abs() * s2);
            prop_assert!(((al + h) - (al2 + h2)).abs() < 1e-10);
            prop_assert!((al2 - (al - a.abs().ln())).abs() < 1e-10);
            prop_assert!((h2 - (h + a.abs().ln())).abs() < 1e-10);
        }

        #[test]
        fn pair_losses_decompose_additively(seed in 0u64..200) {
            let mut rng = crate::rng(seed);
            let z = gauss(32, 3, &mut rng);
            let zp = z.add(&gauss(32, 3, &mut rng).scale(0.1)).unwrap();
            for flavor in [Flavor::PairLdm, Flavor::PairMi] {
                let obj = Objective::new(flavor, LatentModel::new(Family::PlaneGaussian { sigma2: 0.5 }), EntropyEstimator::default());
                let tape = Tape::new();
                let l = obj.loss_pair(&tape.constant(z.clone()), &tape.constant(zp.clone())).unwrap();
                let (loss, a, e) = l.values();
                prop_assert_eq!(loss, -(a + e));
            }
        }
    }
}
