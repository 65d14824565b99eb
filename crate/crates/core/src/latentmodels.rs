//! Conditional latent families and their alignment terms `⟨log P(z, z′)⟩`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::diffcore::{BackwardFn, Tensor, Var};
use crate::error::{shape_err, LdmError, Result};

const NORM_TOL: f64 = 1e-6;
const SIMPLEX_TOL: f64 = 1e-6;
/// Floor applied to simplex coordinates before taking logs.
pub const SIMPLEX_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    PlaneGaussian { sigma2: f64 },
    SphereVmf { beta: f64 },
    SimplexDirichlet { tau: f64 },
    Categorical { n: usize, beta: f64 },
    EmpiricalPriorVmf { tau: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    Flat,
    UniformSphere,
    UniformSimplex,
    UniformCategorical,
    Empirical,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentModel {
    pub family: Family,
    pub prior: Prior,
}

impl LatentModel {
    /// Pairs a family with its natural prior.
    pub fn new(family: Family) -> Self {
        let prior = match family {
            Family::PlaneGaussian { .. } => Prior::Flat,
            Family::SphereVmf { .. } => Prior::UniformSphere,
            Family::SimplexDirichlet { .. } => Prior::UniformSimplex,
            Family::Categorical { .. } => Prior::UniformCategorical,
            Family::EmpiricalPriorVmf { .. } => Prior::Empirical,
        };
        LatentModel { family, prior }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LdmError::OutOfRange {
                    what,
                    value: v,
                    reason: "must be > 0".into(),
                })
            }
        };
        match self.family {
            Family::PlaneGaussian { sigma2 } => positive("sigma2", sigma2),
            Family::SphereVmf { beta } => positive("beta", beta),
            Family::SimplexDirichlet { tau } | Family::EmpiricalPriorVmf { tau } => {
                positive("tau", tau)
            }
            Family::Categorical { n, beta } => {
                if n < 2 {
                    return Err(LdmError::OutOfRange {
                        what: "n",
                        value: n as f64,
                        reason: "must be >= 2".into(),
                    });
                }
                positive("beta", beta)
            }
        }
    }

    /// The alignment term for paired latents.
    pub fn alignment(&self, z: &Var, zp: &Var) -> Result<Var> {
        match self.family {
            Family::PlaneGaussian { sigma2 } => alignment_plane_gaussian(z, zp, sigma2),
            Family::SphereVmf { beta } | Family::EmpiricalPriorVmf { tau: beta } => {
                alignment_sphere_vmf(z, zp, beta)
            }
            Family::SimplexDirichlet { tau } => alignment_simplex_dirichlet(z, zp, tau),
            Family::Categorical { beta, .. } => alignment_categorical(z, zp, beta),
        }
    }
}

fn same_shape(op: &'static str, z: &Var, zp: &Var) -> Result<usize> {
    let (a, b) = (z.shape(), zp.shape());
    if a != b || a.len() != 2 {
        return Err(shape_err(op, &a, &b));
    }
    Ok(a[0])
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let norm = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(LdmError::NotNormalized { row: i, norm });
        }
    }
    Ok(())
}

fn check_simplex_rows(t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let row = t.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&x| x < 0.0) {
            return Err(LdmError::NotOnSimplex { row: i, sum });
        }
    }
    Ok(())
}

/// `−(1/2σ²)·mean‖z − z′‖²`.
pub fn alignment_plane_gaussian(z: &Var, zp: &Var, sigma2: f64) -> Result<Var> {
    let b = same_shape("alignment_plane_gaussian", z, zp)?;
    Ok(z.sub(zp)?.square().sum().scale(-0.5 / (sigma2 * b as f64)))
}

/// `β·mean(zᵢᵀz′ᵢ)` for unit-norm rows.
pub fn alignment_sphere_vmf(z: &Var, zp: &Var, beta: f64) -> Result<Var> {
    let b = same_shape("alignment_sphere_vmf", z, zp)?;
    check_unit_rows(&z.value())?;
    check_unit_rows(&zp.value())?;
    Ok(z.mul(zp)?.sum().scale(beta / b as f64))
}

/// Elementwise `log Γ(x)`.
pub fn ln_gamma_var(x: &Var) -> Result<Var> {
    let v = x.value();
    if v.data().iter().any(|&a| !(a > 0.0)) {
        return Err(LdmError::DomainError {
            op: "ln_gamma",
            msg: "argument must be strictly positive".into(),
        });
    }
    let bw: BackwardFn = Box::new(|ctx| {
        let x = ctx.inputs[0];
        let data = x
            .data()
            .iter()
            .zip(ctx.grad.data())
            .map(|(&a, &g)| g * digamma(a))
            .collect();
        vec![Some(Tensor::new(x.shape().to_vec(), data).expect("shape"))]
    });
    Ok(x.tape().custom(&[x], v.map(ln_gamma), bw))
}

/// `mean_i [τ·zᵢᵀ log z′ᵢ − Σ_k log Γ(τ z_ik + 1)]`, with `z′` floored at
/// [`SIMPLEX_FLOOR`] before the log.
pub fn alignment_simplex_dirichlet(z: &Var, zp: &Var, tau: f64) -> Result<Var> {
    let b = same_shape("alignment_simplex_dirichlet", z, zp)?;
    check_simplex_rows(&z.value())?;
    check_simplex_rows(&zp.value())?;
    let cross = z.mul(&zp.clamp_min(SIMPLEX_FLOOR).log()?)?.sum().scale(tau);
    let norm = ln_gamma_var(&z.scale(tau).add_scalar(1.0))?.sum();
    Ok(cross.sub(&norm)?.scale(1.0 / b as f64))
}

/// `β·mean(Σ_k p_k p′_k)`.
pub fn alignment_categorical(p: &Var, pp: &Var, beta: f64) -> Result<Var> {
    let b = same_shape("alignment_categorical", p, pp)?;
    check_simplex_rows(&p.value())?;
    check_simplex_rows(&pp.value())?;
    Ok(p.mul(pp)?.sum().scale(beta / b as f64))
}

/// `β = log(p(n−1)/(1−p))`, the inverse of [`beta_to_matching_prob`].
pub fn matching_prob_to_beta(p: f64, n: usize) -> Result<f64> {
    let lo = 1.0 / n as f64;
    if n < 2 || !(p >= lo && p < 1.0) {
        return Err(LdmError::OutOfRange {
            what: "p_theta",
            value: p,
            reason: format!("must lie in [1/n, 1) with n = {n}"),
        });
    }
    Ok((p * (n as f64 - 1.0) / (1.0 - p)).ln())
}

/// Probability that two related samples share a category, `e^β/(e^β + n − 1)`.
pub fn beta_to_matching_prob(beta: f64, n: usize) -> f64 {
    1.0 / (1.0 + (n as f64 - 1.0) * (-beta).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, Tape};
    use proptest::prelude::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn eval2(f: impl Fn(&Var, &Var) -> Result<Var>, a: Tensor, b: Tensor) -> Result<f64> {
        let t = Tape::new();
        Ok(f(&t.constant(a), &t.constant(b))?.item())
    }

    #[test]
    fn plane_gaussian_examples() {
        let z = m(&[vec![0.3, -1.0], vec![2.0, 0.5]]);
        assert_eq!(eval2(|a, b| alignment_plane_gaussian(a, b, 1.0), z.clone(), z).unwrap(), 0.0);
        let v = eval2(
            |a, b| alignment_plane_gaussian(a, b, 0.5),
            m(&[vec![0.0, 0.0]]),
            m(&[vec![1.0, 0.0]]),
        )
        .unwrap();
        assert_eq!(v, -1.0);
        let w = eval2(
            |a, b| alignment_plane_gaussian(a, b, 1.0),
            m(&[vec![0.0, 0.0]]),
            m(&[vec![1.0, 0.0]]),
        )
        .unwrap();
        assert_eq!(w, 0.5 * v);
        assert!(eval2(
            |a, b| alignment_plane_gaussian(a, b, 1.0),
            m(&[vec![0.0, 0.0]]),
            m(&[vec![1.0, 0.0, 1.0]])
        )
        .is_err());
    }

    #[test]
    fn sphere_vmf_examples() {
        let z = m(&[vec![0.6, 0.8]]);
        let f = |beta| move |a: &Var, b: &Var| alignment_sphere_vmf(a, b, beta);
        assert!((eval2(f(2.0), z.clone(), z.clone()).unwrap() - 2.0).abs() < 1e-15);
        assert!((eval2(f(1.0), z.clone(), z.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        assert!(eval2(f(1.0), z.clone(), m(&[vec![-0.8, 0.6]])).unwrap().abs() < 1e-15);
        assert!(matches!(
            eval2(f(1.0), z, m(&[vec![1.0, 1.0]])),
            Err(LdmError::NotNormalized { .. })
        ));
    }

    #[test]
    fn simplex_examples() {
        let z = m(&[vec![0.2, 0.3, 0.5]]);
        let zp = m(&[vec![0.1, 0.6, 0.3]]);
        let v = eval2(|a, b| alignment_simplex_dirichlet(a, b, 0.0), z, zp).unwrap();
        assert!(v.abs() < 1e-12, "{v}");

        // one-hot z, uniform z′ over K = 4, τ = 3: 3·log(1/4) − log(3!)
        let z = m(&[vec![0.0, 1.0, 0.0, 0.0]]);
        let zp = m(&[vec![0.25; 4]]);
        let v = eval2(|a, b| alignment_simplex_dirichlet(a, b, 3.0), z, zp).unwrap();
        assert!((v - (3.0 * 0.25f64.ln() - 6f64.ln())).abs() < 1e-10);

        assert!(matches!(
            eval2(
                |a, b| alignment_simplex_dirichlet(a, b, 1.0),
                m(&[vec![0.5, 0.6]]),
                m(&[vec![0.5, 0.5]])
            ),
            Err(LdmError::NotOnSimplex { .. })
        ));
    }

    #[test]
    fn simplex_decreases_as_mass_leaves_support() {
        let z = m(&[vec![0.7, 0.3, 0.0]]);
        let away = [0.0, 0.0, 1.0];
        let mut last = f64::INFINITY;
        for s in [0.0, 0.2, 0.4, 0.6, 0.8, 0.95] {
            let zp: Vec<f64> = z.row(0).iter().zip(away).map(|(a, b)| (1.0 - s) * a + s * b).collect();
            let v = eval2(|a, b| alignment_simplex_dirichlet(a, b, 2.0), z.clone(), m(&[zp])).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn categorical_examples() {
        let f = |a: &Var, b: &Var| alignment_categorical(a, b, 3.0);
        let one = m(&[vec![0.0, 1.0, 0.0]]);
        assert_eq!(eval2(f, one.clone(), one.clone()).unwrap(), 3.0);
        assert_eq!(eval2(f, one, m(&[vec![1.0, 0.0, 0.0]])).unwrap(), 0.0);
        let u = m(&[vec![0.25; 4]]);
        assert!((eval2(f, u.clone(), u).unwrap() - 0.75).abs() < 1e-15);
    }

    fn inverse_by_bisection(p: f64, n: usize) -> f64 {
        let (mut lo, mut hi) = (-50.0_f64, 50.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let q = mid.exp() / (mid.exp() + n as f64 - 1.0);
            if q < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn matching_probability_examples() {
        assert_eq!(matching_prob_to_beta(0.1, 10).unwrap(), 0.0);
        let b = matching_prob_to_beta(0.99, 10).unwrap();
        assert!((b - inverse_by_bisection(0.99, 10)).abs() < 1e-9);
        assert!((b - 891f64.ln()).abs() < 1e-12);
        assert!((b - 6.792).abs() < 1e-3);
        let b = matching_prob_to_beta(0.8, 10).unwrap();
        assert!((b - inverse_by_bisection(0.8, 10)).abs() < 1e-9);
        assert!((b - 3.584).abs() < 1e-3);
        assert!(matching_prob_to_beta(1.0, 10).is_err());
        assert!(matching_prob_to_beta(0.05, 10).is_err());
    }

    #[test]
    fn validate_rejects_bad_parameters() {
        assert!(LatentModel::new(Family::PlaneGaussian { sigma2: -1.0 }).validate().is_err());
        assert!(LatentModel::new(Family::Categorical { n: 1, beta: 1.0 }).validate().is_err());
        assert!(LatentModel::new(Family::SphereVmf { beta: 2.0 }).validate().is_ok());
        assert_eq!(LatentModel::new(Family::SphereVmf { beta: 2.0 }).prior, Prior::UniformSphere);
    }

    fn unit_rows(x: &[f64], d: usize) -> Tensor {
        let mut t = Tensor::matrix(x.len() / d, d, x.to_vec()).unwrap();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn beta_round_trip(n in 2usize..50, u in 0.0f64..0.999) {
            let lo = 1.0 / n as f64;
            let p = lo + u * (0.999 - lo);
            let b = matching_prob_to_beta(p, n).unwrap();
            prop_assert!((beta_to_matching_prob(b, n) - p).abs() < 1e-12);
        }

        #[test]
        fn maximized_at_identity(
            x in prop::collection::vec(0.2f64..2.0, 6),
            dir in prop::collection::vec(-1.0f64..1.0, 6),
            eps in 1e-3f64..0.1,
        ) {
            let z = Tensor::matrix(2, 3, x.clone()).unwrap();
            let pert = z.add(&Tensor::matrix(2, 3, dir.clone()).unwrap().scale(eps)).unwrap();
            let at = eval2(|a, b| alignment_plane_gaussian(a, b, 0.7), z.clone(), z.clone()).unwrap();
            let off = eval2(|a, b| alignment_plane_gaussian(a, b, 0.7), z.clone(), pert).unwrap();
            prop_assert!(off <= at);

            let zs = unit_rows(&x, 3);
            let ps = unit_rows(&x.iter().zip(&dir).map(|(a, d)| a + eps * d).collect::<Vec<_>>(), 3);
            let at = eval2(|a, b| alignment_sphere_vmf(a, b, 2.0), zs.clone(), zs.clone()).unwrap();
            let off = eval2(|a, b| alignment_sphere_vmf(a, b, 2.0), zs, ps).unwrap();
            prop_assert!(off <= at + 1e-15);
        }

        #[test]
        fn alignment_gradients(x in prop::collection::vec(0.1f64..1.0, 12)) {
            let a = Tensor::matrix(3, 4, x[..12].to_vec()).unwrap();
            let b = a.map(|v| (v * 3.1).sin());
            let err = gradcheck(|_, xs| alignment_plane_gaussian(&xs[0], &xs[1], 0.4), &[a.clone(), b.clone()], 1e-5).unwrap();
            prop_assert!(err < 1e-4);
            // normalization and softmax happen upstream of the alignment on the tape
            let err = gradcheck(
                |_, xs| alignment_sphere_vmf(&xs[0].l2_normalize_rows()?, &xs[1].l2_normalize_rows()?, 1.5),
                &[a.clone(), b.clone()],
                1e-5,
            ).unwrap();
            prop_assert!(err < 1e-4);
            let err = gradcheck(
                |_, xs| alignment_simplex_dirichlet(&xs[0].softmax_rows()?, &xs[1].softmax_rows()?, 2.5),
                &[a.clone(), b.clone()],
                1e-5,
            ).unwrap();
            prop_assert!(err < 1e-4);
            let err = gradcheck(
                |_, xs| alignment_categorical(&xs[0].softmax_rows()?, &xs[1].softmax_rows()?, 2.0),
                &[a, b],
                1e-5,
            ).unwrap();
            prop_assert!(err < 1e-4);
        }
    }
}
