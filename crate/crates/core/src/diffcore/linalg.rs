//! Dense factorizations used by the tape ops and by the evaluation code.

use nalgebra::DMatrix;

use super::Tensor;
use crate::error::{LdmError, Result};

/// Pivots with magnitude below this are treated as exact zeros.
pub const PIVOT_TOL: f64 = 1e-12;

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    parity: f64,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Lu> {
        let n = a.require_square("lu")?;
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut parity = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in (k + 1)..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best >= PIVOT_TOL) {
                return Err(LdmError::SingularMatrix { pivot: best });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                parity = -parity;
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu {
            n,
            lu,
            perm,
            parity,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `(sign, log|det|)`.
    pub fn slogdet(&self) -> (f64, f64) {
        let mut sign = self.parity;
        let mut logabs = 0.0;
        for i in 0..self.n {
            let d = self.lu[i * self.n + i];
            if d < 0.0 {
                sign = -sign;
            }
            logabs += d.abs().ln();
        }
        (sign, logabs)
    }

    /// Solves `A X = B` for `B` of shape `n x m` (or a length-`n` vector).
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.n;
        let m = match b.shape() {
            [r] if *r == n => 1,
            [r, c] if *r == n => *c,
            s => return Err(crate::error::shape_err("solve", &[n, n], s)),
        };
        let bd = b.data();
        let mut x = vec![0.0; n * m];
        for i in 0..n {
            let src = self.perm[i];
            x[i * m..(i + 1) * m].copy_from_slice(&bd[src * m..(src + 1) * m]);
        }
        // forward substitution with unit-diagonal L
        for i in 0..n {
            for k in 0..i {
                let l = self.lu[i * n + k];
                if l != 0.0 {
                    for j in 0..m {
                        x[i * m + j] -= l * x[k * m + j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let u = self.lu[i * n + k];
                if u != 0.0 {
                    for j in 0..m {
                        x[i * m + j] -= u * x[k * m + j];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                x[i * m + j] /= d;
            }
        }
        Tensor::new(b.shape().to_vec(), x)
    }

    /// Solves `Aᵀ X = B`.
    pub fn solve_transpose(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.n;
        let m = match b.shape() {
            [r] if *r == n => 1,
            [r, c] if *r == n => *c,
            s => return Err(crate::error::shape_err("solve_transpose", &[n, n], s)),
        };
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ y = b, Lᵀ w = y, x = Pᵀ w.
        let mut y = b.data().to_vec();
        for i in 0..n {
            for k in 0..i {
                let u = self.lu[k * n + i];
                if u != 0.0 {
                    for j in 0..m {
                        y[i * m + j] -= u * y[k * m + j];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for j in 0..m {
                y[i * m + j] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let l = self.lu[k * n + i];
                if l != 0.0 {
                    for j in 0..m {
                        y[i * m + j] -= l * y[k * m + j];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * m];
        for i in 0..n {
            let dst = self.perm[i];
            x[dst * m..(dst + 1) * m].copy_from_slice(&y[i * m..(i + 1) * m]);
        }
        Tensor::new(b.shape().to_vec(), x)
    }

    pub fn inverse(&self) -> Result<Tensor> {
        self.solve(&Tensor::eye(self.n))
    }
}

/// `(sign, log|det A|)` through a pivoted LU factorization.
pub fn slogdet(a: &Tensor) -> Result<(f64, f64)> {
    Ok(Lu::factor(a)?.slogdet())
}

/// Solves `A X = B`.
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Lu::factor(a)?.solve(b)
}

pub(crate) fn to_nalgebra(a: &Tensor) -> DMatrix<f64> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    DMatrix::from_row_slice(r, c, a.data())
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::matrix(r, c, data).expect("shape matches")
}

/// Eigen-decomposition of a symmetric matrix: eigenvalues in descending order
/// and the matching eigenvectors as columns.
pub fn sym_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.require_square("sym_eigen")?;
    let mut m = to_nalgebra(a);
    // enforce exact symmetry before handing over
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Tensor::zeros(&[n, n]);
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vecs.set(r, col, eig.eigenvectors[(r, i)]);
        }
    }
    Ok((values, vecs))
}

/// Singular values in descending order.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    a.require_matrix("singular_values")?;
    let m = to_nalgebra(a);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    a.require_square("cholesky")?;
    let m = to_nalgebra(a);
    let c = m
        .cholesky()
        .ok_or(LdmError::RankDeficient { min_eigenvalue: 0.0 })?;
    Ok(from_nalgebra(&c.l()))
}

/// Symmetric inverse square root `A^{-1/2}` of an SPD matrix.
pub fn inv_sqrt_spd(a: &Tensor) -> Result<Tensor> {
    let (vals, vecs) = sym_eigen(a)?;
    let n = vals.len();
    if let Some(&min) = vals.last() {
        if min <= 0.0 {
            return Err(LdmError::RankDeficient { min_eigenvalue: min });
        }
    }
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for (k, &l) in vals.iter().enumerate() {
                s += vecs.get(i, k) * vecs.get(j, k) / l.sqrt();
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slogdet_examples() {
        let (s, l) = slogdet(&Tensor::eye(3)).unwrap();
        assert_eq!((s, l), (1.0, 0.0));
        let (s, l) = slogdet(&Tensor::diag(&[2.0, 3.0])).unwrap();
        assert_eq!(s, 1.0);
        assert!((l - 6f64.ln()).abs() < 1e-15);
        // 2x2 cofactor expansion: det = 1 - 0.01
        let a = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.1, 1.0]]).unwrap();
        let (s, l) = slogdet(&a).unwrap();
        assert_eq!(s, 1.0);
        assert!((l - 0.99f64.ln()).abs() < 1e-14);
        assert!((l + 0.01005).abs() < 1e-5);
    }

    #[test]
    fn negative_determinant_has_negative_sign() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (s, l) = slogdet(&a).unwrap();
        assert_eq!(s, -1.0);
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(slogdet(&a), Err(LdmError::SingularMatrix { .. })));
        assert!(matches!(
            solve(&a, &Tensor::eye(2)),
            Err(LdmError::SingularMatrix { .. })
        ));
    }

    #[test]
    fn solve_examples() {
        let b = Tensor::from_rows(&[vec![3.0, 1.0], vec![-2.0, 5.0]]).unwrap();
        assert_eq!(solve(&Tensor::eye(2), &b).unwrap(), b);
        let x = solve(
            &Tensor::diag(&[2.0, 4.0]),
            &Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(x.data(), &[1.0, 1.0]);
    }

    #[test]
    fn transpose_solve_matches_explicit_transpose() {
        let a = Tensor::from_rows(&[
            vec![0.2, 1.0, 3.0],
            vec![4.0, -1.0, 0.5],
            vec![1.0, 2.0, 2.0],
        ])
        .unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![-1.0, 3.0]]).unwrap();
        let lu = Lu::factor(&a).unwrap();
        let x1 = lu.solve_transpose(&b).unwrap();
        let x2 = solve(&a.transpose().unwrap(), &b).unwrap();
        for (p, q) in x1.data().iter().zip(x2.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_sqrt_whitens() {
        let a = Tensor::from_rows(&[vec![4.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let w = inv_sqrt_spd(&a).unwrap();
        let r = w.matmul(&a).unwrap().matmul(&w).unwrap();
        let i = Tensor::eye(2);
        for (p, q) in r.data().iter().zip(i.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
