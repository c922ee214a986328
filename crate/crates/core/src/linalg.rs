//! Dense linear algebra at desk scale (d <= a few hundred).
//!
//! Plain f64 routines used outside the autodiff tape: pivoted LU for the
//! Jacobian solves behind the log map, a cyclic Jacobi eigensolver for
//! symmetric matrices, singular values through the Gram matrix, and power
//! iteration for operator norms.

use crate::error::{Error, Result};
use crate::tensor::{dgemm_rowmajor, Tensor};

/// `a @ b` for 2-d tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    dgemm_rowmajor(m, k, n, a.data(), b.data(), false, &mut out);
    Tensor::from_shape(m, n, out)
}

/// `a @ x` for a 2-d tensor and a vector.
pub fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = (a.rows(), a.cols());
    if k != x.len() {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            lhs: a.shape().to_vec(),
            rhs: vec![x.len()],
        });
    }
    let mut out = vec![0.0; m];
    for i in 0..m {
        let row = a.row(i);
        out[i] = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
    Ok(out)
}

/// `a^T @ x`.
pub fn matvec_t(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = (a.rows(), a.cols());
    if m != x.len() {
        return Err(Error::ShapeMismatch {
            op: "matvec_t",
            lhs: a.shape().to_vec(),
            rhs: vec![x.len()],
        });
    }
    let mut out = vec![0.0; k];
    for i in 0..m {
        let row = a.row(i);
        for j in 0..k {
            out[j] += row[j] * x[i];
        }
    }
    Ok(out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_shape(n, m, out).expect("transpose shape")
}

/// Solve `M x = b` (or `M^T x = b`) for triangular `M` stored dense.
pub fn tri_solve(
    m: &[f64],
    d: usize,
    b: &[f64],
    lower: bool,
    unit_diag: bool,
    transpose: bool,
) -> Vec<f64> {
    let mut x = b.to_vec();
    // Transposing flips the triangle orientation.
    let effective_lower = lower != transpose;
    let at = |i: usize, j: usize| -> f64 {
        if transpose {
            m[j * d + i]
        } else {
            m[i * d + j]
        }
    };
    if effective_lower {
        for i in 0..d {
            let mut s = x[i];
            for j in 0..i {
                s -= at(i, j) * x[j];
            }
            x[i] = if unit_diag { s } else { s / at(i, i) };
        }
    } else {
        for i in (0..d).rev() {
            let mut s = x[i];
            for j in (i + 1)..d {
                s -= at(i, j) * x[j];
            }
            x[i] = if unit_diag { s } else { s / at(i, i) };
        }
    }
    x
}

/// Dense inverse of a triangular matrix.
pub fn tri_inverse(m: &[f64], d: usize, lower: bool, unit_diag: bool) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for k in 0..d {
        e[k] = 1.0;
        let col = tri_solve(m, d, &e, lower, unit_diag, false);
        for i in 0..d {
            inv[i * d + k] = col[i];
        }
        e[k] = 0.0;
    }
    inv
}

/// Pivoted LU factorization of a square matrix.
#[derive(Debug, Clone)]
pub struct LuFactors {
    lu: Vec<f64>,
    piv: Vec<usize>,
    d: usize,
}

pub fn lu_factor(a: &Tensor) -> Result<LuFactors> {
    let d = a.rows();
    if a.cols() != d {
        return Err(Error::invalid("lu_factor", format!("matrix not square: {:?}", a.shape())));
    }
    let mut lu = a.data().to_vec();
    let mut piv: Vec<usize> = (0..d).collect();
    for k in 0..d {
        let mut p = k;
        let mut best = lu[k * d + k].abs();
        for i in (k + 1)..d {
            let v = lu[i * d + k].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < 1e-300 {
            return Err(Error::Singular { op: "lu_factor", pivot: best, index: k });
        }
        if p != k {
            for j in 0..d {
                lu.swap(k * d + j, p * d + j);
            }
            piv.swap(k, p);
        }
        let pivot = lu[k * d + k];
        for i in (k + 1)..d {
            let f = lu[i * d + k] / pivot;
            lu[i * d + k] = f;
            for j in (k + 1)..d {
                lu[i * d + j] -= f * lu[k * d + j];
            }
        }
    }
    Ok(LuFactors { lu, piv, d })
}

impl LuFactors {
    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut x = vec![0.0; d];
        for i in 0..d {
            x[i] = b[self.piv[i]];
        }
        // L y = Pb (unit lower), then U x = y.
        for i in 0..d {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * d + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..d).rev() {
            let mut s = x[i];
            for j in (i + 1)..d {
                s -= self.lu[i * d + j] * x[j];
            }
            x[i] = s / self.lu[i * d + i];
        }
        x
    }

    /// Solve `A^T x = b` using the same factors (`A = P^T L U`).
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let d = self.d;
        // A^T = U^T L^T P, so solve U^T y = b, L^T z = y, x = P^T z.
        let mut y = b.to_vec();
        for i in 0..d {
            let mut s = y[i];
            for j in 0..i {
                s -= self.lu[j * d + i] * y[j];
            }
            y[i] = s / self.lu[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for j in (i + 1)..d {
                s -= self.lu[j * d + i] * y[j];
            }
            y[i] = s;
        }
        let mut x = vec![0.0; d];
        for i in 0..d {
            x[self.piv[i]] = y[i];
        }
        x
    }

    pub fn inverse(&self) -> Tensor {
        let d = self.d;
        let mut inv = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for k in 0..d {
            e[k] = 1.0;
            let col = self.solve(&e);
            for i in 0..d {
                inv[i * d + k] = col[i];
            }
            e[k] = 0.0;
        }
        Tensor::from_shape(d, d, inv).expect("inverse shape")
    }

    /// log |det A| from the U diagonal.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.d).map(|i| self.lu[i * self.d + i].abs().ln()).sum()
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and eigenvectors as the columns
/// of the returned matrix, with a deterministic sign convention: the first
/// component of each eigenvector exceeding `1e-12` in magnitude is positive.
pub fn sym_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let d = a.rows();
    if a.cols() != d {
        return Err(Error::invalid("sym_eigen", format!("matrix not square: {:?}", a.shape())));
    }
    let mut m = a.data().to_vec();
    let mut v = Tensor::eye(d).into_data();
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[i * d + j] * m[i * d + j];
            }
        }
        if off.sqrt() < 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut pairs: Vec<(f64, usize)> = (0..d).map(|i| (m[i * d + i], i)).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite eigenvalues"));

    let mut vals = Vec::with_capacity(d);
    let mut vecs = vec![0.0; d * d];
    for (col, (val, src)) in pairs.iter().enumerate() {
        vals.push(*val);
        let mut sign = 1.0;
        for k in 0..d {
            let x = v[k * d + src];
            if x.abs() > 1e-12 {
                sign = x.signum();
                break;
            }
        }
        for k in 0..d {
            vecs[k * d + col] = sign * v[k * d + src];
        }
    }
    Ok((vals, Tensor::from_shape(d, d, vecs)?))
}

/// Singular values of a (possibly rectangular) matrix, descending.
///
/// Computed from the smaller Gram matrix; values below roundoff are clamped
/// to zero before the square root.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = (a.rows(), a.cols());
    let gram = if m >= n {
        // A^T A, n x n
        let at = transpose(a);
        matmul(&at, a)?
    } else {
        let at = transpose(a);
        matmul(a, &at)?
    };
    let (vals, _) = sym_eigen(&gram)?;
    Ok(vals.iter().map(|v| v.max(0.0).sqrt()).collect())
}

/// Largest eigenvalue of a symmetric PSD operator given as a matvec closure.
///
/// Deterministic: starts from a fixed pseudo-random unit vector.
pub fn power_iteration<F>(dim: usize, iters: usize, tol: f64, mut op: F) -> f64
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut v: Vec<f64> = (0..dim)
        .map(|i| {
            let x = (i as f64 + 1.0) * 0.734_912_6;
            (x.sin() + 0.01).abs() + 0.1
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);

    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = op(&v);
        let new_lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn < 1e-300 {
            return 0.0;
        }
        v = w.iter().map(|x| x / wn).collect();
        if (new_lambda - lambda).abs() <= tol * new_lambda.abs().max(1.0) {
            return new_lambda;
        }
        lambda = new_lambda;
    }
    lambda
}
