//! Small dense solvers for normal equations.

use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return dim_err(format!("cholesky needs a square matrix, got {:?}", a.shape()));
    }
    let n = a.rows();
    let mut l = Tensor::zeros(&[n, n]);
    let ld = l.data_mut();
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            d -= ld[j * n + k] * ld[j * n + k];
        }
        if !(d > S::zero()) || !d.is_finite() {
            return Err(Error::Numeric(format!(
                "matrix is not positive definite (pivot {j} = {d})"
            )));
        }
        let djj = d.sqrt();
        ld[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= ld[i * n + k] * ld[j * n + k];
            }
            ld[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `a x = b` for symmetric positive definite `a` and matrix `b`.
pub fn solve_spd<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let l = cholesky(a)?;
    let n = l.rows();
    if b.rank() != 2 || b.rows() != n {
        return dim_err(format!("right-hand side {:?} for system of size {n}", b.shape()));
    }
    let m = b.cols();
    let mut x = b.detached();
    let ld = l.data();
    let xd = x.data_mut();
    for c in 0..m {
        for i in 0..n {
            let mut s = xd[i * m + c];
            for k in 0..i {
                s -= ld[i * n + k] * xd[k * m + c];
            }
            xd[i * m + c] = s / ld[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = xd[i * m + c];
            for k in i + 1..n {
                s -= ld[k * n + i] * xd[k * m + c];
            }
            xd[i * m + c] = s / ld[i * n + i];
        }
    }
    Ok(x)
}

/// `x^T x`.
pub fn gram<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    x.transpose()?.matmul(x)
}
