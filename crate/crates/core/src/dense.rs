//! Small dense helpers on top of `faer`.

use faer::{Mat, Side};

use crate::error::{Error, Result};

/// Solves the symmetric-definite pencil `A x = θ B x`.
///
/// Returns ascending eigenvalues and `B`-orthonormal eigenvectors. `B` is
/// reduced through its own eigendecomposition, which is accurate for the
/// well-conditioned Gram matrices that appear here.
pub fn sym_gen_eig(a: &Mat<f64>, b: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.nrows(),
        });
    }
    let b = symmetrize(b);
    let evd = b
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let q = evd.U();
    let smax = (0..n).map(|i| s[i]).fold(0.0, f64::max);
    if (0..n).any(|i| s[i] <= 1e-14 * smax) {
        return Err(Error::Eigen("right-hand form is not positive definite".into()));
    }
    let scaled = Mat::from_fn(n, n, |r, c| q[(r, c)] / s[c].sqrt());
    let c = scaled.transpose() * a * &scaled;
    let c = symmetrize(&c);
    let evd = c
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let vals = evd.S().column_vector().iter().copied().collect();
    let vecs = &scaled * evd.U();
    Ok((vals, vecs))
}

pub fn symmetrize(a: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

/// Orthonormal basis of `{x : Cᵀ x = 0}` from a full Householder QR of `C`.
pub fn null_space_qr(c: &Mat<f64>) -> Result<Mat<f64>> {
    let (n, k) = (c.nrows(), c.ncols());
    if k >= n {
        return Err(Error::InvalidParameter(format!(
            "{k} constraints leave no freedom in dimension {n}"
        )));
    }
    if k == 0 {
        return Ok(Mat::identity(n, n));
    }
    let q = c.qr().compute_Q();
    let r = c.qr().R().to_owned();
    check_rank(&r, k)?;
    Ok(q.get(0..n, k..n).to_owned())
}

fn check_rank(r: &Mat<f64>, k: usize) -> Result<()> {
    let rmax = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-12 * rmax) || rmax == 0.0 {
        return Err(Error::InvalidParameter("constraints are rank deficient".into()));
    }
    Ok(())
}

/// Orthonormal basis of the same null space from the unit eigenvectors of
/// the complementary orthogonal projector `I − C (CᵀC)⁻¹ Cᵀ`.
pub fn null_space_projector(c: &Mat<f64>) -> Result<Mat<f64>> {
    let (n, k) = (c.nrows(), c.ncols());
    if k >= n {
        return Err(Error::InvalidParameter(format!(
            "{k} constraints leave no freedom in dimension {n}"
        )));
    }
    if k == 0 {
        return Ok(Mat::identity(n, n));
    }
    let ctc = c.transpose() * c;
    let lu = ctc.partial_piv_lu();
    use faer::prelude::Solve;
    let sol = lu.solve(c.transpose());
    let p = Mat::<f64>::identity(n, n) - c * &sol;
    let evd = symmetrize(&p)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    // eigenvalues are k zeros followed by n − k ones
    if (s[k] - 1.0).abs() > 1e-8 || s[k - 1].abs() > 1e-8 {
        return Err(Error::InvalidParameter("constraints are rank deficient".into()));
    }
    Ok(evd.U().get(0..n, k..n).to_owned())
}

pub fn max_abs(a: &Mat<f64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].abs());
        }
    }
    m
}

/// Converts a node-vector slice into a column matrix.
pub fn col(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn to_vec(m: &Mat<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generalized_pencil() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { 2.0 + i as f64 } else { 0.5 });
        let b = Mat::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.25 });
        let (vals, vecs) = sym_gen_eig(&a, &b).unwrap();
        for k in 0..3 {
            let x = vecs.get(0..3, k..k + 1).to_owned();
            let r = &a * &x - (&b * &x) * faer::Scale(vals[k]);
            assert!(max_abs(&r) < 1e-12);
        }
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2]);
    }

    #[test]
    fn null_spaces_agree() {
        let c = Mat::from_fn(6, 2, |i, j| ((i + 3 * j) % 4) as f64 + 0.5 * j as f64);
        for z in [null_space_qr(&c).unwrap(), null_space_projector(&c).unwrap()] {
            assert_eq!(z.ncols(), 4);
            assert!(max_abs(&(c.transpose() * &z)) < 1e-12);
            let ztz = z.transpose() * &z - Mat::<f64>::identity(4, 4);
            assert!(max_abs(&ztz) < 1e-12);
        }
        let dup = Mat::from_fn(5, 2, |i, _| i as f64);
        assert!(null_space_qr(&dup).is_err());
    }
}
