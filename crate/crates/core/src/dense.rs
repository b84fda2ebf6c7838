//! Dense covariance reference operations.
//!
//! Joseph-form EKF steps used both as the oracle the square-root paths are
//! checked against and as the dense estimator column of the simulation
//! study matrix.

use crate::error::KernelError;
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::tri;

/// P' = Phi P Phi^T + W, with `phi` applied to the leading block.
pub fn propagate_cov<T: Scalar>(p: &Mat<T>, phi: &Mat<T>, w: &Mat<T>) -> Mat<T> {
    let n = p.rows();
    let d = phi.rows();
    assert!(d <= n && phi.cols() == d && w.rows() == n && w.cols() == n);
    let mut phi_full = Mat::identity(n);
    phi_full.set_block(0, 0, phi);
    phi_full.mul(p).mul_tr(&phi_full).add(w).symmetrize()
}

/// Joseph-form measurement update with independent per-row noise.
/// Returns (posterior covariance, state correction).
pub fn joseph_update<T: Scalar>(
    p: &Mat<T>,
    h: &Mat<T>,
    residual: &[T],
    sigmas: &[T],
) -> Result<(Mat<T>, Vec<T>), KernelError> {
    let n = p.rows();
    let m = h.rows();
    assert_eq!(h.cols(), n);
    assert_eq!(residual.len(), m);
    assert_eq!(sigmas.len(), m);
    let pht = p.mul_tr(h);
    let mut s = h.mul(&pht).symmetrize();
    for i in 0..m {
        s[(i, i)] = s[(i, i)] + sigmas[i] * sigmas[i];
    }
    // K = P H^T S^{-1}  (solve S K^T = H P)
    let kt = tri::solve_spd(&s, &pht.transpose())?;
    let k = kt.transpose();
    let ikh = Mat::identity(n).sub(&k.mul(h));
    let mut krk = Mat::zeros(n, n);
    for r in 0..m {
        let col = k.col(r);
        let w = sigmas[r] * sigmas[r];
        for i in 0..n {
            for j in 0..n {
                krk[(i, j)] = krk[(i, j)] + col[i] * w * col[j];
            }
        }
    }
    let p_new = ikh.mul(p).mul_tr(&ikh).add(&krk).symmetrize();
    let dx = k.mul_vec(residual);
    Ok((p_new, dx))
}

/// Marginal covariance: delete the given row/column index set.
pub fn marginal_cov<T: Scalar>(p: &Mat<T>, drop: &[usize]) -> Mat<T> {
    p.remove_rows(drop).remove_cols(drop)
}

/// Stochastic-cloning augmentation: duplicate the block `src..src+len`
/// after position `at`.
pub fn clone_cov<T: Scalar>(p: &Mat<T>, src: usize, len: usize, at: usize) -> Mat<T> {
    let n = p.rows();
    let mut sel = Mat::zeros(n + len, n);
    for i in 0..at {
        sel[(i, i)] = T::one();
    }
    for i in 0..len {
        sel[(at + i, src + i)] = T::one();
    }
    for i in at..n {
        sel[(i + len, i)] = T::one();
    }
    sel.mul(p).mul_tr(&sel)
}
