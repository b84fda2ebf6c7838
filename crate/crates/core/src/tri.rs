//! Dense triangular factorization kernels.
//!
//! Everything the filter stack factorizes goes through here: Householder
//! QR without forming Q, the exchange-permuted Cholesky that produces a
//! lower-triangular F with C = F^T F, the permuted QR used for nullspace
//! splits, triangular solves, and a 3x3 symmetric eigensolver.
//!
//! Conventions enforced on every factor:
//! - triangular zeros are written explicitly, never assumed;
//! - diagonals are made non-negative by row or column sign flips so factors
//!   are deterministic and comparable across update backends.

use crate::error::KernelError;
use crate::flops;
use crate::geom::{M3, V3};
use crate::mat::{dot, Mat};
use crate::scalar::Scalar;

/// Upper-triangular square factor, non-negative diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct UpperTri<T: Scalar> {
    mat: Mat<T>,
}

impl<T: Scalar> UpperTri<T> {
    pub fn identity(n: usize) -> Self {
        UpperTri { mat: Mat::identity(n) }
    }

    /// Wrap a matrix that is already upper triangular (debug-checked).
    pub fn from_mat(mat: Mat<T>) -> Self {
        debug_assert_eq!(mat.rows(), mat.cols());
        debug_assert!(mat.is_upper_triangular());
        UpperTri { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn mat(&self) -> &Mat<T> {
        &self.mat
    }

    pub fn into_mat(self) -> Mat<T> {
        self.mat
    }
}

/// Lower-triangular square factor, strictly positive diagonal on success.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTri<T: Scalar> {
    mat: Mat<T>,
}

impl<T: Scalar> LowerTri<T> {
    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn mat(&self) -> &Mat<T> {
        &self.mat
    }

    pub fn into_mat(self) -> Mat<T> {
        self.mat
    }
}

/// Thin-QR triangularization of a stacked matrix (rows >= cols). Returns R
/// with R^T R = A^T A; the orthogonal factor is never materialized.
/// Rank-deficient input yields zero diagonal entries.
pub fn qr_triangularize<T: Scalar>(stacked: &Mat<T>) -> UpperTri<T> {
    let p = stacked.rows();
    let n = stacked.cols();
    assert!(p >= n, "qr_triangularize needs rows >= cols ({p} < {n})");
    let mut a = stacked.clone();
    let mut v = vec![T::zero(); p];
    for k in 0..n {
        let len = p - k;
        let mut sigma2 = T::zero();
        for i in k..p {
            let x = a[(i, k)];
            sigma2 = sigma2 + x * x;
        }
        flops::add_fma(len as u64);
        let sigma = sigma2.sqrt();
        if sigma == T::zero() {
            continue;
        }
        let akk = a[(k, k)];
        let alpha = if akk >= T::zero() { -sigma } else { sigma };
        v[k] = akk - alpha;
        for i in k + 1..p {
            v[i] = a[(i, k)];
        }
        let vtv = sigma2 - akk * alpha - akk * alpha + alpha * alpha;
        // vtv = |x|^2 - 2 x0 alpha + alpha^2
        if vtv == T::zero() {
            continue;
        }
        let beta = T::of(2.0) / vtv;
        a[(k, k)] = alpha;
        for i in k + 1..p {
            a[(i, k)] = T::zero();
        }
        for j in k + 1..n {
            let mut w = T::zero();
            for i in k..p {
                w = w + v[i] * a[(i, j)];
            }
            let bw = beta * w;
            for i in k..p {
                a[(i, j)] = a[(i, j)] - bw * v[i];
            }
        }
        flops::add_fma(2 * (len as u64) * ((n - k - 1) as u64));
    }
    let mut r = Mat::zeros(n, n);
    for i in 0..n {
        let flip = a[(i, i)] < T::zero();
        for j in i..n {
            r[(i, j)] = if flip { -a[(i, j)] } else { a[(i, j)] };
        }
    }
    UpperTri { mat: r }
}

/// Householder triangularization of an arbitrary block (rows may be fewer
/// than columns): returns the same-shape upper-trapezoid factor with
/// non-negative leading diagonal and R^T R = A^T A.
pub fn triangularize_block<T: Scalar>(a_in: &Mat<T>) -> Mat<T> {
    let p = a_in.rows();
    let n = a_in.cols();
    let steps = p.min(n);
    let mut a = a_in.clone();
    let mut v = vec![T::zero(); p];
    for k in 0..steps {
        let mut sigma2 = T::zero();
        for i in k..p {
            let x = a[(i, k)];
            sigma2 = sigma2 + x * x;
        }
        let sigma = sigma2.sqrt();
        if sigma == T::zero() {
            continue;
        }
        let akk = a[(k, k)];
        let alpha = if akk >= T::zero() { -sigma } else { sigma };
        v[k] = akk - alpha;
        for i in k + 1..p {
            v[i] = a[(i, k)];
        }
        let vtv = sigma2 - akk * alpha - akk * alpha + alpha * alpha;
        if vtv == T::zero() {
            continue;
        }
        let beta = T::of(2.0) / vtv;
        a[(k, k)] = alpha;
        for i in k + 1..p {
            a[(i, k)] = T::zero();
        }
        for j in k + 1..n {
            let mut w = T::zero();
            for i in k..p {
                w = w + v[i] * a[(i, j)];
            }
            let bw = beta * w;
            for i in k..p {
                a[(i, j)] = a[(i, j)] - bw * v[i];
            }
        }
        flops::add_fma(2 * ((p - k) as u64) * ((n - k - 1) as u64));
    }
    for i in 0..steps {
        if a[(i, i)] < T::zero() {
            for j in i..n {
                a[(i, j)] = -a[(i, j)];
            }
        }
    }
    a
}

/// Lower-triangular F with C = F^T F, realized by a standard Cholesky of
/// the exchange-permuted matrix. Fails when a pivot drops below
/// `tol * max(diag C)`.
pub fn reverse_cholesky_tol<T: Scalar>(c: &Mat<T>, tol: T) -> Result<LowerTri<T>, KernelError> {
    let n = c.rows();
    if c.cols() != n {
        return Err(KernelError::DimensionMismatch(format!("{}x{}", c.rows(), c.cols())));
    }
    let mut max_diag = T::zero();
    for i in 0..n {
        max_diag = max_diag.max(c[(i, i)].abs());
    }
    let floor = tol * max_diag;
    // Cholesky of the row/col reversed matrix: index r(i) = n-1-i.
    let r = |i: usize| n - 1 - i;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = c[(r(j), r(j))];
        let lrow_j = l.row(j).to_vec();
        d = d - dot(&lrow_j[..j], &lrow_j[..j]);
        if d <= floor || !d.is_finite() {
            return Err(KernelError::NotPositiveDefinite {
                pivot: d.f64(),
                tol: floor.f64(),
                index: r(j),
            });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let s = c[(r(i), r(j))] - dot(&l.row(i)[..j], &lrow_j[..j]);
            l[(i, j)] = s / ljj;
        }
        flops::add_fma(((n - j) * j + n - j) as u64);
    }
    // F = E L^T E
    let mut f = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            f[(i, j)] = l[(r(j), r(i))];
        }
    }
    Ok(LowerTri { mat: f })
}

pub fn reverse_cholesky<T: Scalar>(c: &Mat<T>) -> Result<LowerTri<T>, KernelError> {
    reverse_cholesky_tol(c, T::of(T::PIVOT_TOL))
}

/// Standard lower Cholesky, C = L L^T.
pub fn cholesky_lower<T: Scalar>(c: &Mat<T>) -> Result<LowerTri<T>, KernelError> {
    let n = c.rows();
    if c.cols() != n {
        return Err(KernelError::DimensionMismatch(format!("{}x{}", c.rows(), c.cols())));
    }
    let mut max_diag = T::zero();
    for i in 0..n {
        max_diag = max_diag.max(c[(i, i)].abs());
    }
    let floor = T::of(T::PIVOT_TOL) * max_diag;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let lrow_j = l.row(j).to_vec();
        let d = c[(j, j)] - dot(&lrow_j[..j], &lrow_j[..j]);
        if d <= floor || !d.is_finite() {
            return Err(KernelError::NotPositiveDefinite {
                pivot: d.f64(),
                tol: floor.f64(),
                index: j,
            });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let s = c[(i, j)] - dot(&l.row(i)[..j], &lrow_j[..j]);
            l[(i, j)] = s / ljj;
        }
        flops::add_fma(((n - j) * j + n - j) as u64);
    }
    Ok(LowerTri { mat: l })
}

/// Result of the permuted QR split of a tall full-column-rank matrix H:
/// `[q1 q2]^T H = [0; j]` with `j` lower triangular, `q1` an orthonormal
/// basis of the left nullspace and `q2` of the range.
#[derive(Clone, Debug)]
pub struct PqrSplit<T: Scalar> {
    pub q1: Mat<T>,
    pub q2: Mat<T>,
    pub j: Mat<T>,
}

/// Permuted QR realized by row-and-column reversal around a standard
/// Householder QR with accumulated Q.
pub fn permuted_qr_lower<T: Scalar>(h: &Mat<T>) -> Result<PqrSplit<T>, KernelError> {
    let p = h.rows();
    let q = h.cols();
    assert!(p >= q, "permuted_qr_lower needs rows >= cols");
    // reversed copy
    let mut a = Mat::from_fn(p, q, |i, j| h[(p - 1 - i, q - 1 - j)]);
    let mut qmat = Mat::identity(p);
    let mut v = vec![T::zero(); p];
    for k in 0..q {
        let mut sigma2 = T::zero();
        for i in k..p {
            let x = a[(i, k)];
            sigma2 = sigma2 + x * x;
        }
        let sigma = sigma2.sqrt();
        if sigma == T::zero() {
            continue;
        }
        let akk = a[(k, k)];
        let alpha = if akk >= T::zero() { -sigma } else { sigma };
        v[k] = akk - alpha;
        for i in k + 1..p {
            v[i] = a[(i, k)];
        }
        let vtv = sigma2 - akk * alpha - akk * alpha + alpha * alpha;
        if vtv == T::zero() {
            continue;
        }
        let beta = T::of(2.0) / vtv;
        a[(k, k)] = alpha;
        for i in k + 1..p {
            a[(i, k)] = T::zero();
        }
        for j in k + 1..q {
            let mut w = T::zero();
            for i in k..p {
                w = w + v[i] * a[(i, j)];
            }
            let bw = beta * w;
            for i in k..p {
                a[(i, j)] = a[(i, j)] - bw * v[i];
            }
        }
        // accumulate Q <- Q * H_k
        for row in 0..p {
            let qrow: &mut [T] = qmat.row_mut(row);
            let mut w = T::zero();
            for i in k..p {
                w = w + qrow[i] * v[i];
            }
            let bw = beta * w;
            for i in k..p {
                qrow[i] = qrow[i] - bw * v[i];
            }
        }
        flops::add_fma((2 * (p - k) * (q - k - 1) + 2 * p * (p - k)) as u64);
    }
    // map back: H = (E Q E) [0; E R E]
    let tol = T::of(T::PIVOT_TOL) * h.norm_fro().max(T::of(1e-300));
    let mut j = Mat::zeros(q, q);
    for i in 0..q {
        for c in 0..=i {
            j[(i, c)] = a[(q - 1 - i, q - 1 - c)];
        }
    }
    let mut qrev = Mat::from_fn(p, p, |i, c| qmat[(p - 1 - i, p - 1 - c)]);
    // non-negative diagonal of J via paired sign flips
    for i in 0..q {
        if j[(i, i)] < T::zero() {
            for c in 0..=i {
                j[(i, c)] = -j[(i, c)];
            }
            let qcol = p - q + i;
            for r in 0..p {
                qrev[(r, qcol)] = -qrev[(r, qcol)];
            }
        }
        if j[(i, i)].abs() < tol {
            return Err(KernelError::RankDeficient {
                value: j[(i, i)].f64(),
                tol: tol.f64(),
                index: i,
            });
        }
    }
    let q1 = qrev.block(0, 0, p, p - q);
    let q2 = qrev.block(0, p - q, p, q);
    Ok(PqrSplit { q1, q2, j })
}

/// Solve U X = B for upper-triangular U by back substitution.
pub fn solve_upper<T: Scalar>(u: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>, KernelError> {
    let n = u.rows();
    if u.cols() != n || b.rows() != n {
        return Err(KernelError::DimensionMismatch(format!(
            "U {}x{}, B {}x{}",
            u.rows(),
            u.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut max_diag = T::zero();
    for i in 0..n {
        max_diag = max_diag.max(u[(i, i)].abs());
    }
    let floor = T::of(T::PIVOT_TOL) * max_diag;
    for i in 0..n {
        if u[(i, i)].abs() <= floor {
            return Err(KernelError::SingularFactor { index: i });
        }
    }
    let mut x = b.clone();
    let m = b.cols();
    for i in (0..n).rev() {
        let inv = T::one() / u[(i, i)];
        for c in 0..m {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s = s - u[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s * inv;
        }
    }
    flops::add_fma((n * n / 2 * m) as u64);
    Ok(x)
}

/// Solve L X = B for lower-triangular L by forward substitution.
pub fn solve_lower<T: Scalar>(l: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>, KernelError> {
    let n = l.rows();
    if l.cols() != n || b.rows() != n {
        return Err(KernelError::DimensionMismatch("solve_lower".into()));
    }
    let mut x = b.clone();
    let m = b.cols();
    for i in 0..n {
        let d = l[(i, i)];
        if d == T::zero() {
            return Err(KernelError::SingularFactor { index: i });
        }
        let inv = T::one() / d;
        for c in 0..m {
            let mut s = x[(i, c)];
            for k in 0..i {
                s = s - l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s * inv;
        }
    }
    flops::add_fma((n * n / 2 * m) as u64);
    Ok(x)
}

/// Solve the SPD system C X = B through a Cholesky factorization.
pub fn solve_spd<T: Scalar>(c: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>, KernelError> {
    let l = cholesky_lower(c)?;
    let y = solve_lower(l.mat(), b)?;
    solve_upper(&l.mat().transpose(), &y)
}

pub fn inverse_spd<T: Scalar>(c: &Mat<T>) -> Result<Mat<T>, KernelError> {
    solve_spd(c, &Mat::identity(c.rows()))
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi sweeps.
/// Returns (eigenvalues ascending, matching unit eigenvectors).
pub fn eig3_symmetric<T: Scalar>(m: M3<T>) -> ([T; 3], [V3<T>; 3]) {
    let mut a = m;
    let mut v = M3::<T>::identity();
    for _ in 0..64 {
        let off = (a.0[0][1] * a.0[0][1] + a.0[0][2] * a.0[0][2] + a.0[1][2] * a.0[1][2]).sqrt();
        let scale = a.max_abs();
        if off.f64() <= T::EPS * scale.f64().max(1e-300) {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a.0[p][q];
            if apq == T::zero() {
                continue;
            }
            let theta = (a.0[q][q] - a.0[p][p]) / (T::of(2.0) * apq);
            let t = {
                let s = if theta >= T::zero() { T::one() } else { -T::one() };
                s / (theta.abs() + (T::one() + theta * theta).sqrt())
            };
            let c = T::one() / (T::one() + t * t).sqrt();
            let s = t * c;
            // rotate rows/cols p,q of A and columns of V
            let mut rot = M3::<T>::identity();
            rot.0[p][p] = c;
            rot.0[q][q] = c;
            rot.0[p][q] = s;
            rot.0[q][p] = -s;
            a = rot.transpose().mul(a).mul(rot);
            a.0[p][q] = T::zero();
            a.0[q][p] = T::zero();
            v = v.mul(rot);
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a.0[i][i].partial_cmp(&a.0[j][j]).unwrap());
    let vals = [a.0[order[0]][order[0]], a.0[order[1]][order[1]], a.0[order[2]][order[2]]];
    let vecs = [
        V3::new(v.0[0][order[0]], v.0[1][order[0]], v.0[2][order[0]]).normalized(),
        V3::new(v.0[0][order[1]], v.0[1][order[1]], v.0[2][order[1]]).normalized(),
        V3::new(v.0[0][order[2]], v.0[1][order[2]], v.0[2][order[2]]).normalized(),
    ];
    (vals, vecs)
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// sweeps: returns eigenvalues ascending and the matching eigenvectors as
/// matrix columns.
pub fn eig_symmetric<T: Scalar>(m: &Mat<T>) -> (Vec<T>, Mat<T>) {
    let n = m.rows();
    assert_eq!(m.cols(), n);
    let mut a = m.clone();
    let mut v = Mat::<T>::identity(n);
    for _ in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off = off + a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt().f64() <= T::EPS * a.max_abs().f64().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::of(2.0) * apq);
                let t = {
                    let s = if theta >= T::zero() { T::one() } else { -T::one() };
                    s / (theta.abs() + (T::one() + theta * theta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap());
    let vals: Vec<T> = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// 2-norm condition number estimate of a triangular factor via power
/// iteration on R^T R applications and triangular-solve inverse iteration;
/// avoids forming the squared-condition Gram matrix.
pub fn cond_triangular<T: Scalar>(r: &Mat<T>, upper: bool) -> f64 {
    let n = r.rows();
    if n == 0 {
        return 1.0;
    }
    let mut x: Vec<T> = (0..n).map(|i| T::of(1.0 + (i as f64) * 0.019)).collect();
    let mut smax = 0.0f64;
    for _ in 0..24 {
        let y = r.mul_vec(&x);
        let z = r.tr_mul_vec(&y);
        let nrm = crate::mat::norm2(&z);
        if nrm == T::zero() {
            return f64::INFINITY;
        }
        smax = nrm.f64().sqrt();
        x = crate::mat::scale_vec(&z, T::one() / nrm);
    }
    let solve = |b: &Mat<T>| -> Result<Mat<T>, crate::error::KernelError> {
        if upper {
            solve_upper(r, b)
        } else {
            solve_lower(r, b)
        }
    };
    let solve_t = |b: &Mat<T>| -> Result<Mat<T>, crate::error::KernelError> {
        if upper {
            solve_lower(&r.transpose(), b)
        } else {
            solve_upper(&r.transpose(), b)
        }
    };
    let mut z: Vec<T> = (0..n).map(|i| T::of(1.0 - (i as f64) * 0.017)).collect();
    let mut sinv = 0.0f64;
    for _ in 0..24 {
        let y1 = match solve_t(&Mat::col_vec(&z)) {
            Ok(m) => m,
            Err(_) => return f64::INFINITY,
        };
        let y2 = match solve(&y1) {
            Ok(m) => m,
            Err(_) => return f64::INFINITY,
        };
        let y: Vec<T> = (0..n).map(|i| y2[(i, 0)]).collect();
        let nrm = crate::mat::norm2(&y);
        if nrm == T::zero() || !nrm.f64().is_finite() {
            return f64::INFINITY;
        }
        sinv = nrm.f64().sqrt();
        z = crate::mat::scale_vec(&y, T::one() / nrm);
    }
    (smax * sinv).max(1.0)
}

/// 2-norm condition number estimate of a symmetric positive-definite matrix
/// via power iteration on C and on C^{-1} (through its Cholesky factor).
pub fn cond_spd<T: Scalar>(c: &Mat<T>) -> f64 {
    let n = c.rows();
    if n == 0 {
        return 1.0;
    }
    let l = match cholesky_lower(c) {
        Ok(l) => l,
        Err(_) => return f64::INFINITY,
    };
    let mut x: Vec<T> = (0..n).map(|i| T::of(1.0 + (i as f64) * 0.013)).collect();
    let mut lmax = T::one();
    for _ in 0..24 {
        let y = c.mul_vec(&x);
        let nrm = crate::mat::norm2(&y);
        if nrm == T::zero() {
            return f64::INFINITY;
        }
        lmax = nrm;
        x = crate::mat::scale_vec(&y, T::one() / nrm);
    }
    let mut z: Vec<T> = (0..n).map(|i| T::of(1.0 - (i as f64) * 0.017)).collect();
    let mut linv = T::one();
    let lt = l.mat().transpose();
    for _ in 0..24 {
        let y1 = solve_lower(l.mat(), &Mat::col_vec(&z)).unwrap();
        let y2 = solve_upper(&lt, &y1).unwrap();
        let y: Vec<T> = (0..n).map(|i| y2[(i, 0)]).collect();
        let nrm = crate::mat::norm2(&y);
        if nrm == T::zero() {
            return f64::INFINITY;
        }
        linv = nrm;
        z = crate::mat::scale_vec(&y, T::one() / nrm);
    }
    (lmax.f64() * linv.f64()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rng(seed: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(seed)
    }

    fn random_mat(r: usize, c: usize, rng: &mut impl Rng) -> Mat<f64> {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn qr_identity_stack() {
        let a = Mat::<f64>::identity(3).vstack(&Mat::zeros(3, 3));
        let r = qr_triangularize(&a);
        assert!(r.mat().rel_err(&Mat::identity(3)) < 1e-14);
    }

    #[test]
    fn qr_doubled_identity() {
        let a = Mat::<f64>::identity(2).vstack(&Mat::identity(2));
        let r = qr_triangularize(&a);
        let expect = Mat::identity(2).scale(2.0f64.sqrt());
        assert!(r.mat().rel_err(&expect) < 1e-14);
    }

    #[test]
    fn qr_gram_oracle_random() {
        let mut g = rng(7);
        for _ in 0..20 {
            let a = random_mat(9, 4, &mut g);
            let r = qr_triangularize(&a);
            let gram = a.tr_mul(&a);
            let rtr = r.mat().tr_mul(r.mat());
            assert!(rtr.rel_err(&gram) < 1e-12);
            assert!(r.mat().is_upper_triangular());
            for i in 0..4 {
                assert!(r.mat()[(i, i)] >= 0.0);
            }
        }
    }

    #[test]
    fn qr_rank_deficient_gives_zero_diag() {
        let mut a = Mat::<f64>::zeros(5, 3);
        for i in 0..5 {
            a[(i, 0)] = 1.0 + i as f64;
            a[(i, 2)] = 2.0 * (1.0 + i as f64); // col2 = 2*col0, col1 = 0
        }
        let r = qr_triangularize(&a);
        assert!(r.mat()[(1, 1)].abs() < 1e-12);
        let gram = a.tr_mul(&a);
        assert!(r.mat().tr_mul(r.mat()).rel_err(&gram) < 1e-12);
    }

    #[test]
    fn reverse_cholesky_identity_and_diagonal() {
        let f = reverse_cholesky(&Mat::<f64>::identity(4)).unwrap();
        assert!(f.mat().rel_err(&Mat::identity(4)) < 1e-15);
        let c = Mat::<f64>::identity(2).scale(2.0);
        let f = reverse_cholesky(&c).unwrap();
        assert!(f.mat().rel_err(&Mat::identity(2).scale(2.0f64.sqrt())) < 1e-15);
    }

    #[test]
    fn reverse_cholesky_reconstructs() {
        let mut g = rng(13);
        for _ in 0..20 {
            let a = random_mat(8, 8, &mut g);
            let c = a.tr_mul(&a).add(&Mat::identity(8).scale(0.5)).symmetrize();
            let f = reverse_cholesky(&c).unwrap();
            let rec = f.mat().tr_mul(f.mat());
            assert!(rec.rel_err(&c) < 1e-12, "rel {}", rec.rel_err(&c));
            // F strictly lower triangular with positive diagonal
            for i in 0..8 {
                assert!(f.mat()[(i, i)] > 0.0);
                for j in i + 1..8 {
                    assert_eq!(f.mat()[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn reverse_cholesky_rejects_indefinite() {
        let mut c = Mat::<f64>::identity(3);
        c[(2, 2)] = -1.0;
        assert!(matches!(
            reverse_cholesky(&c),
            Err(KernelError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn qr_and_reverse_cholesky_consistent_up_to_reversal() {
        // reverse_cholesky(A^T A) == E * qr_triangularize(A * E) * E
        let mut g = rng(40);
        let n = 8;
        let a = random_mat(n, n, &mut g).add(&Mat::identity(n).scale(3.0));
        let c = a.tr_mul(&a).symmetrize();
        let f = reverse_cholesky(&c).unwrap();
        let ae = Mat::from_fn(n, n, |i, j| a[(i, n - 1 - j)]);
        let r = qr_triangularize(&ae);
        let f_from_qr = Mat::from_fn(n, n, |i, j| r.mat()[(n - 1 - i, n - 1 - j)]);
        assert!(f.mat().rel_err(&f_from_qr) < 1e-10);
    }

    #[test]
    fn pqr_structured_case() {
        // H = [0_{1x2}; I_2]: J = I after sign fix, Q1 = +-e_1
        let mut h = Mat::<f64>::zeros(3, 2);
        h[(1, 0)] = 1.0;
        h[(2, 1)] = 1.0;
        let s = permuted_qr_lower(&h).unwrap();
        assert!(s.j.rel_err(&Mat::identity(2)) < 1e-14);
        assert!((s.q1[(0, 0)].abs() - 1.0).abs() < 1e-14);
        assert!(s.q1[(1, 0)].abs() < 1e-14);
        assert!(s.q1[(2, 0)].abs() < 1e-14);
    }

    #[test]
    fn pqr_gram_oracle() {
        // H = [I2; I2] -> J = sqrt(2) I (lower with diag sqrt 2)
        let h = Mat::<f64>::identity(2).vstack(&Mat::identity(2));
        let s = permuted_qr_lower(&h).unwrap();
        assert!(s.j.rel_err(&Mat::identity(2).scale(2.0f64.sqrt())) < 1e-14);
        // random full-rank: Q1^T H = 0, J^T J = H^T H
        let mut g = rng(99);
        for _ in 0..20 {
            let h = random_mat(6, 3, &mut g);
            let s = permuted_qr_lower(&h).unwrap();
            assert!(s.q1.tr_mul(&h).max_abs() < 1e-13);
            assert!(s.j.tr_mul(&s.j).rel_err(&h.tr_mul(&h)) < 1e-12);
            // orthonormality of [Q1 Q2]
            let q = s.q1.hstack(&s.q2);
            assert!(q.tr_mul(&q).rel_err(&Mat::identity(6)) < 1e-13);
            // J lower triangular, non-negative diagonal
            for i in 0..3 {
                assert!(s.j[(i, i)] >= 0.0);
                for j in i + 1..3 {
                    assert_eq!(s.j[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn pqr_rank_deficient_detected() {
        let mut h = Mat::<f64>::zeros(6, 3);
        for i in 0..6 {
            h[(i, 0)] = (i + 1) as f64;
            h[(i, 1)] = 2.0 * (i + 1) as f64;
            h[(i, 2)] = (i as f64).sin();
        }
        assert!(matches!(permuted_qr_lower(&h), Err(KernelError::RankDeficient { .. })));
    }

    #[test]
    fn nullspace_purity_both_precisions() {
        let mut g = rng(123);
        for _ in 0..10 {
            let h64 = random_mat(8, 3, &mut g);
            let s = permuted_qr_lower(&h64).unwrap();
            let bound = 100.0 * f64::EPSILON * h64.norm_fro();
            assert!(s.q1.tr_mul(&h64).max_abs() < bound);

            let h32 = h64.map(|x| x as f32);
            let s32 = permuted_qr_lower(&h32).unwrap();
            let bound32 = 100.0 * f32::EPSILON * h32.norm_fro();
            assert!(s32.q1.tr_mul(&h32).max_abs() < bound32);
        }
    }

    #[test]
    fn solve_upper_cases() {
        let b: Mat<f64> = Mat::from_rows(&[&[3.0], &[1.0]]);
        let u = Mat::from_rows(&[&[2.0, 1.0], &[0.0, 1.0]]);
        let x = solve_upper(&u, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((x[(1, 0)] - 1.0).abs() < 1e-15);

        let mut g = rng(5);
        let a = random_mat(6, 6, &mut g);
        let u = qr_triangularize(&a.add(&Mat::identity(6).scale(4.0))).into_mat();
        let b = random_mat(6, 4, &mut g);
        let x = solve_upper(&u, &b).unwrap();
        assert!(u.mul(&x).rel_err(&b) < 1e-12);

        let mut sing = u.clone();
        sing[(3, 3)] = 0.0;
        assert!(matches!(solve_upper(&sing, &b), Err(KernelError::SingularFactor { index: 3 })));
    }

    #[test]
    fn eig3_cases() {
        let mut d = M3::<f64>::zero();
        d.0[0][0] = 0.0;
        d.0[1][1] = 1.0;
        d.0[2][2] = 2.0;
        let (vals, vecs) = eig3_symmetric(d);
        assert!((vals[0] - 0.0).abs() < 1e-14);
        assert!((vals[1] - 1.0).abs() < 1e-14);
        assert!((vals[2] - 2.0).abs() < 1e-14);
        assert!((vecs[0].x().abs() - 1.0).abs() < 1e-12);

        // rank-1: n n^T
        let n: V3<f64> = V3::of(0.3, -0.5, 0.8).normalized();
        let (vals, vecs) = eig3_symmetric(M3::outer(n, n));
        assert!(vals[0].abs() < 1e-12 && vals[1].abs() < 1e-12);
        assert!((vals[2] - 1.0).abs() < 1e-12);
        assert!((vecs[2].dot(n).abs() - 1.0).abs() < 1e-10);

        // random symmetric: spectral reconstruction
        let mut g = rng(31);
        for _ in 0..50 {
            let mut m = M3::<f64>::zero();
            for i in 0..3 {
                for j in i..3 {
                    let x: f64 = g.gen_range(-2.0..2.0);
                    m.0[i][j] = x;
                    m.0[j][i] = x;
                }
            }
            let (vals, vecs) = eig3_symmetric(m);
            assert!(vals[0] <= vals[1] && vals[1] <= vals[2]);
            let mut rec = M3::<f64>::zero();
            for k in 0..3 {
                rec = rec.add(M3::outer(vecs[k], vecs[k]).scale(vals[k]));
            }
            let scale = m.max_abs().max(1.0);
            assert!(rec.sub(m).max_abs() < 1e-10 * scale);
            for k in 0..3 {
                let mv = m.mul_vec(vecs[k]);
                assert!((mv - vecs[k] * vals[k]).norm() < 1e-10 * scale);
            }
        }
    }

    #[test]
    fn single_double_agreement_well_conditioned() {
        let mut g = rng(77);
        for _ in 0..10 {
            let a64 = random_mat(6, 6, &mut g).add(&Mat::identity(6).scale(4.0));
            let r64 = qr_triangularize(&a64);
            let r32 = qr_triangularize(&a64.map(|x| x as f32));
            let back = r32.mat().map(|x| x as f64);
            assert!(back.rel_err(r64.mat()) < 1e-5);

            let c64 = a64.tr_mul(&a64).symmetrize();
            let f64_ = reverse_cholesky(&c64).unwrap();
            let f32_ = reverse_cholesky(&c64.map(|x| x as f32)).unwrap();
            assert!(f32_.mat().map(|x| x as f64).rel_err(f64_.mat()) < 1e-5);
        }
    }

    #[test]
    fn cond_estimate_sane() {
        let mut c = Mat::<f64>::identity(5);
        c[(0, 0)] = 100.0;
        let k = cond_spd(&c);
        assert!((k - 100.0).abs() / 100.0 < 0.05, "cond {k}");
    }
}
