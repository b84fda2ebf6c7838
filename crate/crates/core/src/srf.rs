//! Square-root filter engine.
//!
//! The estimator state couples a block-structured mean with an
//! upper-triangular factor `U` satisfying `U^T U = P`. Propagation stacks
//! the process-noise factor and re-triangularizes by QR (optionally
//! deferred), cloning duplicates factor columns, marginalization deletes
//! columns and re-triangularizes the smallest trailing sub-block, and the
//! measurement update factors `C = I + U H^T R^-1 H U^T` into `F^T F` with
//! `F` lower triangular so that `U' = F^-T U` stays upper triangular.
//!
//! Four reference update backends (permuted-QR, Potter, Carlson, Kaminski)
//! produce the same posterior through different factorizations; each call
//! reports its dense-loop flop count for the efficiency studies.

use crate::chi2::Chi2Table;
use crate::error::{KernelError, SrfError};
use crate::flops;
use crate::geom::{Quat, V3};
use crate::mat::{dot, Mat};
use crate::scalar::Scalar;
use crate::tri::{self, UpperTri};
use std::ops::Range;

pub type CloneId = i64;
pub type FeatureId = u64;

/// Width of the navigation error block: orientation, position, velocity,
/// gyro bias, accel bias.
pub const NAV_ERR_DIM: usize = 15;
/// Mean storage width of the navigation block (unit quaternion is 4 wide).
pub const NAV_MEAN_DIM: usize = 16;
pub const CLONE_ERR_DIM: usize = 6;
pub const FEAT_ERR_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Unit quaternion: 4 mean entries, 3 error dimensions.
    Quat,
    /// Plain vector block: k mean entries, k error dimensions.
    Lin(usize),
}

impl BlockKind {
    pub fn mean_dim(self) -> usize {
        match self {
            BlockKind::Quat => 4,
            BlockKind::Lin(k) => k,
        }
    }
    pub fn err_dim(self) -> usize {
        match self {
            BlockKind::Quat => 3,
            BlockKind::Lin(k) => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockTag {
    Nav,
    Calib,
    Clone(CloneId),
    Feature(FeatureId),
    Generic(u32),
}

#[derive(Clone, Debug)]
pub struct BlockDesc {
    pub kind: BlockKind,
    pub tag: BlockTag,
    pub mean_off: usize,
    pub err_off: usize,
}

/// Estimator state: structured mean plus square-root covariance factor.
///
/// Block order follows the marginalization-aware layout: navigation first,
/// then clones newest-first, features last. The factor may temporarily
/// carry more rows than columns while QR is deferred; every update requires
/// a clean (square, upper-triangular) factor.
#[derive(Clone, Debug)]
pub struct SqrtState<T: Scalar> {
    mean: Vec<T>,
    blocks: Vec<BlockDesc>,
    factor: Mat<T>,
    deferred: bool,
}

impl<T: Scalar> SqrtState<T> {
    pub fn from_blocks(parts: &[(BlockKind, BlockTag)], mean: Vec<T>, factor: Mat<T>) -> Self {
        let mut blocks = Vec::with_capacity(parts.len());
        let (mut mo, mut eo) = (0usize, 0usize);
        for &(kind, tag) in parts {
            blocks.push(BlockDesc { kind, tag, mean_off: mo, err_off: eo });
            mo += kind.mean_dim();
            eo += kind.err_dim();
        }
        assert_eq!(mean.len(), mo, "mean length");
        assert_eq!(factor.cols(), eo, "factor columns");
        assert!(factor.rows() >= eo.min(factor.rows()));
        let deferred = factor.rows() != eo || !factor.is_upper_triangular();
        SqrtState { mean, blocks, factor, deferred }
    }

    /// Single linear block covering the whole state; used by the generic
    /// filter tests and the update benchmarks.
    pub fn new_generic(mean: Vec<T>, u: UpperTri<T>) -> Self {
        let n = mean.len();
        assert_eq!(u.dim(), n);
        Self::from_blocks(&[(BlockKind::Lin(n), BlockTag::Generic(0))], mean, u.into_mat())
    }

    pub fn err_dim(&self) -> usize {
        self.blocks.last().map(|b| b.err_off + b.kind.err_dim()).unwrap_or(0)
    }

    pub fn mean_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn mean_mut(&mut self) -> &mut [T] {
        &mut self.mean
    }

    pub fn blocks(&self) -> &[BlockDesc] {
        &self.blocks
    }

    pub fn factor(&self) -> &Mat<T> {
        &self.factor
    }

    pub fn is_deferred(&self) -> bool {
        self.deferred
    }

    /// Reconstructed covariance U^T U (diagnostics and oracles).
    pub fn covariance(&self) -> Mat<T> {
        self.factor.tr_mul(&self.factor)
    }

    pub fn block_err_range(&self, tag: BlockTag) -> Option<Range<usize>> {
        let mut lo = usize::MAX;
        let mut hi = 0usize;
        for b in &self.blocks {
            if b.tag == tag {
                lo = lo.min(b.err_off);
                hi = hi.max(b.err_off + b.kind.err_dim());
            }
        }
        (lo < hi).then_some(lo..hi)
    }

    pub fn quat_at(&self, block: usize) -> Quat<T> {
        let b = &self.blocks[block];
        assert_eq!(b.kind, BlockKind::Quat);
        let m = &self.mean[b.mean_off..b.mean_off + 4];
        Quat([m[0], m[1], m[2], m[3]])
    }

    pub fn set_quat_at(&mut self, block: usize, q: Quat<T>) {
        let b = &self.blocks[block];
        assert_eq!(b.kind, BlockKind::Quat);
        self.mean[b.mean_off..b.mean_off + 4].copy_from_slice(&q.0);
    }

    pub fn vec3_at(&self, block: usize) -> V3<T> {
        let b = &self.blocks[block];
        let m = &self.mean[b.mean_off..b.mean_off + 3];
        V3([m[0], m[1], m[2]])
    }

    pub fn set_vec3_at(&mut self, block: usize, v: V3<T>) {
        let b = &self.blocks[block];
        self.mean[b.mean_off..b.mean_off + 3].copy_from_slice(&v.0);
    }

    /// Error-state retraction: apply a correction to every block.
    pub fn apply_correction(&mut self, dx: &[T]) {
        assert_eq!(dx.len(), self.err_dim());
        for b in &self.blocks {
            match b.kind {
                BlockKind::Quat => {
                    let d = V3([dx[b.err_off], dx[b.err_off + 1], dx[b.err_off + 2]]);
                    let m = &self.mean[b.mean_off..b.mean_off + 4];
                    let q = Quat([m[0], m[1], m[2], m[3]]).boxplus(d);
                    self.mean[b.mean_off..b.mean_off + 4].copy_from_slice(&q.0);
                }
                BlockKind::Lin(k) => {
                    for i in 0..k {
                        self.mean[b.mean_off + i] = self.mean[b.mean_off + i] + dx[b.err_off + i];
                    }
                }
            }
        }
    }

    /// Covariance propagation: stack the process-noise factor over
    /// `U Phi^T` (with `phi` acting on the leading error dimensions) and
    /// optionally defer the QR re-triangularization.
    pub fn propagate(
        &mut self,
        phi: &Mat<T>,
        w_sqrt: &Mat<T>,
        new_mean_leading: &[T],
        defer_qr: bool,
    ) -> Result<(), SrfError> {
        let n = self.err_dim();
        let d = phi.rows();
        if phi.cols() != d || d > n || (w_sqrt.rows() > 0 && w_sqrt.cols() != d) {
            return Err(SrfError::Kernel(KernelError::DimensionMismatch(format!(
                "phi {}x{}, w {}x{}, state {}",
                phi.rows(),
                phi.cols(),
                w_sqrt.rows(),
                w_sqrt.cols(),
                n
            ))));
        }
        if new_mean_leading.len() > self.mean.len() {
            return Err(SrfError::Kernel(KernelError::DimensionMismatch("mean".into())));
        }
        // columns 0..d become U[:,0..d] * phi^T
        let r = self.factor.rows();
        let lead = self.factor.block(0, 0, r, d).mul_tr(phi);
        self.factor.set_block(0, 0, &lead);
        if w_sqrt.rows() > 0 {
            let mut wrows = Mat::zeros(w_sqrt.rows(), n);
            wrows.set_block(0, 0, w_sqrt);
            self.factor = self.factor.vstack(&wrows);
        }
        self.deferred = true;
        self.mean[..new_mean_leading.len()].copy_from_slice(new_mean_leading);
        if !defer_qr {
            self.triangularize();
        }
        Ok(())
    }

    /// Restore a clean upper-triangular factor by a full QR.
    pub fn triangularize(&mut self) {
        if !self.deferred {
            return;
        }
        let n = self.err_dim();
        if self.factor.rows() < n {
            // zero-pad so the QR is well posed (possible after aggressive
            // marginalization of a deferred factor)
            let pad = Mat::zeros(n - self.factor.rows(), n);
            self.factor = self.factor.vstack(&pad);
        }
        self.factor = tri::qr_triangularize(&self.factor).into_mat();
        self.deferred = false;
    }

    /// Stochastic cloning of the leading pose: duplicates the mean and the
    /// factor columns of the orientation+position sub-blocks. No QR needed.
    pub fn clone_leading_pose(&mut self, id: CloneId) {
        assert!(matches!(self.blocks.first().map(|b| b.kind), Some(BlockKind::Quat)));
        let q = self.quat_at(0);
        let p = self.vec3_at(1);
        // factor: duplicate error columns 0..6 after the nav block
        let insert_at = NAV_ERR_DIM;
        let r = self.factor.rows();
        let mut f = self.factor.insert_zero_cols(insert_at, CLONE_ERR_DIM);
        for i in 0..r {
            for j in 0..CLONE_ERR_DIM {
                f[(i, insert_at + j)] = self.factor[(i, j)];
            }
        }
        self.factor = f;
        // mean: insert [q p] after the nav block
        let at = NAV_MEAN_DIM;
        let mut vals = q.0.to_vec();
        vals.extend_from_slice(&p.0);
        for (i, v) in vals.into_iter().enumerate() {
            self.mean.insert(at + i, v);
        }
        // blocks: insert clone descriptors after the 5 nav blocks
        self.blocks.insert(5, BlockDesc { kind: BlockKind::Quat, tag: BlockTag::Clone(id), mean_off: 0, err_off: 0 });
        self.blocks.insert(6, BlockDesc { kind: BlockKind::Lin(3), tag: BlockTag::Clone(id), mean_off: 0, err_off: 0 });
        self.rebuild_offsets();
        // duplicated columns break strict triangularity below the diagonal
        self.deferred = true;
    }

    /// Append a trailing block together with its factor columns:
    /// the factor becomes [[U, cross]; [0, diag]].
    pub fn append_block(
        &mut self,
        kind: BlockKind,
        tag: BlockTag,
        mean_vals: &[T],
        cross: &Mat<T>,
        diag: &Mat<T>,
    ) -> Result<(), SrfError> {
        if self.deferred {
            return Err(SrfError::DeferredFactor);
        }
        let n = self.err_dim();
        let w = kind.err_dim();
        if mean_vals.len() != kind.mean_dim() || cross.rows() != n || cross.cols() != w
            || diag.rows() != w || diag.cols() != w
        {
            return Err(SrfError::Kernel(KernelError::DimensionMismatch("append_block".into())));
        }
        let mut f = Mat::zeros(n + w, n + w);
        f.set_block(0, 0, &self.factor);
        f.set_block(0, n, cross);
        f.set_block(n, n, diag);
        self.factor = f;
        self.mean.extend_from_slice(mean_vals);
        self.blocks.push(BlockDesc { kind, tag, mean_off: 0, err_off: 0 });
        self.rebuild_offsets();
        Ok(())
    }

    /// Remove every block carrying one of the victim tags. Trailing victims
    /// cost nothing; otherwise one QR on the trailing sub-block restores
    /// triangularity (a deferred factor forces the QR to span everything).
    pub fn marginalize(&mut self, victims: &[BlockTag]) -> Result<(), SrfError> {
        for v in victims {
            if !self.blocks.iter().any(|b| b.tag == *v) {
                return Err(SrfError::UnknownBlock(format!("{v:?}")));
            }
        }
        let mut err_cols: Vec<usize> = Vec::new();
        let mut mean_idx: Vec<usize> = Vec::new();
        for b in &self.blocks {
            if victims.contains(&b.tag) {
                err_cols.extend(b.err_off..b.err_off + b.kind.err_dim());
                mean_idx.extend(b.mean_off..b.mean_off + b.kind.mean_dim());
            }
        }
        if err_cols.is_empty() {
            return Ok(());
        }
        err_cols.sort_unstable();
        mean_idx.sort_unstable();
        let old_dim = self.err_dim();
        let new_dim = old_dim - err_cols.len();
        let trailing = err_cols[0] == new_dim;

        self.factor = self.factor.remove_cols(&err_cols);
        let mut k = 0usize;
        self.mean = std::mem::take(&mut self.mean)
            .into_iter()
            .enumerate()
            .filter_map(|(i, v)| {
                if k < mean_idx.len() && mean_idx[k] == i {
                    k += 1;
                    None
                } else {
                    Some(v)
                }
            })
            .collect();
        self.blocks.retain(|b| !victims.contains(&b.tag));
        self.rebuild_offsets();

        if !self.deferred && trailing && self.factor.rows() == old_dim {
            // columns deleted at the very end: rows below new_dim are zero
            self.factor = self.factor.take_rows(0..new_dim);
            return Ok(());
        }
        let start = if self.deferred { 0 } else { err_cols[0] };
        let rows = self.factor.rows();
        if rows > start && new_dim > start {
            let sub = self.factor.block(start, start, rows - start, new_dim - start);
            let rt = if sub.rows() >= sub.cols() {
                tri::qr_triangularize(&sub).into_mat()
            } else {
                tri::qr_triangularize(&sub.vstack(&Mat::zeros(sub.cols() - sub.rows(), sub.cols())))
                    .into_mat()
            };
            let mut f = Mat::zeros(new_dim, new_dim);
            f.set_block(0, 0, &self.factor.block(0, 0, start, new_dim));
            f.set_block(start, start, &rt);
            self.factor = f;
        } else {
            self.factor = self.factor.take_rows(0..new_dim);
        }
        self.deferred = false;
        Ok(())
    }

    /// Blockwise error x (-) ref, the inverse of [`apply_correction`]
    /// (first order on orientation blocks).
    ///
    /// [`apply_correction`]: SqrtState::apply_correction
    pub fn boxminus(&self, reference: &SqrtState<T>) -> Vec<T> {
        assert_eq!(self.err_dim(), reference.err_dim());
        let mut out = vec![T::zero(); self.err_dim()];
        for (b, br) in self.blocks.iter().zip(reference.blocks.iter()) {
            assert_eq!(b.kind, br.kind);
            match b.kind {
                BlockKind::Quat => {
                    let m = &self.mean[b.mean_off..b.mean_off + 4];
                    let mr = &reference.mean[br.mean_off..br.mean_off + 4];
                    let r = Quat([m[0], m[1], m[2], m[3]]).rot();
                    let rr = Quat([mr[0], mr[1], mr[2], mr[3]]).rot();
                    let d = -crate::geom::so3_log(r.mul(rr.transpose()));
                    out[b.err_off..b.err_off + 3].copy_from_slice(&d.0);
                }
                BlockKind::Lin(k) => {
                    for i in 0..k {
                        out[b.err_off + i] =
                            self.mean[b.mean_off + i] - reference.mean[br.mean_off + i];
                    }
                }
            }
        }
        out
    }

    /// Swap in a replacement factor (e.g. after a column transform).
    pub fn replace_factor(&mut self, factor: Mat<T>) {
        assert_eq!(factor.cols(), self.err_dim());
        self.deferred = factor.rows() != self.err_dim() || !factor.is_upper_triangular();
        self.factor = factor;
    }

    fn rebuild_offsets(&mut self) {
        let (mut mo, mut eo) = (0usize, 0usize);
        for b in &mut self.blocks {
            b.mean_off = mo;
            b.err_off = eo;
            mo += b.kind.mean_dim();
            eo += b.kind.err_dim();
        }
    }
}

/// Linearized measurement ready for a square-root update: residual,
/// Jacobian over the error state, independent per-row noise and the sparse
/// column-block pattern the Jacobian touches.
#[derive(Clone, Debug)]
pub struct LinearizedMeasurement<T: Scalar> {
    pub residual: Vec<T>,
    pub jacobian: Mat<T>,
    pub sigmas: Vec<T>,
    pub touched: Vec<Range<usize>>,
}

impl<T: Scalar> LinearizedMeasurement<T> {
    pub fn new_dense(residual: Vec<T>, jacobian: Mat<T>, sigma: T) -> Self {
        let m = residual.len();
        assert_eq!(jacobian.rows(), m);
        let n = jacobian.cols();
        LinearizedMeasurement {
            residual,
            jacobian,
            sigmas: vec![sigma; m],
            touched: if n > 0 { vec![0..n] } else { vec![] },
        }
    }

    pub fn rows(&self) -> usize {
        self.residual.len()
    }

    /// One past the last touched column.
    pub fn touched_end(&self) -> usize {
        self.touched.last().map(|r| r.end).unwrap_or(0)
    }

    /// Merge sorted block patterns into sorted disjoint ranges.
    pub fn normalize_pattern(mut ranges: Vec<Range<usize>>) -> Vec<Range<usize>> {
        ranges.retain(|r| !r.is_empty());
        ranges.sort_by_key(|r| r.start);
        let mut out: Vec<Range<usize>> = Vec::new();
        for r in ranges {
            if let Some(last) = out.last_mut() {
                if r.start <= last.end {
                    last.end = last.end.max(r.end);
                    continue;
                }
            }
            out.push(r);
        }
        out
    }

    /// Stack measurement blocks into one system (shared state dimension).
    pub fn stack(blocks: &[LinearizedMeasurement<T>], n: usize) -> Self {
        let m: usize = blocks.iter().map(|b| b.rows()).sum();
        let mut residual = Vec::with_capacity(m);
        let mut sigmas = Vec::with_capacity(m);
        let mut jacobian = Mat::zeros(m, n);
        let mut pattern = Vec::new();
        let mut row = 0;
        for b in blocks {
            assert_eq!(b.jacobian.cols(), n, "stack: inconsistent state dim");
            residual.extend_from_slice(&b.residual);
            sigmas.extend_from_slice(&b.sigmas);
            for i in 0..b.rows() {
                jacobian.row_mut(row + i).copy_from_slice(b.jacobian.row(i));
            }
            row += b.rows();
            pattern.extend(b.touched.iter().cloned());
        }
        LinearizedMeasurement {
            residual,
            jacobian,
            sigmas,
            touched: Self::normalize_pattern(pattern),
        }
    }

    fn whitened(&self) -> (Mat<T>, Vec<T>) {
        let m = self.rows();
        let n = self.jacobian.cols();
        let mut h = Mat::zeros(m, n);
        let mut r = vec![T::zero(); m];
        for i in 0..m {
            let inv = T::one() / self.sigmas[i];
            r[i] = self.residual[i] * inv;
            let src = self.jacobian.row(i);
            let dst = h.row_mut(i);
            for rg in &self.touched {
                for j in rg.clone() {
                    dst[j] = src[j] * inv;
                }
            }
        }
        (h, r)
    }
}

/// Update backend selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Llt,
    Pqr,
    Potter,
    Carlson,
    Kaminski,
}

impl Backend {
    pub const ALL: [Backend; 5] =
        [Backend::Llt, Backend::Pqr, Backend::Potter, Backend::Carlson, Backend::Kaminski];

    pub fn label(self) -> &'static str {
        match self {
            Backend::Llt => "llt",
            Backend::Pqr => "pqr",
            Backend::Potter => "potter",
            Backend::Carlson => "carlson",
            Backend::Kaminski => "kaminski",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "llt" => Ok(Backend::Llt),
            "pqr" | "p-qr" | "qr" => Ok(Backend::Pqr),
            "potter" => Ok(Backend::Potter),
            "carlson" => Ok(Backend::Carlson),
            "kaminski" => Ok(Backend::Kaminski),
            other => Err(format!("unknown backend '{other}'")),
        }
    }
}

/// Per-update diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct UpdateInfo {
    pub rows: usize,
    pub touched_dim: usize,
    pub flops: u64,
    /// Condition number of C (NaN unless requested on the LLT path).
    pub cond_c: f64,
}

/// `Y = U H_w^T` restricted to the touched leading sub-block (k rows).
fn factor_times_ht<T: Scalar>(
    u: &Mat<T>,
    hw: &Mat<T>,
    pattern: &[Range<usize>],
    k: usize,
) -> Mat<T> {
    let m = hw.rows();
    let mut y = Mat::zeros(k, m);
    let mut mas = 0u64;
    for i in 0..k {
        let urow = u.row(i);
        let mut active: Vec<Range<usize>> = Vec::with_capacity(pattern.len());
        for rg in pattern {
            let s = rg.start.max(i);
            let e = rg.end.min(k);
            if s < e {
                active.push(s..e);
            }
        }
        let span: usize = active.iter().map(|r| r.len()).sum();
        mas += (span * m) as u64;
        for c in 0..m {
            let hrow = hw.row(c);
            let mut s = T::zero();
            for rg in &active {
                s = s + dot(&urow[rg.clone()], &hrow[rg.clone()]);
            }
            y[(i, c)] = s;
        }
    }
    flops::add_fma(mas);
    y
}

/// C = I_k + Y Y^T, symmetric, computed on the upper half and mirrored.
fn form_c<T: Scalar>(y: &Mat<T>) -> Mat<T> {
    let k = y.rows();
    let m = y.cols();
    let mut c = Mat::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot(y.row(i), y.row(j));
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
        c[(i, i)] = c[(i, i)] + T::one();
    }
    flops::add_fma((k * (k + 1) / 2 * m) as u64);
    c
}

/// Solve F^T X = U_top with F lower triangular, exploiting the triangular
/// column profile of U_top (column j has at most min(j+1, k) live rows).
fn solve_ft_utop<T: Scalar>(f: &Mat<T>, utop: &Mat<T>) -> Mat<T> {
    let k = f.rows();
    let n = utop.cols();
    let mut x = utop.clone();
    let mut mas = 0u64;
    for j in 0..n {
        let h = (j + 1).min(k);
        for i in (0..h).rev() {
            let mut s = x[(i, j)];
            for l in i + 1..h {
                // F^T[i][l] = F[l][i]
                s = s - f[(l, i)] * x[(l, j)];
            }
            x[(i, j)] = s / f[(i, i)];
        }
        mas += (h * (h.saturating_sub(1)) / 2 + h) as u64;
        for i in h..x.rows() {
            x[(i, j)] = T::zero();
        }
    }
    flops::add_fma(mas);
    x
}

/// Posterior mean correction dx = U'^T U' H_w^T r_w, restricted to the
/// touched leading block.
fn mean_correction<T: Scalar>(
    u_new: &Mat<T>,
    hw: &Mat<T>,
    rw: &[T],
    pattern: &[Range<usize>],
    k: usize,
) -> Vec<T> {
    let n = u_new.cols();
    let m = hw.rows();
    // g = H_w^T r_w (support within pattern)
    let mut g = vec![T::zero(); k];
    let span: usize = pattern.iter().map(|r| r.end.min(k).saturating_sub(r.start)).sum();
    for c in 0..m {
        let w = rw[c];
        if w == T::zero() {
            continue;
        }
        let hrow = hw.row(c);
        for rg in pattern {
            for j in rg.start..rg.end.min(k) {
                g[j] = g[j] + hrow[j] * w;
            }
        }
    }
    flops::add_fma((m * span) as u64);
    // t = U' g (rows 0..k live)
    let mut t = vec![T::zero(); k];
    let mut mas = 0u64;
    for i in 0..k {
        t[i] = dot(&u_new.row(i)[i..k], &g[i..k]);
        mas += (k - i) as u64;
    }
    // dx = U'^T t
    let mut dx = vec![T::zero(); n];
    for i in 0..k {
        let w = t[i];
        let urow = u_new.row(i);
        for j in i..n {
            dx[j] = dx[j] + urow[j] * w;
        }
        mas += (n - i) as u64;
    }
    flops::add_fma(mas);
    dx
}

impl<T: Scalar> SqrtState<T> {
    /// Triangular-structure-preserving update: factor C restricted to the
    /// touched blocks, reverse-Cholesky it, and back-substitute the new
    /// factor rows. Fails (state untouched) if C loses positive
    /// definiteness.
    pub fn update_llt(&mut self, meas: &LinearizedMeasurement<T>) -> Result<UpdateInfo, SrfError> {
        self.update_llt_ext(meas, false)
    }

    pub fn update_llt_ext(
        &mut self,
        meas: &LinearizedMeasurement<T>,
        want_cond: bool,
    ) -> Result<UpdateInfo, SrfError> {
        if self.deferred {
            return Err(SrfError::DeferredFactor);
        }
        let n = self.err_dim();
        let m = meas.rows();
        if meas.jacobian.cols() != n {
            return Err(SrfError::Kernel(KernelError::DimensionMismatch(format!(
                "H cols {} vs state {}",
                meas.jacobian.cols(),
                n
            ))));
        }
        let k = meas.touched_end().min(n);
        if m == 0 || k == 0 {
            return Ok(UpdateInfo { rows: m, touched_dim: 0, flops: 0, cond_c: f64::NAN });
        }
        let before = flops::total();
        let (hw, rw) = meas.whitened();
        let y = factor_times_ht(&self.factor, &hw, &meas.touched, k);
        let c = form_c(&y);
        // a failed factorization aborts the update with the state untouched
        let f = tri::reverse_cholesky(&c)?;
        let utop = self.factor.block(0, 0, k, n);
        let unew_top = solve_ft_utop(f.mat(), &utop);
        self.factor.set_block(0, 0, &unew_top);
        let dx = mean_correction(&self.factor, &hw, &rw, &meas.touched, k);
        self.apply_correction(&dx);
        let used = flops::total() - before;
        let cond = if want_cond { flops::uncounted(|| tri::cond_spd(&c)) } else { f64::NAN };
        Ok(UpdateInfo { rows: m, touched_dim: k, flops: used, cond_c: cond })
    }

    /// Run the selected update backend; all backends produce the same
    /// posterior (to rounding) with different factorization work.
    pub fn update_with(
        &mut self,
        meas: &LinearizedMeasurement<T>,
        backend: Backend,
    ) -> Result<UpdateInfo, SrfError> {
        match backend {
            Backend::Llt => self.update_llt(meas),
            Backend::Pqr => self.update_pqr(meas),
            Backend::Potter => self.update_potter(meas),
            Backend::Carlson => self.update_carlson(meas),
            Backend::Kaminski => self.update_kaminski(meas),
        }
    }

    fn update_pqr(&mut self, meas: &LinearizedMeasurement<T>) -> Result<UpdateInfo, SrfError> {
        if self.deferred {
            return Err(SrfError::DeferredFactor);
        }
        let n = self.err_dim();
        let m = meas.rows();
        let k = meas.touched_end().min(n);
        if m == 0 || k == 0 {
            return Ok(UpdateInfo { rows: m, touched_dim: 0, flops: 0, cond_c: f64::NAN });
        }
        let before = flops::total();
        let (hw, rw) = meas.whitened();
        let y = factor_times_ht(&self.factor, &hw, &meas.touched, k);
        // triangularize the column-reversed stack [I_k; (Y^T)E] and map the
        // result back to a lower-triangular J with J^T J = I + Y Y^T
        let mut top = Mat::identity(k);
        let mut bot = Mat::from_fn(m, k, |i, j| y[(k - 1 - j, i)]);
        for c in 0..k {
            let pivot = top[(c, c)];
            let mut sigma2: T = pivot * pivot;
            for i in 0..m {
                let x = bot[(i, c)];
                sigma2 = sigma2 + x * x;
            }
            let sigma = sigma2.sqrt();
            if sigma == T::zero() {
                continue;
            }
            let alpha = if pivot >= T::zero() { -sigma } else { sigma };
            let v0 = pivot - alpha;
            let vtv = sigma2 - pivot * alpha - pivot * alpha + alpha * alpha;
            if vtv == T::zero() {
                continue;
            }
            let beta = T::of(2.0) / vtv;
            top[(c, c)] = alpha;
            let vbot: Vec<T> = (0..m).map(|i| bot[(i, c)]).collect();
            for i in 0..m {
                bot[(i, c)] = T::zero();
            }
            for j in c + 1..k {
                let mut w = v0 * top[(c, j)];
                for i in 0..m {
                    w = w + vbot[i] * bot[(i, j)];
                }
                let bw = beta * w;
                top[(c, j)] = top[(c, j)] - bw * v0;
                for i in 0..m {
                    bot[(i, j)] = bot[(i, j)] - bw * vbot[i];
                }
            }
            flops::add_fma(((m + 1) * (2 * (k - c - 1) + 1)) as u64);
        }
        // J = E G E (lower), sign-fixed to a positive diagonal
        let mut j = Mat::zeros(k, k);
        for i in 0..k {
            for c in 0..=i {
                j[(i, c)] = top[(k - 1 - i, k - 1 - c)];
            }
        }
        for i in 0..k {
            if j[(i, i)] < T::zero() {
                for c in 0..=i {
                    j[(i, c)] = -j[(i, c)];
                }
            }
            if j[(i, i)] == T::zero() {
                return Err(SrfError::Kernel(KernelError::SingularFactor { index: i }));
            }
        }
        let utop = self.factor.block(0, 0, k, n);
        let unew_top = solve_ft_utop(&j, &utop);
        self.factor.set_block(0, 0, &unew_top);
        let dx = mean_correction(&self.factor, &hw, &rw, &meas.touched, k);
        self.apply_correction(&dx);
        Ok(UpdateInfo {
            rows: m,
            touched_dim: k,
            flops: flops::total() - before,
            cond_c: f64::NAN,
        })
    }

    fn update_potter(&mut self, meas: &LinearizedMeasurement<T>) -> Result<UpdateInfo, SrfError> {
        if self.deferred {
            return Err(SrfError::DeferredFactor);
        }
        let n = self.err_dim();
        let m = meas.rows();
        if m == 0 {
            return Ok(UpdateInfo { rows: 0, touched_dim: 0, flops: 0, cond_c: f64::NAN });
        }
        let before = flops::total();
        let (hw, rw) = meas.whitened();
        // dense square root S = U^T with P = S S^T; triangularity is lost
        // during the scalar sweeps and restored once at the end
        let mut s = flops::uncounted(|| self.factor.transpose());
        let mut dx = vec![T::zero(); n];
        for row in 0..m {
            let h = hw.row(row).to_vec();
            let r_eff = rw[row] - dot(&h, &dx);
            let f = s.tr_mul_vec(&h);
            let v = s.mul_vec(&f);
            let beta = T::one() / (dot(&f, &f) + T::one());
            let gamma = T::one() / (T::one() + beta.sqrt());
            let bg = beta * gamma;
            for i in 0..n {
                let vi = v[i];
                let srow = s.row_mut(i);
                for jj in 0..n {
                    srow[jj] = srow[jj] - bg * vi * f[jj];
                }
            }
            flops::add_fma((n * n) as u64);
            let kr = beta * r_eff;
            for i in 0..n {
                dx[i] = dx[i] + kr * v[i];
            }
        }
        let used = flops::total() - before;
        // upper-triangular restore is bookkeeping outside the published
        // sequential-update operation count
        let u = flops::uncounted(|| tri::qr_triangularize(&s.transpose()));
        self.factor = u.into_mat();
        self.apply_correction(&dx);
        Ok(UpdateInfo { rows: m, touched_dim: n, flops: used, cond_c: f64::NAN })
    }

    fn update_carlson(&mut self, meas: &LinearizedMeasurement<T>) -> Result<UpdateInfo, SrfError> {
        if self.deferred {
            return Err(SrfError::DeferredFactor);
        }
        let n = self.err_dim();
        let m = meas.rows();
        if m == 0 {
            return Ok(UpdateInfo { rows: 0, touched_dim: 0, flops: 0, cond_c: f64::NAN });
        }
        let before = flops::total();
        let (hw, rw) = meas.whitened();
        // exchange to Ubar with Ubar Ubar^T = E P E so the triangular
        // rank-one factorization keeps Ubar upper during scalar sweeps
        let mut ub =
            flops::uncounted(|| Mat::from_fn(n, n, |i, j| self.factor[(n - 1 - j, n - 1 - i)]));
        let mut dxb = vec![T::zero(); n];
        for row in 0..m {
            let mut hb = vec![T::zero(); n];
            let hrow = hw.row(row);
            for i in 0..n {
                hb[i] = hrow[n - 1 - i];
            }
            let r_eff = rw[row] - dot(&hb, &dxb);
            // f = Ubar^T hb (triangular)
            let mut f = vec![T::zero(); n];
            for j in 0..n {
                let mut acc = T::zero();
                for i in 0..=j {
                    acc = acc + ub[(i, j)] * hb[i];
                }
                f[j] = acc;
            }
            flops::add_fma((n * (n + 1) / 2) as u64);
            let mut alpha = T::one(); // whitened scalar variance
            let mut kvec = vec![T::zero(); n];
            for j in 0..n {
                let fj = f[j];
                let alpha_new = alpha + fj * fj;
                let cscale = (alpha / alpha_new).sqrt();
                let dscale = fj / (alpha * alpha_new).sqrt();
                for i in 0..=j {
                    let old = ub[(i, j)];
                    ub[(i, j)] = cscale * old - dscale * kvec[i];
                    kvec[i] = kvec[i] + fj * old;
                }
                flops::add(5 * (j as u64 + 1));
                alpha = alpha_new;
            }
            let kr = r_eff / alpha;
            for i in 0..n {
                dxb[i] = dxb[i] + kr * kvec[i];
            }
        }
        let used = flops::total() - before;
        flops::uncounted(|| {
            let mut u = Mat::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    u[(i, j)] = ub[(n - 1 - j, n - 1 - i)];
                }
            }
            // sign convention: non-negative diagonal
            for i in 0..n {
                if u[(i, i)] < T::zero() {
                    for j in i..n {
                        u[(i, j)] = -u[(i, j)];
                    }
                }
            }
            self.factor = u;
        });
        let mut dx = vec![T::zero(); n];
        for i in 0..n {
            dx[i] = dxb[n - 1 - i];
        }
        self.apply_correction(&dx);
        Ok(UpdateInfo { rows: m, touched_dim: n, flops: used, cond_c: f64::NAN })
    }

    fn update_kaminski(&mut self, meas: &LinearizedMeasurement<T>) -> Result<UpdateInfo, SrfError> {
        if self.deferred {
            return Err(SrfError::DeferredFactor);
        }
        let n = self.err_dim();
        let m = meas.rows();
        if m == 0 {
            return Ok(UpdateInfo { rows: 0, touched_dim: 0, flops: 0, cond_c: f64::NAN });
        }
        let before = flops::total();
        let (hw, rw) = meas.whitened();
        let full = vec![0..n];
        let y = factor_times_ht(&self.factor, &hw, &full, n);
        // whitened pre-array [[I_m, 0]; [Y^T ... wait, rows: [I_m 0; Y U]]
        // triangularize [[I_m, 0]; [Y, U]] over the first m columns with
        // structured reflectors, then QR the trailing n x n block
        let mut top_l = Mat::identity(m); // m x m, fills upper
        let mut top_r = Mat::zeros(m, n);
        let mut bot_l = Mat::from_fn(n, m, |i, j| y[(i, j)]);
        let mut bot_r = self.factor.clone();
        for c in 0..m {
            let pivot = top_l[(c, c)];
            let mut sigma2: T = pivot * pivot;
            for i in 0..n {
                let x = bot_l[(i, c)];
                sigma2 = sigma2 + x * x;
            }
            let sigma = sigma2.sqrt();
            if sigma == T::zero() {
                continue;
            }
            let alpha = if pivot >= T::zero() { -sigma } else { sigma };
            let v0 = pivot - alpha;
            let vtv = sigma2 - pivot * alpha - pivot * alpha + alpha * alpha;
            if vtv == T::zero() {
                continue;
            }
            let beta = T::of(2.0) / vtv;
            top_l[(c, c)] = alpha;
            let vbot: Vec<T> = (0..n).map(|i| bot_l[(i, c)]).collect();
            for i in 0..n {
                bot_l[(i, c)] = T::zero();
            }
            for j in c + 1..m {
                let mut w = v0 * top_l[(c, j)];
                for i in 0..n {
                    w = w + vbot[i] * bot_l[(i, j)];
                }
                let bw = beta * w;
                top_l[(c, j)] = top_l[(c, j)] - bw * v0;
                for i in 0..n {
                    bot_l[(i, j)] = bot_l[(i, j)] - bw * vbot[i];
                }
            }
            for j in 0..n {
                let mut w = v0 * top_r[(c, j)];
                for i in 0..n {
                    w = w + vbot[i] * bot_r[(i, j)];
                }
                let bw = beta * w;
                top_r[(c, j)] = top_r[(c, j)] - bw * v0;
                for i in 0..n {
                    bot_r[(i, j)] = bot_r[(i, j)] - bw * vbot[i];
                }
            }
            flops::add_fma(((n + 1) * (2 * (m - c - 1) + 2 * n + 1)) as u64);
        }
        let u_new = tri::qr_triangularize(&bot_r);
        self.factor = u_new.into_mat();
        let dx = mean_correction(&self.factor, &hw, &rw, &full, n);
        self.apply_correction(&dx);
        Ok(UpdateInfo {
            rows: m,
            touched_dim: n,
            flops: flops::total() - before,
            cond_c: f64::NAN,
        })
    }

    /// Mahalanobis distance r^T (H P H^T + R)^{-1} r, computing U H^T only
    /// over the touched leading rows.
    pub fn mahalanobis(&self, meas: &LinearizedMeasurement<T>) -> Result<T, SrfError> {
        if self.deferred {
            return Err(SrfError::DeferredFactor);
        }
        let m = meas.rows();
        if m == 0 {
            return Ok(T::zero());
        }
        let n = self.err_dim();
        let k = meas.touched_end().min(n);
        let (hw, rw) = meas.whitened();
        let y = factor_times_ht(&self.factor, &hw, &meas.touched, k);
        // S_w = Y^T Y + I_m
        let mut s = y.tr_mul(&y);
        for i in 0..m {
            s[(i, i)] = s[(i, i)] + T::one();
        }
        let l = tri::cholesky_lower(&s)?;
        let z = tri::solve_lower(l.mat(), &Mat::col_vec(&rw))?;
        let mut d = T::zero();
        for i in 0..m {
            d = d + z[(i, 0)] * z[(i, 0)];
        }
        Ok(d)
    }

    /// Chi-square gate at the table's confidence, with an inflation
    /// multiplier on the threshold.
    pub fn gate(
        &self,
        meas: &LinearizedMeasurement<T>,
        table: &Chi2Table,
        inflation: f64,
    ) -> Result<bool, SrfError> {
        if meas.rows() == 0 {
            return Ok(true);
        }
        let d = self.mahalanobis(meas)?;
        Ok(d.f64() <= inflation * table.threshold(meas.rows()))
    }
}
