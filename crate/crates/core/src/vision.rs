//! Camera measurement modeling and the sliding-window measurement paths:
//! nullspace-projected constraints for out-of-state features, delayed
//! initialization of in-state features, re-observation updates, and anchor
//! frame changes.
//!
//! Features are parameterized in the camera frame of an anchor clone;
//! global coordinates are recovered through the anchor pose and the
//! camera-IMU extrinsics.

use crate::error::VisionError;
use crate::geom::{M3, V3};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::srf::{BlockKind, BlockTag, CloneId, FeatureId, LinearizedMeasurement, SqrtState};
use crate::tri;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistortionKind {
    RadTan,
    Equidistant,
}

/// Pinhole camera with distortion and fixed camera-IMU extrinsics.
#[derive(Clone, Debug)]
pub struct CameraModel<T: Scalar> {
    pub focal: [T; 2],
    pub center: [T; 2],
    pub distortion: [T; 4],
    pub kind: DistortionKind,
    /// Rotation taking IMU-frame vectors into the camera frame.
    pub r_cam_imu: M3<T>,
    /// IMU origin expressed in the camera frame.
    pub p_imu_in_cam: V3<T>,
    /// Fixed camera-IMU time offset (seconds); applied by the data layer.
    pub time_offset: f64,
    pub width: u32,
    pub height: u32,
}

impl<T: Scalar> CameraModel<T> {
    pub fn pinhole(focal: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        CameraModel {
            focal: [T::of(focal), T::of(focal)],
            center: [T::of(cx), T::of(cy)],
            distortion: [T::zero(); 4],
            kind: DistortionKind::RadTan,
            r_cam_imu: M3::identity(),
            p_imu_in_cam: V3::zero(),
            time_offset: 0.0,
            width,
            height,
        }
    }

    pub fn cast<U: Scalar>(&self) -> CameraModel<U> {
        CameraModel {
            focal: [U::of(self.focal[0].f64()), U::of(self.focal[1].f64())],
            center: [U::of(self.center[0].f64()), U::of(self.center[1].f64())],
            distortion: [
                U::of(self.distortion[0].f64()),
                U::of(self.distortion[1].f64()),
                U::of(self.distortion[2].f64()),
                U::of(self.distortion[3].f64()),
            ],
            kind: self.kind,
            r_cam_imu: self.r_cam_imu.cast(),
            p_imu_in_cam: self.p_imu_in_cam.cast(),
            time_offset: self.time_offset,
            width: self.width,
            height: self.height,
        }
    }

    /// Apply the distortion model to normalized image coordinates.
    pub fn distort(&self, n: [T; 2]) -> [T; 2] {
        let [u, v] = n;
        match self.kind {
            DistortionKind::RadTan => {
                let [k1, k2, p1, p2] = self.distortion;
                let r2 = u * u + v * v;
                let radial = T::one() + k1 * r2 + k2 * r2 * r2;
                let two = T::of(2.0);
                [
                    u * radial + two * p1 * u * v + p2 * (r2 + two * u * u),
                    v * radial + p1 * (r2 + two * v * v) + two * p2 * u * v,
                ]
            }
            DistortionKind::Equidistant => {
                let [k1, k2, k3, k4] = self.distortion;
                let r = (u * u + v * v).sqrt();
                if r.f64() < 1e-12 {
                    return [u, v];
                }
                let th = r.atan();
                let th2 = th * th;
                let thd = th
                    * (T::one() + k1 * th2 + k2 * th2 * th2 + k3 * th2 * th2 * th2
                        + k4 * th2 * th2 * th2 * th2);
                let s = thd / r;
                [u * s, v * s]
            }
        }
    }

    /// Invert `distort` by damped fixed-point/Newton iteration.
    pub fn undistort(&self, d: [T; 2]) -> [T; 2] {
        let mut n = d;
        for _ in 0..12 {
            let f = self.distort(n);
            let j = self.distort_jacobian(n);
            // solve 2x2 j * step = f - d
            let rx = f[0] - d[0];
            let ry = f[1] - d[1];
            let det = j.0[0][0] * j.0[1][1] - j.0[0][1] * j.0[1][0];
            if det.abs().f64() < 1e-14 {
                break;
            }
            let sx = (rx * j.0[1][1] - ry * j.0[0][1]) / det;
            let sy = (ry * j.0[0][0] - rx * j.0[1][0]) / det;
            n = [n[0] - sx, n[1] - sy];
            if (sx * sx + sy * sy).f64() < 1e-26 {
                break;
            }
        }
        n
    }

    /// 2x2 Jacobian of the distortion map (upper-left of an M3).
    fn distort_jacobian(&self, n: [T; 2]) -> M3<T> {
        let [u, v] = n;
        let mut j = M3::<T>::identity();
        match self.kind {
            DistortionKind::RadTan => {
                let [k1, k2, p1, p2] = self.distortion;
                let r2 = u * u + v * v;
                let radial = T::one() + k1 * r2 + k2 * r2 * r2;
                let dr = k1 + T::of(2.0) * k2 * r2;
                let two = T::of(2.0);
                let six = T::of(6.0);
                j.0[0][0] = radial + two * u * u * dr + two * p1 * v + six * p2 * u;
                j.0[0][1] = two * u * v * dr + two * p1 * u + two * p2 * v;
                j.0[1][0] = two * u * v * dr + two * p2 * v + two * p1 * u;
                j.0[1][1] = radial + two * v * v * dr + six * p1 * v + two * p2 * u;
            }
            DistortionKind::Equidistant => {
                // numerically robust central difference; the model is smooth
                let h = T::of(1e-7);
                for c in 0..2 {
                    let mut np = n;
                    let mut nm = n;
                    np[c] = np[c] + h;
                    nm[c] = nm[c] - h;
                    let fp = self.distort(np);
                    let fm = self.distort(nm);
                    j.0[0][c] = (fp[0] - fm[0]) / (T::of(2.0) * h);
                    j.0[1][c] = (fp[1] - fm[1]) / (T::of(2.0) * h);
                }
            }
        }
        j
    }

    /// Project a camera-frame point to pixels.
    pub fn project(&self, f_cam: V3<T>) -> Result<[T; 2], VisionError> {
        let z = f_cam.z();
        if z.f64() <= 1e-3 {
            return Err(VisionError::BehindCamera(z.f64()));
        }
        let n = [f_cam.x() / z, f_cam.y() / z];
        let d = self.distort(n);
        Ok([
            self.focal[0] * d[0] + self.center[0],
            self.focal[1] * d[1] + self.center[1],
        ])
    }

    /// Pixel -> normalized undistorted coordinates.
    pub fn pixel_to_normalized(&self, px: [T; 2]) -> [T; 2] {
        self.undistort([
            (px[0] - self.center[0]) / self.focal[0],
            (px[1] - self.center[1]) / self.focal[1],
        ])
    }

    /// 2x3 Jacobian of the pixel projection wrt the camera-frame point.
    pub fn project_jacobian(&self, f_cam: V3<T>) -> Mat<T> {
        let z = f_cam.z();
        let inv_z = T::one() / z;
        let n = [f_cam.x() * inv_z, f_cam.y() * inv_z];
        let dj = self.distort_jacobian(n);
        let mut out = Mat::zeros(2, 3);
        // d(pixel)/d(n) = diag(f) * dj ; d(n)/d(f_cam)
        let pn = [
            [inv_z, T::zero(), -n[0] * inv_z],
            [T::zero(), inv_z, -n[1] * inv_z],
        ];
        for r in 0..2 {
            for c in 0..3 {
                let mut s = T::zero();
                for k in 0..2 {
                    s = s + dj.0[r][k] * pn[k][c];
                }
                out[(r, c)] = self.focal[r] * s;
            }
        }
        out
    }

    pub fn in_view(&self, px: [T; 2]) -> bool {
        px[0].f64() >= 0.0
            && px[1].f64() >= 0.0
            && px[0].f64() < self.width as f64
            && px[1].f64() < self.height as f64
    }
}

/// One pixel observation of a tracked feature.
#[derive(Clone, Copy, Debug)]
pub struct TrackObs {
    pub t_ns: i64,
    pub uv: [f64; 2],
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackCategory {
    SlamNew,
    SlamTracked,
    Msckf,
    Deferred,
}

/// Time-stamped bearing observations of one feature.
#[derive(Clone, Debug)]
pub struct FeatureTrack {
    pub id: FeatureId,
    pub obs: Vec<TrackObs>,
    pub category: TrackCategory,
}

/// Camera pose of a clone (global-to-camera rotation, camera origin in G).
#[derive(Clone, Copy, Debug)]
pub struct CamPose<T: Scalar> {
    pub r_cg: M3<T>,
    pub p_c: V3<T>,
}

/// Camera pose of the clone with the given id, through the extrinsics.
pub fn clone_cam_pose<T: Scalar>(
    state: &SqrtState<T>,
    cam: &CameraModel<T>,
    id: CloneId,
) -> Result<CamPose<T>, VisionError> {
    let blocks = state.blocks();
    let mut quat_idx = None;
    for (i, b) in blocks.iter().enumerate() {
        if b.tag == BlockTag::Clone(id) && b.kind == BlockKind::Quat {
            quat_idx = Some(i);
            break;
        }
    }
    let qi = quat_idx.ok_or(VisionError::UnknownClone(id))?;
    let r_ig = state.quat_at(qi).rot();
    let p_i = state.vec3_at(qi + 1);
    Ok(cam_pose_from_imu(cam, r_ig, p_i))
}

pub fn cam_pose_from_imu<T: Scalar>(cam: &CameraModel<T>, r_ig: M3<T>, p_i: V3<T>) -> CamPose<T> {
    let r_cg = cam.r_cam_imu.mul(r_ig);
    let p_c = p_i - r_cg.transpose().mul_vec(cam.p_imu_in_cam);
    CamPose { r_cg, p_c }
}

/// Feature position in the global frame from its anchored coordinates.
pub fn anchored_to_global<T: Scalar>(anchor: &CamPose<T>, f_a: V3<T>) -> V3<T> {
    anchor.r_cg.transpose().mul_vec(f_a) + anchor.p_c
}

pub fn global_to_anchored<T: Scalar>(anchor: &CamPose<T>, f_g: V3<T>) -> V3<T> {
    anchor.r_cg.mul_vec(f_g - anchor.p_c)
}

/// Linearized observation of an anchored feature from one clone:
/// residual plus Jacobian blocks over the observing clone, the anchor
/// clone and the feature coordinates.
pub struct ObsJacobians<T: Scalar> {
    pub residual: [T; 2],
    pub d_obs_pose: Mat<T>,  // 2x6 (theta, p) of observing clone
    pub d_anchor_pose: Mat<T>, // 2x6 of anchor clone
    pub d_feat: Mat<T>,      // 2x3 anchored feature
}

/// Linearize one pixel observation around the current estimates.
pub fn linearize_obs<T: Scalar>(
    cam: &CameraModel<T>,
    obs_pose_imu: (M3<T>, V3<T>),
    anchor_pose_imu: (M3<T>, V3<T>),
    f_anchor: V3<T>,
    uv: [T; 2],
) -> Result<ObsJacobians<T>, VisionError> {
    let (r_k, p_k) = obs_pose_imu;
    let (r_a, p_a) = anchor_pose_imu;
    let anchor = cam_pose_from_imu(cam, r_a, p_a);
    let f_g = anchored_to_global(&anchor, f_anchor);
    let w = r_k.mul_vec(f_g - p_k);
    let f_cam = cam.r_cam_imu.mul_vec(w) + cam.p_imu_in_cam;
    let px = cam.project(f_cam)?;
    let jp = cam.project_jacobian(f_cam); // 2x3

    // d f_cam / d (observing clone)
    let d_fc_dth = cam.r_cam_imu.mul(M3::skew(w)); // 2: R_CI [w]x
    let d_fc_dp = cam.r_cam_imu.mul(r_k).scale(-T::one());
    // d f_cam / d f_G
    let d_fc_dfg = cam.r_cam_imu.mul(r_k);
    // d f_G / d (anchor clone, anchored feature)
    let c = cam.r_cam_imu.transpose().mul_vec(f_anchor - cam.p_imu_in_cam);
    let d_fg_dth_a = r_a.transpose().mul(M3::skew(c)).scale(-T::one());
    let d_fg_dfa = r_a.transpose().mul(cam.r_cam_imu.transpose());

    let mul23 = |m: &M3<T>| -> Mat<T> {
        let mm = m.to_mat();
        jp.mul(&mm)
    };
    let mut d_obs_pose = Mat::zeros(2, 6);
    d_obs_pose.set_block(0, 0, &mul23(&d_fc_dth));
    d_obs_pose.set_block(0, 3, &mul23(&d_fc_dp));

    let j_fg = jp.mul(&d_fc_dfg.to_mat()); // 2x3
    let mut d_anchor_pose = Mat::zeros(2, 6);
    d_anchor_pose.set_block(0, 0, &j_fg.mul(&d_fg_dth_a.to_mat()));
    d_anchor_pose.set_block(0, 3, &j_fg); // d f_G / d p_A = I
    let d_feat = j_fg.mul(&d_fg_dfa.to_mat());

    Ok(ObsJacobians {
        residual: [uv[0] - px[0], uv[1] - px[1]],
        d_obs_pose,
        d_anchor_pose,
        d_feat,
    })
}

/// Linearize one observation of a global-frame feature (no anchor): used
/// by the initializer where features live in the gravity-aligned frame.
pub fn linearize_obs_global<T: Scalar>(
    cam: &CameraModel<T>,
    obs_pose_imu: (M3<T>, V3<T>),
    f_global: V3<T>,
    uv: [T; 2],
) -> Result<([T; 2], Mat<T>, Mat<T>), VisionError> {
    let (r_k, p_k) = obs_pose_imu;
    let w = r_k.mul_vec(f_global - p_k);
    let f_cam = cam.r_cam_imu.mul_vec(w) + cam.p_imu_in_cam;
    let px = cam.project(f_cam)?;
    let jp = cam.project_jacobian(f_cam);
    let d_fc_dth = cam.r_cam_imu.mul(M3::skew(w));
    let d_fc_dp = cam.r_cam_imu.mul(r_k).scale(-T::one());
    let d_fc_dfg = cam.r_cam_imu.mul(r_k);
    let mut d_pose = Mat::zeros(2, 6);
    d_pose.set_block(0, 0, &jp.mul(&d_fc_dth.to_mat()));
    d_pose.set_block(0, 3, &jp.mul(&d_fc_dp.to_mat()));
    let d_feat = jp.mul(&d_fc_dfg.to_mat());
    Ok(([uv[0] - px[0], uv[1] - px[1]], d_pose, d_feat))
}

/// Linear triangulation (ray midpoint form) refined by a few Gauss-Newton
/// steps on the normalized reprojection error.
pub struct Triangulation<T: Scalar> {
    pub point: V3<T>,
    pub cond: f64,
    pub max_parallax_rad: f64,
}

pub fn triangulate<T: Scalar>(
    poses: &[CamPose<T>],
    bearings_normalized: &[[T; 2]],
    parallax_floor_rad: f64,
) -> Result<Triangulation<T>, VisionError> {
    assert_eq!(poses.len(), bearings_normalized.len());
    if poses.len() < 2 {
        return Err(VisionError::LowParallax(0.0));
    }
    let dirs: Vec<V3<T>> = poses
        .iter()
        .zip(bearings_normalized)
        .map(|(pose, n)| {
            pose.r_cg
                .transpose()
                .mul_vec(V3::new(n[0], n[1], T::one()))
                .normalized()
        })
        .collect();
    let mut max_par = 0.0f64;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let c = dirs[i].dot(dirs[j]).f64().clamp(-1.0, 1.0);
            max_par = max_par.max(c.acos());
        }
    }
    if max_par < parallax_floor_rad {
        return Err(VisionError::LowParallax(max_par));
    }
    // sum (I - d d^T) f = sum (I - d d^T) p
    let mut a = M3::<T>::zero();
    let mut b = V3::<T>::zero();
    for (d, pose) in dirs.iter().zip(poses) {
        let m = M3::identity().sub(M3::outer(*d, *d));
        a = a.add(m);
        b = b + m.mul_vec(pose.p_c);
    }
    let (vals, _) = tri::eig3_symmetric(a);
    let cond = (vals[2].f64() / vals[0].f64().max(1e-300)).abs();
    let sol = tri::solve_spd(&a.to_mat(), &Mat::col_vec(&b.0))
        .map_err(|_| VisionError::LowParallax(max_par))?;
    let mut f = V3::new(sol[(0, 0)], sol[(1, 0)], sol[(2, 0)]);

    // Gauss-Newton on normalized reprojection error
    for _ in 0..5 {
        let mut jtj = M3::<T>::zero();
        let mut jtr = V3::<T>::zero();
        for (pose, n) in poses.iter().zip(bearings_normalized) {
            let fc = pose.r_cg.mul_vec(f - pose.p_c);
            let z = fc.z();
            if z.f64() <= 1e-6 {
                continue;
            }
            let inv_z = T::one() / z;
            let pred = [fc.x() * inv_z, fc.y() * inv_z];
            let res = [n[0] - pred[0], n[1] - pred[1]];
            // d(pred)/d f = [1/z 0 -x/z^2; 0 1/z -y/z^2] R
            for r in 0..2 {
                let mut grad = V3::<T>::zero();
                for c in 0..3 {
                    let pn = match (r, c) {
                        (0, 0) => inv_z,
                        (0, 2) => -pred[0] * inv_z,
                        (1, 1) => inv_z,
                        (1, 2) => -pred[1] * inv_z,
                        _ => T::zero(),
                    };
                    if pn != T::zero() {
                        let row = V3::new(pose.r_cg.0[c][0], pose.r_cg.0[c][1], pose.r_cg.0[c][2]);
                        grad = grad + row * pn;
                    }
                }
                jtj = jtj.add(M3::outer(grad, grad));
                jtr = jtr + grad * res[r];
            }
        }
        let lhs = jtj.to_mat().add(&Mat::identity(3).scale(T::of(1e-12)));
        match tri::solve_spd(&lhs, &Mat::col_vec(&jtr.0)) {
            Ok(step) => {
                let dv = V3::new(step[(0, 0)], step[(1, 0)], step[(2, 0)]);
                f = f + dv;
                if dv.norm().f64() < 1e-10 {
                    break;
                }
            }
            Err(_) => break,
        }
    }
    // depth must be positive in every observing camera
    for pose in poses {
        let z = pose.r_cg.mul_vec(f - pose.p_c).z();
        if z.f64() <= 0.0 {
            return Err(VisionError::NegativeDepth);
        }
    }
    Ok(Triangulation { point: f, cond, max_parallax_rad: max_par })
}

/// Nullspace projection of a stacked feature system: returns the
/// feature-free constraint on the state.
pub fn msckf_project<T: Scalar>(
    residual: &[T],
    h_x: &Mat<T>,
    h_f: &Mat<T>,
) -> Result<(Vec<T>, Mat<T>), VisionError> {
    let rows = residual.len();
    assert_eq!(h_x.rows(), rows);
    assert_eq!(h_f.rows(), rows);
    assert_eq!(h_f.cols(), 3);
    if rows < 5 {
        return Err(VisionError::LowParallax(rows as f64));
    }
    let split = tri::permuted_qr_lower(h_f).map_err(VisionError::Kernel)?;
    let gamma = split.q1.tr_mul_vec(residual);
    let big_gamma = split.q1.tr_mul(h_x);
    Ok((gamma, big_gamma))
}

/// Outcome of the delayed initialization split.
pub struct DelayedInit<T: Scalar> {
    /// Feature-free sub-system constraining the existing state.
    pub nullspace_meas: Option<LinearizedMeasurement<T>>,
    /// Correction applied to the triangulated feature estimate.
    pub feature_delta: V3<T>,
}

/// Initialize a new in-state feature from its stacked (whitened rows
/// implied by `sigmas`) linear system: the range part of the feature
/// Jacobian determines the feature and its square-root covariance block,
/// the nullspace part is returned for the batch update.
pub fn slam_delayed_init<T: Scalar>(
    state: &mut SqrtState<T>,
    feature_id: FeatureId,
    f_est: V3<T>,
    residual: &[T],
    h_x: &Mat<T>,
    h_f: &Mat<T>,
    sigmas: &[T],
    touched: Vec<std::ops::Range<usize>>,
) -> Result<DelayedInit<T>, VisionError> {
    let rows = residual.len();
    assert!(h_x.rows() == rows && h_f.rows() == rows && sigmas.len() == rows);
    assert_eq!(h_f.cols(), 3);
    let n = state.err_dim();
    assert_eq!(h_x.cols(), n);
    // whiten rows first so the projected noise stays isotropic
    let mut hfw = h_f.clone();
    let mut hxw = h_x.clone();
    let mut rw = residual.to_vec();
    for i in 0..rows {
        let inv = T::one() / sigmas[i];
        rw[i] = rw[i] * inv;
        for c in 0..3 {
            hfw[(i, c)] = hfw[(i, c)] * inv;
        }
        for c in 0..n {
            hxw[(i, c)] = hxw[(i, c)] * inv;
        }
    }
    let split = tri::permuted_qr_lower(&hfw).map_err(VisionError::Kernel)?;
    // range part: feature correction and covariance block
    let sigma_r = split.q2.tr_mul_vec(&rw);
    let j_nx = split.q2.tr_mul(&hxw); // 3 x n
    let j_inv_t = tri::solve_upper(&split.j.transpose(), &Mat::identity(3))
        .map_err(VisionError::Kernel)?; // J^{-T}, upper
    let delta = tri::solve_lower(&split.j, &Mat::col_vec(&sigma_r)).map_err(VisionError::Kernel)?;
    let feature_delta = V3::new(delta[(0, 0)], delta[(1, 0)], delta[(2, 0)]);
    let cross = state.factor().mul(&j_nx.transpose()).mul(&j_inv_t).scale(-T::one());
    let new_f = f_est + feature_delta;
    state
        .append_block(
            BlockKind::Lin(3),
            BlockTag::Feature(feature_id),
            &new_f.0,
            &cross,
            &j_inv_t,
        )
        .map_err(VisionError::Srf)?;
    // nullspace part feeds the stacked update (noise already whitened)
    let nullspace_meas = if rows > 3 {
        let gamma = split.q1.tr_mul_vec(&rw);
        let big_gamma = split.q1.tr_mul(&hxw);
        Some(LinearizedMeasurement {
            residual: gamma,
            jacobian: big_gamma,
            sigmas: vec![T::one(); rows - 3],
            touched,
        })
    } else {
        None
    };
    Ok(DelayedInit { nullspace_meas, feature_delta })
}

/// Re-anchor an in-state feature: re-express its mean in the new anchor
/// camera frame and transform its factor columns through the linearized
/// frame change. The factor stays upper triangular because only columns of
/// earlier blocks contribute.
pub fn anchor_change<T: Scalar>(
    state: &mut SqrtState<T>,
    cam: &CameraModel<T>,
    feature_id: FeatureId,
    old_anchor: CloneId,
    new_anchor: CloneId,
) -> Result<(), VisionError> {
    if old_anchor == new_anchor {
        return Ok(());
    }
    let feat_range = state
        .block_err_range(BlockTag::Feature(feature_id))
        .ok_or(VisionError::UnknownClone(-1))?;
    let old_range =
        state.block_err_range(BlockTag::Clone(old_anchor)).ok_or(VisionError::UnknownClone(old_anchor))?;
    let new_range =
        state.block_err_range(BlockTag::Clone(new_anchor)).ok_or(VisionError::UnknownClone(new_anchor))?;

    // feature mean in the new anchor frame
    let feat_block = state
        .blocks()
        .iter()
        .position(|b| b.tag == BlockTag::Feature(feature_id))
        .unwrap();
    let f_a1 = state.vec3_at(feat_block);
    let pose_a1 = clone_cam_pose(state, cam, old_anchor)?;
    let pose_a2 = clone_cam_pose(state, cam, new_anchor)?;
    let f_g = anchored_to_global(&pose_a1, f_a1);
    let f_a2 = global_to_anchored(&pose_a2, f_g);

    // jacobians of f_a2 wrt (old anchor pose, new anchor pose, f_a1)
    let idx_a1 = state.blocks().iter().position(|b| b.tag == BlockTag::Clone(old_anchor)).unwrap();
    let idx_a2 = state.blocks().iter().position(|b| b.tag == BlockTag::Clone(new_anchor)).unwrap();
    let r_a1 = state.quat_at(idx_a1).rot();
    let r_a2 = state.quat_at(idx_a2).rot();
    let p_i2 = state.vec3_at(idx_a2 + 1);

    // d f_G / d (A1 blocks)
    let c1 = cam.r_cam_imu.transpose().mul_vec(f_a1 - cam.p_imu_in_cam);
    let d_fg_dth1 = r_a1.transpose().mul(M3::skew(c1)).scale(-T::one());
    let d_fg_dfa1 = r_a1.transpose().mul(cam.r_cam_imu.transpose());
    // d f_A2 / d f_G and d (A2 blocks)
    let r_c2 = pose_a2.r_cg;
    let w2 = r_a2.mul_vec(f_g - p_i2);
    let d_fa2_dth2 = cam.r_cam_imu.mul(M3::skew(w2));
    let d_fa2_dp2 = r_c2.scale(-T::one());
    let d_fa2_dfg = r_c2;

    let j_th1 = d_fa2_dfg.mul(d_fg_dth1);
    let j_p1 = d_fa2_dfg; // d f_G / d p_A1 = I
    let j_f1 = d_fa2_dfg.mul(d_fg_dfa1);

    // new feature factor columns
    let u = state.factor().clone();
    let r = u.rows();
    let col = |range: &std::ops::Range<usize>, j: &M3<T>| -> Mat<T> {
        // U[:, range] * J^T for a 3-wide sub-range offset
        let sub = u.block(0, range.start, r, 3);
        sub.mul_tr(&j.to_mat())
    };
    let mut new_cols = col(&(old_range.start..old_range.start + 3), &j_th1)
        .add(&col(&(old_range.start + 3..old_range.start + 6), &j_p1))
        .add(&col(&(feat_range.start..feat_range.start + 3), &j_f1));
    new_cols = new_cols
        .add(&col(&(new_range.start..new_range.start + 3), &d_fa2_dth2))
        .add(&col(&(new_range.start + 3..new_range.start + 6), &d_fa2_dp2));

    let mut factor = state.factor().clone();
    for i in 0..r {
        for c in 0..3 {
            factor[(i, feat_range.start + c)] = new_cols[(i, c)];
        }
    }
    // the feature's own old columns leave a dense 3x3 diagonal sub-block;
    // one 3-row Householder pass restores strict triangularity
    let fs = feat_range.start;
    let tail = factor.block(fs, fs, 3, factor.cols() - fs);
    let tail_tri = tri::triangularize_block(&tail);
    factor.set_block(fs, fs, &tail_tri);
    state.replace_factor(factor);
    state.set_vec3_at(feat_block, f_a2);
    Ok(())
}

/// Stack gated measurement blocks into one batch update system.
pub fn assemble_update<T: Scalar>(
    blocks: &[LinearizedMeasurement<T>],
    state_dim: usize,
) -> LinearizedMeasurement<T> {
    let padded: Vec<LinearizedMeasurement<T>> = blocks
        .iter()
        .map(|b| {
            if b.jacobian.cols() == state_dim {
                b.clone()
            } else {
                let mut j = Mat::zeros(b.rows(), state_dim);
                j.set_block(0, 0, &b.jacobian);
                LinearizedMeasurement {
                    residual: b.residual.clone(),
                    jacobian: j,
                    sigmas: b.sigmas.clone(),
                    touched: b.touched.clone(),
                }
            }
        })
        .collect();
    LinearizedMeasurement::stack(&padded, state_dim)
}
