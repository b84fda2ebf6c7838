//! IMU kinematics: preintegration over an interval, discrete mean
//! propagation, and the error-state transition / process-noise blocks the
//! filter consumes.
//!
//! Error-state convention on the navigation block [dtheta dp dv dbg dba]:
//! `R_true = (I - skew(dtheta)) R_hat`, additive elsewhere. The
//! preintegrated quantities follow the discrete model
//!
//! ```text
//! R_{k+1} = dR R_k
//! p_{k+1} = p_k + v_k dT + 1/2 g dT^2 + R_k^T alpha
//! v_{k+1} = v_k + g dT + R_k^T beta
//! ```
//!
//! with `dR`, `alpha`, `beta` integrated from bias-corrected samples by the
//! trapezoidal rule.

use crate::error::ImuError;
use crate::geom::{so3_exp, so3_right_jacobian, Quat, M3, V3};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::srf::NAV_ERR_DIM;
use crate::tri;

/// One inertial sample; raw sensor streams stay in f64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: V3<f64>,
    pub accel: V3<f64>,
}

/// Continuous-time noise densities plus random-walk intensities.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec {
    pub sigma_g: f64,
    pub sigma_a: f64,
    pub sigma_wg: f64,
    pub sigma_wa: f64,
}

impl NoiseSpec {
    pub fn assert_valid(&self) {
        assert!(
            self.sigma_g > 0.0 && self.sigma_a > 0.0 && self.sigma_wg > 0.0 && self.sigma_wa > 0.0,
            "noise densities must be strictly positive"
        );
    }
}

/// Navigation state block.
#[derive(Clone, Copy, Debug)]
pub struct NavState<T: Scalar> {
    /// Global-to-IMU orientation.
    pub q: Quat<T>,
    pub p: V3<T>,
    pub v: V3<T>,
    pub bg: V3<T>,
    pub ba: V3<T>,
}

impl<T: Scalar> NavState<T> {
    pub fn identity() -> Self {
        NavState {
            q: Quat::identity(),
            p: V3::zero(),
            v: V3::zero(),
            bg: V3::zero(),
            ba: V3::zero(),
        }
    }

    /// Mean-vector layout used by the square-root state: [q p v bg ba].
    pub fn to_mean(&self) -> Vec<T> {
        let mut m = Vec::with_capacity(16);
        m.extend_from_slice(&self.q.0);
        m.extend_from_slice(&self.p.0);
        m.extend_from_slice(&self.v.0);
        m.extend_from_slice(&self.bg.0);
        m.extend_from_slice(&self.ba.0);
        m
    }

    pub fn from_mean(m: &[T]) -> Self {
        NavState {
            q: Quat([m[0], m[1], m[2], m[3]]).normalized(),
            p: V3([m[4], m[5], m[6]]),
            v: V3([m[7], m[8], m[9]]),
            bg: V3([m[10], m[11], m[12]]),
            ba: V3([m[13], m[14], m[15]]),
        }
    }

    pub fn cast<U: Scalar>(&self) -> NavState<U> {
        NavState {
            q: self.q.cast(),
            p: self.p.cast(),
            v: self.v.cast(),
            bg: self.bg.cast(),
            ba: self.ba.cast(),
        }
    }
}

/// Known gravity in the global frame.
#[derive(Clone, Copy, Debug)]
pub struct Gravity<T: Scalar>(pub V3<T>);

impl<T: Scalar> Gravity<T> {
    pub fn standard() -> Self {
        Gravity(V3::of(0.0, 0.0, -9.81))
    }

    pub fn magnitude(&self) -> T {
        self.0.norm()
    }
}

/// Preintegrated relative motion over one interval, with bias Jacobians
/// and the square-root discrete process-noise block.
#[derive(Clone, Debug)]
pub struct Preintegration<T: Scalar> {
    /// Relative rotation I_{k+1} <- I_k.
    pub delta_r: M3<T>,
    /// Double integral of rotated specific force (in I_k).
    pub alpha: V3<T>,
    /// Integral of rotated specific force (in I_k).
    pub beta: V3<T>,
    pub dt: f64,
    /// d(dtheta_{k+1}) / d(bg).
    pub j_theta_bg: M3<T>,
    pub j_alpha_bg: M3<T>,
    pub j_alpha_ba: M3<T>,
    pub j_beta_bg: M3<T>,
    pub j_beta_ba: M3<T>,
    /// Upper-triangular factor of the 9x9 preintegration noise covariance
    /// over [dtheta, dalpha, dbeta].
    pub noise9_sqrt: Mat<T>,
    /// Random-walk std-devs already discretized over the interval.
    pub walk_sigma_g: T,
    pub walk_sigma_a: T,
}

/// Trapezoidal preintegration of bias-corrected samples with first-order
/// noise and bias-Jacobian propagation.
pub fn preintegrate<T: Scalar>(
    samples: &[ImuSample],
    bg: V3<T>,
    ba: V3<T>,
    noise: &NoiseSpec,
) -> Result<Preintegration<T>, ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::EmptyBuffer);
    }
    for i in 1..samples.len() {
        if samples[i].t <= samples[i - 1].t {
            return Err(ImuError::NonMonotonicTimestamps(i));
        }
    }
    let mut d = M3::<T>::identity(); // I_k -> I_i
    let mut alpha = V3::<T>::zero();
    let mut beta = V3::<T>::zero();
    let mut j_theta_bg = M3::<T>::zero();
    let mut j_alpha_bg = M3::<T>::zero();
    let mut j_alpha_ba = M3::<T>::zero();
    let mut j_beta_bg = M3::<T>::zero();
    let mut j_beta_ba = M3::<T>::zero();
    // sqrt factor of the 9x9 noise covariance, grown by QR stacking
    let mut nsq = Mat::<T>::zeros(9, 9);

    for w in samples.windows(2) {
        let dt_f = w[1].t - w[0].t;
        let dt = T::of(dt_f);
        let w_mid = (w[0].gyro + w[1].gyro).cast::<T>() * T::of(0.5) - bg;
        let f0 = w[0].accel.cast::<T>() - ba;
        let f1 = w[1].accel.cast::<T>() - ba;

        let step_vec = -w_mid * dt;
        let dstep = so3_exp(step_vec);
        let jr = so3_right_jacobian(step_vec);
        let d_next = dstep.mul(d);

        let d0t = d.transpose();
        let d1t = d_next.transpose();
        let g0 = d0t.mul_vec(f0);
        let g1 = d1t.mul_vec(f1);
        let f_mid = (g0 + g1) * T::of(0.5);

        // trapezoid on the velocity integral; the double integral uses the
        // exact weights for a linearly varying integrand
        let alpha_next =
            alpha + beta * dt + (g0 * T::of(2.0) + g1) * (dt * dt * T::of(1.0 / 6.0));
        let beta_next = beta + f_mid * dt;

        // rotation-error sensitivity: dtheta_{i+1} = dstep dtheta_i
        //   - dstep Jr dt (dbg + n_g)
        let a_rot = dstep;
        let b_rot = dstep.mul(jr).scale(-dt);

        // accel-error sensitivity through both endpoint rotations
        let s0 = d0t.mul(M3::skew(f0)).scale(-T::of(0.5));
        let s1 = d1t.mul(M3::skew(f1)).scale(-T::of(0.5));
        // d(f_mid)/d(dtheta_i) = s0 + s1 * a_rot ; d/d(n_g) via s1 * b_rot
        let df_dth = s0.add(s1.mul(a_rot));
        let df_dng = s1.mul(b_rot);
        let df_dba = d0t.add(d1t).scale(-T::of(0.5));

        // bias Jacobian recursion; rotation sensitivity enters f through
        // both endpoints and the new increment
        let df_dbg = df_dth.mul(j_theta_bg).add(s1.mul(b_rot));

        j_alpha_bg = j_alpha_bg
            .add(j_beta_bg.scale(dt))
            .add(df_dbg.scale(dt * dt * T::of(0.5)));
        j_beta_bg = j_beta_bg.add(df_dbg.scale(dt));
        j_alpha_ba = j_alpha_ba
            .add(j_beta_ba.scale(dt))
            .add(df_dba.scale(dt * dt * T::of(0.5)));
        j_beta_ba = j_beta_ba.add(df_dba.scale(dt));
        j_theta_bg = a_rot.mul(j_theta_bg).add(b_rot);

        // noise propagation: x = [dtheta dalpha dbeta], inputs [n_g n_a]
        let mut phi9 = Mat::<T>::zeros(9, 9);
        phi9.set_block(0, 0, &a_rot.to_mat());
        phi9.set_block(3, 0, &df_dth.scale(dt * dt * T::of(0.5)).to_mat());
        phi9.set_block(3, 3, &M3::identity().to_mat());
        phi9.set_block(3, 6, &M3::identity().scale(dt).to_mat());
        phi9.set_block(6, 0, &df_dth.scale(dt).to_mat());
        phi9.set_block(6, 6, &M3::identity().to_mat());
        let mut g9 = Mat::<T>::zeros(9, 6);
        g9.set_block(0, 0, &b_rot.to_mat());
        g9.set_block(3, 0, &df_dng.scale(dt * dt * T::of(0.5)).to_mat());
        g9.set_block(3, 3, &df_dba.scale(dt * dt * T::of(0.5)).to_mat());
        g9.set_block(6, 0, &df_dng.scale(dt).to_mat());
        g9.set_block(6, 3, &df_dba.scale(dt).to_mat());
        // discrete white noise std per channel
        let sg = T::of(noise.sigma_g / dt_f.sqrt());
        let sa = T::of(noise.sigma_a / dt_f.sqrt());
        let mut wsq = Mat::<T>::zeros(6, 9);
        for r in 0..6 {
            let s = if r < 3 { sg } else { sa };
            for c in 0..9 {
                wsq[(r, c)] = g9[(c, r)] * s;
            }
        }
        let stacked = wsq.vstack(&nsq.mul_tr(&phi9));
        nsq = tri::qr_triangularize(&stacked).into_mat();

        d = d_next;
        alpha = alpha_next;
        beta = beta_next;
    }

    let dt_total = samples.last().unwrap().t - samples[0].t;
    Ok(Preintegration {
        delta_r: d,
        alpha,
        beta,
        dt: dt_total,
        j_theta_bg,
        j_alpha_bg,
        j_alpha_ba,
        j_beta_bg,
        j_beta_ba,
        noise9_sqrt: nsq,
        walk_sigma_g: T::of(noise.sigma_wg * dt_total.sqrt()),
        walk_sigma_a: T::of(noise.sigma_wa * dt_total.sqrt()),
    })
}

impl<T: Scalar> Preintegration<T> {
    /// Compose two consecutive intervals into one.
    pub fn compose(&self, later: &Preintegration<T>) -> Preintegration<T> {
        let dt2 = T::of(later.dt);
        Preintegration {
            delta_r: later.delta_r.mul(self.delta_r),
            alpha: self.alpha + self.beta * dt2 + self.delta_r.transpose().mul_vec(later.alpha),
            beta: self.beta + self.delta_r.transpose().mul_vec(later.beta),
            dt: self.dt + later.dt,
            // jacobians/noise are not needed on composed intervals here
            j_theta_bg: M3::zero(),
            j_alpha_bg: M3::zero(),
            j_alpha_ba: M3::zero(),
            j_beta_bg: M3::zero(),
            j_beta_ba: M3::zero(),
            noise9_sqrt: Mat::zeros(9, 9),
            walk_sigma_g: T::zero(),
            walk_sigma_a: T::zero(),
        }
    }
}

/// Noise-free discrete mean propagation.
pub fn propagate_mean<T: Scalar>(
    x: &NavState<T>,
    preint: &Preintegration<T>,
    gravity: &Gravity<T>,
) -> NavState<T> {
    let dt = T::of(preint.dt);
    let r_k = x.q.rot();
    let r_kt = r_k.transpose();
    let g = gravity.0;
    let q_next = Quat::from_rot(preint.delta_r).mul(x.q).normalized();
    NavState {
        q: q_next,
        p: x.p + x.v * dt + g * (dt * dt * T::of(0.5)) + r_kt.mul_vec(preint.alpha),
        v: x.v + g * dt + r_kt.mul_vec(preint.beta),
        bg: x.bg,
        ba: x.ba,
    }
}

/// Error-state transition matrix and square-root process noise for one
/// propagation step.
pub fn transition_blocks<T: Scalar>(
    x: &NavState<T>,
    preint: &Preintegration<T>,
) -> (Mat<T>, Mat<T>) {
    let dt = T::of(preint.dt);
    let r_kt = x.q.rot().transpose();
    let mut phi = Mat::<T>::zeros(NAV_ERR_DIM, NAV_ERR_DIM);
    // theta row
    phi.set_block(0, 0, &preint.delta_r.to_mat());
    phi.set_block(0, 9, &preint.j_theta_bg.to_mat());
    // p row
    phi.set_block(3, 0, &r_kt.mul(M3::skew(preint.alpha)).scale(-T::one()).to_mat());
    phi.set_block(3, 3, &M3::identity().to_mat());
    phi.set_block(3, 6, &M3::identity().scale(dt).to_mat());
    phi.set_block(3, 9, &r_kt.mul(preint.j_alpha_bg).to_mat());
    phi.set_block(3, 12, &r_kt.mul(preint.j_alpha_ba).to_mat());
    // v row
    phi.set_block(6, 0, &r_kt.mul(M3::skew(preint.beta)).scale(-T::one()).to_mat());
    phi.set_block(6, 6, &M3::identity().to_mat());
    phi.set_block(6, 9, &r_kt.mul(preint.j_beta_bg).to_mat());
    phi.set_block(6, 12, &r_kt.mul(preint.j_beta_ba).to_mat());
    // biases
    for i in 9..15 {
        phi[(i, i)] = T::one();
    }

    // map preint noise [theta alpha beta] into nav error rows, append walk
    let mut w_sqrt = Mat::<T>::zeros(NAV_ERR_DIM, NAV_ERR_DIM);
    // columns transform: [theta, p, v] rows of noise get [I, R^T, R^T]
    let n9 = &preint.noise9_sqrt;
    for r in 0..9 {
        // theta columns pass through
        for c in 0..3 {
            w_sqrt[(r, c)] = n9[(r, c)];
        }
        // p block: (noise alpha) mapped by R^T => columns 3..6
        let na = V3::new(n9[(r, 3)], n9[(r, 4)], n9[(r, 5)]);
        let nb = V3::new(n9[(r, 6)], n9[(r, 7)], n9[(r, 8)]);
        let pa = r_kt.mul_vec(na);
        let pb = r_kt.mul_vec(nb);
        for c in 0..3 {
            w_sqrt[(r, 3 + c)] = pa.0[c];
            w_sqrt[(r, 6 + c)] = pb.0[c];
        }
    }
    for c in 0..3 {
        w_sqrt[(9 + c, 9 + c)] = preint.walk_sigma_g;
        w_sqrt[(12 + c, 12 + c)] = preint.walk_sigma_a;
    }
    (phi, w_sqrt)
}

/// Local-frame propagation used by the initializer: the global frame is
/// anchored to the first IMU pose, gravity expressed locally.
pub fn propagate_local<T: Scalar>(
    v0: V3<T>,
    g_local: V3<T>,
    preint: &Preintegration<T>,
) -> (M3<T>, V3<T>, V3<T>) {
    let dt = T::of(preint.dt);
    let r = preint.delta_r; // I_k <- I_0
    let p = v0 * dt + g_local * (dt * dt * T::of(0.5)) + preint.alpha;
    let v = v0 + g_local * dt + preint.beta;
    (r, p, v)
}
