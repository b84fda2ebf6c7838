//! 3-vectors, 3x3 matrices, SO(3) maps and JPL-convention quaternions.
//!
//! Orientation states are stored as unit quaternions `q` (JPL order
//! `[x y z w]`) representing the global-to-local rotation; `rot(q)` returns
//! the corresponding direction-cosine matrix. The error-state retraction is
//! `q <- dq(dtheta) * q` with `rot(dq) ~ I - skew(dtheta)`.

use crate::mat::Mat;
use crate::scalar::Scalar;
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Copy, PartialEq, Debug, Default)]
pub struct V3<T>(pub [T; 3]);

impl<T: Scalar> V3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        V3([x, y, z])
    }

    pub fn zero() -> Self {
        V3([T::zero(); 3])
    }

    pub fn of(x: f64, y: f64, z: f64) -> Self {
        V3([T::of(x), T::of(y), T::of(z)])
    }

    #[inline]
    pub fn x(self) -> T {
        self.0[0]
    }
    #[inline]
    pub fn y(self) -> T {
        self.0[1]
    }
    #[inline]
    pub fn z(self) -> T {
        self.0[2]
    }

    pub fn dot(self, o: V3<T>) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(self, o: V3<T>) -> V3<T> {
        V3([
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        ])
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> V3<T> {
        let n = self.norm();
        if n == T::zero() {
            return self;
        }
        self * (T::one() / n)
    }

    pub fn map64(self) -> V3<f64> {
        V3([self.0[0].f64(), self.0[1].f64(), self.0[2].f64()])
    }

    pub fn cast<U: Scalar>(self) -> V3<U> {
        V3([U::of(self.0[0].f64()), U::of(self.0[1].f64()), U::of(self.0[2].f64())])
    }
}

impl<T: Scalar> Add for V3<T> {
    type Output = V3<T>;
    fn add(self, o: V3<T>) -> V3<T> {
        V3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<T: Scalar> Sub for V3<T> {
    type Output = V3<T>;
    fn sub(self, o: V3<T>) -> V3<T> {
        V3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<T: Scalar> Mul<T> for V3<T> {
    type Output = V3<T>;
    fn mul(self, s: T) -> V3<T> {
        V3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

impl<T: Scalar> Neg for V3<T> {
    type Output = V3<T>;
    fn neg(self) -> V3<T> {
        V3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct M3<T>(pub [[T; 3]; 3]);

impl<T: Scalar> M3<T> {
    pub fn zero() -> Self {
        M3([[T::zero(); 3]; 3])
    }

    pub fn identity() -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            m.0[i][i] = T::one();
        }
        m
    }

    pub fn from_rows(r0: V3<T>, r1: V3<T>, r2: V3<T>) -> Self {
        M3([r0.0, r1.0, r2.0])
    }

    pub fn skew(v: V3<T>) -> Self {
        let z = T::zero();
        M3([[z, -v.z(), v.y()], [v.z(), z, -v.x()], [-v.y(), v.x(), z]])
    }

    pub fn outer(a: V3<T>, b: V3<T>) -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = a.0[i] * b.0[j];
            }
        }
        m
    }

    pub fn transpose(self) -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = self.0[j][i];
            }
        }
        m
    }

    pub fn mul_vec(self, v: V3<T>) -> V3<T> {
        let mut out = [T::zero(); 3];
        for i in 0..3 {
            out[i] = self.0[i][0] * v.0[0] + self.0[i][1] * v.0[1] + self.0[i][2] * v.0[2];
        }
        V3(out)
    }

    pub fn mul(self, o: M3<T>) -> M3<T> {
        let mut m = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = T::zero();
                for k in 0..3 {
                    s = s + self.0[i][k] * o.0[k][j];
                }
                m.0[i][j] = s;
            }
        }
        m
    }

    pub fn scale(self, s: T) -> Self {
        let mut m = self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = m.0[i][j] * s;
            }
        }
        m
    }

    pub fn add(self, o: M3<T>) -> Self {
        let mut m = self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = m.0[i][j] + o.0[i][j];
            }
        }
        m
    }

    pub fn sub(self, o: M3<T>) -> Self {
        let mut m = self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = m.0[i][j] - o.0[i][j];
            }
        }
        m
    }

    pub fn to_mat(self) -> Mat<T> {
        Mat::from_fn(3, 3, |i, j| self.0[i][j])
    }

    pub fn max_abs(self) -> T {
        let mut m = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                m = m.max(self.0[i][j].abs());
            }
        }
        m
    }

    pub fn cast<U: Scalar>(self) -> M3<U> {
        let mut m = M3::<U>::zero();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = U::of(self.0[i][j].f64());
            }
        }
        m
    }
}

/// exp(skew(phi)): rotation by angle |phi| about phi.
pub fn so3_exp<T: Scalar>(phi: V3<T>) -> M3<T> {
    let theta = phi.norm();
    let k = M3::skew(phi);
    if theta.f64() < 1e-10 {
        // 2nd-order series keeps orthonormality to machine precision here
        return M3::identity().add(k).add(k.mul(k).scale(T::of(0.5)));
    }
    let a = theta.sin() / theta;
    let b = (T::one() - theta.cos()) / (theta * theta);
    M3::identity().add(k.scale(a)).add(k.mul(k).scale(b))
}

/// Inverse of [`so3_exp`]; returns phi with R = exp(skew(phi)).
pub fn so3_log<T: Scalar>(r: M3<T>) -> V3<T> {
    let tr = r.0[0][0] + r.0[1][1] + r.0[2][2];
    let cos = ((tr - T::one()) * T::of(0.5)).max(-T::one()).min(T::one());
    let theta = cos.acos();
    let v = V3::new(
        r.0[2][1] - r.0[1][2],
        r.0[0][2] - r.0[2][0],
        r.0[1][0] - r.0[0][1],
    );
    if theta.f64() < 1e-7 {
        return v * T::of(0.5);
    }
    if (theta.f64() - std::f64::consts::PI).abs() < 1e-7 {
        // near pi: extract axis from the symmetric part
        let mut axis = V3::zero();
        let mut best = T::zero();
        for i in 0..3 {
            let d = (r.0[i][i] + T::one()) * T::of(0.5);
            if d > best {
                best = d;
                let s = d.sqrt();
                let mut a = [T::zero(); 3];
                a[i] = s;
                for j in 0..3 {
                    if j != i {
                        a[j] = (r.0[i][j] + r.0[j][i]) * T::of(0.25) / s;
                    }
                }
                axis = V3(a);
            }
        }
        return axis.normalized() * theta;
    }
    v * (theta / (T::of(2.0) * theta.sin()))
}

/// Right Jacobian of SO(3) for the exp(skew(phi)) parameterization.
pub fn so3_right_jacobian<T: Scalar>(phi: V3<T>) -> M3<T> {
    let theta = phi.norm();
    let k = M3::skew(phi);
    if theta.f64() < 1e-8 {
        return M3::identity().sub(k.scale(T::of(0.5))).add(k.mul(k).scale(T::of(1.0 / 6.0)));
    }
    let t2 = theta * theta;
    let a = (T::one() - theta.cos()) / t2;
    let b = (theta - theta.sin()) / (t2 * theta);
    M3::identity().sub(k.scale(a)).add(k.mul(k).scale(b))
}

/// JPL unit quaternion, components [x y z w].
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Quat<T>(pub [T; 4]);

impl<T: Scalar> Quat<T> {
    pub fn identity() -> Self {
        Quat([T::zero(), T::zero(), T::zero(), T::one()])
    }

    pub fn new(x: T, y: T, z: T, w: T) -> Self {
        Quat([x, y, z, w])
    }

    pub fn vec(self) -> V3<T> {
        V3([self.0[0], self.0[1], self.0[2]])
    }

    pub fn w(self) -> T {
        self.0[3]
    }

    pub fn norm(self) -> T {
        (self.0[0] * self.0[0] + self.0[1] * self.0[1] + self.0[2] * self.0[2]
            + self.0[3] * self.0[3])
            .sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        let mut q = self;
        for i in 0..4 {
            q.0[i] = q.0[i] / n;
        }
        // keep the scalar part non-negative for a canonical representative
        if q.0[3] < T::zero() {
            for i in 0..4 {
                q.0[i] = -q.0[i];
            }
        }
        q
    }

    /// JPL product: rot(a * b) = rot(a) rot(b).
    pub fn mul(self, o: Quat<T>) -> Quat<T> {
        let (v1, w1) = (self.vec(), self.w());
        let (v2, w2) = (o.vec(), o.w());
        let v = v2 * w1 + v1 * w2 - v1.cross(v2);
        let w = w1 * w2 - v1.dot(v2);
        Quat([v.0[0], v.0[1], v.0[2], w])
    }

    pub fn conj(self) -> Quat<T> {
        Quat([-self.0[0], -self.0[1], -self.0[2], self.0[3]])
    }

    /// Direction-cosine matrix of this quaternion.
    pub fn rot(self) -> M3<T> {
        let v = self.vec();
        let w = self.w();
        let two = T::of(2.0);
        M3::identity()
            .scale(two * w * w - T::one())
            .sub(M3::skew(v).scale(two * w))
            .add(M3::outer(v, v).scale(two))
    }

    /// Quaternion with rot = exp(-skew(theta)): the increment applied on the
    /// left when a frame rotates by local angle theta.
    pub fn from_rotvec(theta: V3<T>) -> Self {
        let angle = theta.norm();
        let half = angle * T::of(0.5);
        if angle.f64() < 1e-12 {
            return Quat([
                theta.0[0] * T::of(0.5),
                theta.0[1] * T::of(0.5),
                theta.0[2] * T::of(0.5),
                T::one(),
            ])
            .normalized();
        }
        let axis = theta * (T::one() / angle);
        let s = half.sin();
        Quat([axis.0[0] * s, axis.0[1] * s, axis.0[2] * s, half.cos()]).normalized()
    }

    /// Small-angle error injection: returns dq(dtheta) * self.
    pub fn boxplus(self, dtheta: V3<T>) -> Self {
        Quat::from_rotvec(dtheta).mul(self).normalized()
    }

    /// Quaternion from a direction-cosine matrix (Shepperd's method).
    pub fn from_rot(r: M3<T>) -> Self {
        let m = r.0;
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr.f64() > 0.0 {
            let s = (tr + T::one()).sqrt() * T::of(2.0);
            Quat([
                (m[1][2] - m[2][1]) / s,
                (m[2][0] - m[0][2]) / s,
                (m[0][1] - m[1][0]) / s,
                s * T::of(0.25),
            ])
        } else if m[0][0].f64() > m[1][1].f64() && m[0][0].f64() > m[2][2].f64() {
            let s = (T::one() + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::of(2.0);
            Quat([
                s * T::of(0.25),
                (m[0][1] + m[1][0]) / s,
                (m[2][0] + m[0][2]) / s,
                (m[1][2] - m[2][1]) / s,
            ])
        } else if m[1][1].f64() > m[2][2].f64() {
            let s = (T::one() + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::of(2.0);
            Quat([
                (m[0][1] + m[1][0]) / s,
                s * T::of(0.25),
                (m[1][2] + m[2][1]) / s,
                (m[2][0] - m[0][2]) / s,
            ])
        } else {
            let s = (T::one() + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::of(2.0);
            Quat([
                (m[2][0] + m[0][2]) / s,
                (m[1][2] + m[2][1]) / s,
                s * T::of(0.25),
                (m[0][1] - m[1][0]) / s,
            ])
        };
        q.normalized()
    }

    pub fn cast<U: Scalar>(self) -> Quat<U> {
        Quat([
            U::of(self.0[0].f64()),
            U::of(self.0[1].f64()),
            U::of(self.0[2].f64()),
            U::of(self.0[3].f64()),
        ])
        .normalized()
    }
}

/// Angle in radians between two rotations.
pub fn rotation_angle<T: Scalar>(a: M3<T>, b: M3<T>) -> T {
    so3_log(a.mul(b.transpose())).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn quat_product_matches_rotation_product() {
        let qa = Quat::<f64>::from_rotvec(V3::of(0.3, -0.2, 0.5));
        let qb = Quat::<f64>::from_rotvec(V3::of(-0.1, 0.4, 0.2));
        let lhs = qa.mul(qb).rot();
        let rhs = qa.rot().mul(qb.rot());
        assert!(lhs.sub(rhs).max_abs() < 1e-14);
    }

    #[test]
    fn from_rotvec_matches_exp_convention() {
        let th = V3::of(0.2, 0.1, -0.3);
        let r_quat = Quat::<f64>::from_rotvec(th).rot();
        let r_exp = so3_exp(-th);
        assert!(r_quat.sub(r_exp).max_abs() < 1e-14);
    }

    #[test]
    fn log_inverts_exp() {
        for k in 0..20 {
            let s = k as f64 * 0.31;
            let phi: V3<f64> = V3::of(s.sin() * 1.3, (s * 0.7).cos(), s * 0.11 - 1.0);
            let back = so3_log(so3_exp(phi));
            assert!((back - phi).norm() < 1e-9 * (1.0 + phi.norm()));
        }
    }

    #[test]
    fn shepperd_round_trip() {
        for k in 0..30 {
            let s = k as f64;
            let q = Quat::<f64>::from_rotvec(V3::of(
                (s * 0.7).sin() * 3.0,
                (s * 0.3).cos() * 2.0,
                s * 0.2 - 3.0,
            ));
            let q2 = Quat::from_rot(q.rot());
            let dot: f64 = (0..4).map(|i| q.0[i] * q2.0[i]).sum();
            approx(dot.abs(), 1.0, 1e-12);
        }
    }

    #[test]
    fn right_jacobian_finite_difference() {
        let phi: V3<f64> = V3::of(0.4, -0.2, 0.7);
        let jr = so3_right_jacobian(phi);
        let h = 1e-6;
        for c in 0..3 {
            let mut dp = [0.0; 3];
            dp[c] = h;
            let rp = so3_exp(phi + V3(dp));
            let rm = so3_exp(phi - V3(dp));
            // exp(phi + d) ~ exp(phi) exp(Jr d)
            let fd = so3_log(so3_exp(phi).transpose().mul(rp)) * (1.0 / (2.0 * h))
                - so3_log(so3_exp(phi).transpose().mul(rm)) * (1.0 / (2.0 * h));
            let col = V3::new(jr.0[0][c], jr.0[1][c], jr.0[2][c]);
            assert!((fd - col).norm() < 1e-6);
        }
    }
}
