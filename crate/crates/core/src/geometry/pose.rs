//! Rigid poses and the SE(3) exponential/logarithm with their Jacobians.
//!
//! Tangent vectors are ordered `(omega, v)`: rotation first, then translation.
//! Poses are camera-to-world.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Below this rotation angle the exponential uses its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Quaternion given as `(w, x, y, z)`; renormalised.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, t: Vec3) -> Self {
        Self::new(
            UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
            t,
        )
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -(r_inv * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation * other.rotation;
        Pose::new(
            UnitQuaternion::from_quaternion(*q.quaternion()),
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Right-perturbation retraction `self * exp(delta)`.
    pub fn retract(&self, delta: &Vec6) -> Pose {
        self.compose(&se3_exp(delta))
    }

    pub fn log(&self) -> Vec6 {
        se3_log(self)
    }

    pub fn rotation_angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

#[inline]
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(omega: &Vec3) -> UnitQuaternion<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (w, s) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    UnitQuaternion::from_quaternion(Quaternion::new(w, s * omega.x, s * omega.y, s * omega.z))
}

/// Rotation vector of a unit quaternion, with angle in `[0, pi]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    let scale = if n < SMALL_ANGLE {
        // theta/n ~= 2/w (1 - n^2 / (3 w^2))
        2.0 / w * (1.0 - n * n / (3.0 * w * w))
    } else {
        2.0 * n.atan2(w) / n
    };
    v * scale
}

/// `(1 - cos t) / t^2` and `(t - sin t) / t^3`.
fn left_jacobian_coeffs(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    let a = if theta < SMALL_ANGLE {
        0.5 - t2 / 24.0
    } else {
        let s = (0.5 * theta).sin();
        2.0 * s * s / t2
    };
    let b = if theta < 1e-4 {
        1.0 / 6.0 - t2 / 120.0
    } else {
        (theta - theta.sin()) / (t2 * theta)
    };
    (a, b)
}

/// SO(3) left Jacobian.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let (a, b) = left_jacobian_coeffs(omega.norm());
    let w = hat(omega);
    Mat3::identity() + w * a + w * w * b
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let c = if theta < 1e-3 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - 1.0 / ((0.5 * theta).tan() * 2.0 * theta)
    };
    let w = hat(omega);
    Mat3::identity() - w * 0.5 + w * w * c
}

pub fn se3_exp(xi: &Vec6) -> Pose {
    let omega = Vec3::new(xi[0], xi[1], xi[2]);
    let v = Vec3::new(xi[3], xi[4], xi[5]);
    Pose::new(so3_exp(&omega), so3_left_jacobian(&omega) * v)
}

pub fn se3_log(pose: &Pose) -> Vec6 {
    let omega = so3_log(&pose.rotation);
    let v = so3_left_jacobian_inv(&omega) * pose.translation;
    Vec6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
}

/// Off-diagonal block of the SE(3) left Jacobian for tangent `(omega, v)`.
fn se3_q_block(omega: &Vec3, v: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < 1e-3 {
        (
            1.0 / 6.0 - t2 / 120.0,
            1.0 / 24.0 - t2 / 720.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let w = hat(omega);
    let p = hat(v);
    let wp = w * p;
    let pw = p * w;
    let wpw = w * pw;
    let ww = w * w;
    p * 0.5 + (wp + pw + wpw) * c1 + (ww * p + pw * w - wpw * 3.0) * c2 + (wpw * w + w * wpw) * c3
}

/// `log(exp(delta) * exp(xi)) ~= xi + J_l^{-1}(xi) delta`.
pub fn se3_left_jacobian_inv(xi: &Vec6) -> Mat6 {
    let omega = Vec3::new(xi[0], xi[1], xi[2]);
    let v = Vec3::new(xi[3], xi[4], xi[5]);
    let j_inv = so3_left_jacobian_inv(&omega);
    let q = se3_q_block(&omega, &v);
    let lower = -(j_inv * q * j_inv);
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&lower);
    m
}

/// `log(exp(xi) * exp(delta)) ~= xi + J_r^{-1}(xi) delta`.
pub fn se3_right_jacobian_inv(xi: &Vec6) -> Mat6 {
    se3_left_jacobian_inv(&(-xi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn pose_dist(a: &Pose, b: &Pose) -> f64 {
        let dq = a.rotation.quaternion().coords - b.rotation.quaternion().coords;
        let dq2 = a.rotation.quaternion().coords + b.rotation.quaternion().coords;
        dq.norm().min(dq2.norm()) + (a.translation - b.translation).norm()
    }

    fn random_pose(rng: &mut impl Rng, max_angle: f64) -> Pose {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        let t = Vec3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        Pose::new(so3_exp(&(axis * angle)), t)
    }

    #[test]
    fn log_identity_is_zero() {
        assert_eq!(se3_log(&Pose::identity()), Vec6::zeros());
        assert_eq!(se3_exp(&Vec6::zeros()), Pose::identity());
    }

    #[test]
    fn exp_pure_translation() {
        let p = se3_exp(&Vec6::new(0.0, 0.0, 0.0, 1.0, 2.0, 3.0));
        assert_abs_diff_eq!(p.translation, Vec3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.rotation_angle(), 0.0);
    }

    #[test]
    fn log_quarter_turn_about_z() {
        // V^{-1} for omega = (0,0,a): [[a/2 cot(a/2), a/2, 0], [-a/2, a/2 cot(a/2), 0], [0,0,1]]
        let a = FRAC_PI_2;
        let t = Vec3::new(1.0, -2.0, 0.5);
        let p = Pose::new(so3_exp(&Vec3::new(0.0, 0.0, a)), t);
        let xi = se3_log(&p);
        let k = 0.5 * a / (0.5 * a).tan();
        let v_expected = Vec3::new(k * t.x + 0.5 * a * t.y, -0.5 * a * t.x + k * t.y, t.z);
        assert_abs_diff_eq!(xi[2], a, epsilon = 1e-12);
        assert_abs_diff_eq!(xi[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(Vec3::new(xi[3], xi[4], xi[5]), v_expected, epsilon = 1e-12);
    }

    #[test]
    fn exp_log_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let p = random_pose(&mut rng, std::f64::consts::PI - 1e-6);
            let q = se3_exp(&se3_log(&p));
            worst = worst.max(pose_dist(&p, &q));
        }
        assert!(worst < 1e-9, "worst round trip error {worst}");
    }

    #[test]
    fn log_near_pi_is_stable() {
        let p = Pose::new(
            so3_exp(&Vec3::new(0.0, std::f64::consts::PI - 1e-7, 0.0)),
            Vec3::new(0.3, 0.2, 0.1),
        );
        let q = se3_exp(&se3_log(&p));
        assert!(pose_dist(&p, &q) < 1e-6);
    }

    #[test]
    fn exp_continuous_across_branch() {
        let dir = Vec3::new(0.3, -0.5, 0.8).normalize();
        let v = Vec3::new(0.4, 1.0, -2.0);
        let mk = |theta: f64| {
            let w = dir * theta;
            se3_exp(&Vec6::new(w.x, w.y, w.z, v.x, v.y, v.z))
        };
        let below = mk(SMALL_ANGLE * (1.0 - 1e-6));
        let above = mk(SMALL_ANGLE * (1.0 + 1e-6));
        assert!(pose_dist(&below, &above) < 1e-12);
    }

    #[test]
    fn group_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (a, b, c) = (
                random_pose(&mut rng, 3.0),
                random_pose(&mut rng, 3.0),
                random_pose(&mut rng, 3.0),
            );
            assert!(pose_dist(&((a * b) * c), &(a * (b * c))) < 1e-9);
            assert!(pose_dist(&(a * a.inverse()), &Pose::identity()) < 1e-9);
        }
    }

    fn finite_jacobian(f: impl Fn(&Vec6) -> Vec6, h: f64) -> Mat6 {
        let mut m = Mat6::zeros();
        for i in 0..6 {
            let mut e = Vec6::zeros();
            e[i] = h;
            let col = (f(&e) - f(&(-e))) / (2.0 * h);
            m.set_column(i, &col);
        }
        m
    }

    #[test]
    fn se3_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..20 {
            let max_angle = if i < 3 { 1e-5 } else { 2.5 };
            let xi = se3_log(&random_pose(&mut rng, max_angle));
            let x = se3_exp(&xi);
            let right = finite_jacobian(|d| se3_log(&(x * se3_exp(d))), 1e-6);
            let left = finite_jacobian(|d| se3_log(&(se3_exp(d) * x)), 1e-6);
            assert!((right - se3_right_jacobian_inv(&xi)).abs().max() < 1e-6);
            assert!((left - se3_left_jacobian_inv(&xi)).abs().max() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn exp_log_inverse_prop(
            wx in -1.8f64..1.8, wy in -1.8f64..1.8, wz in -1.8f64..1.8,
            vx in -5.0f64..5.0, vy in -5.0f64..5.0, vz in -5.0f64..5.0,
        ) {
            let xi = Vec6::new(wx, wy, wz, vx, vy, vz);
            prop_assume!(xi.fixed_rows::<3>(0).norm() < std::f64::consts::PI - 1e-6);
            let back = se3_log(&se3_exp(&xi));
            prop_assert!((back - xi).norm() < 1e-9);
        }

        #[test]
        fn compose_keeps_unit_norm(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
        ) {
            let p = se3_exp(&Vec6::new(a, b, c, 0.0, 0.0, 0.0));
            let q = p * p * p;
            prop_assert!((q.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
        }
    }
}
