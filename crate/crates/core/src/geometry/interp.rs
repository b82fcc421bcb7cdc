use nalgebra::{Quaternion, UnitQuaternion};

use super::pose::{Pose, Vec3};
use crate::error::{Error, Result};

/// Shortest-arc spherical interpolation, `frac` in [0, 1].
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, frac: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion().coords;
    let mut qb = b.quaternion().coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > 1.0 - 1e-12 {
        qa * (1.0 - frac) + qb * frac
    } else {
        let theta = dot.min(1.0).acos();
        let s = theta.sin();
        qa * (((1.0 - frac) * theta).sin() / s) + qb * ((frac * theta).sin() / s)
    };
    UnitQuaternion::from_quaternion(Quaternion::from(coords))
}

/// Linear translation and SLERP rotation between two timestamped poses.
pub fn interpolate_pose(p_a: &Pose, t_a: f64, p_b: &Pose, t_b: f64, t_query: f64) -> Result<Pose> {
    if !(t_a < t_b) {
        return Err(Error::invalid(format!("interpolation interval [{t_a}, {t_b}] is empty")));
    }
    if t_query < t_a || t_query > t_b {
        return Err(Error::OutOfRange {
            value: t_query,
            lo: t_a,
            hi: t_b,
        });
    }
    if t_query == t_a {
        return Ok(*p_a);
    }
    if t_query == t_b {
        return Ok(*p_b);
    }
    let f = (t_query - t_a) / (t_b - t_a);
    Ok(Pose::new(
        slerp(&p_a.rotation, &p_b.rotation, f),
        p_a.translation * (1.0 - f) + p_b.translation * f,
    ))
}

/// `R_i R_d^{-1} (x - T_d) + T_i` with `(R, T)` taken from the two poses as given.
///
/// With world-to-camera poses this maps a point in the sensor frame at `t_d`
/// to the sensor frame at `t_i`.
pub fn warp_depth(x_d: &Vec3, p_td: &Pose, p_ti: &Pose) -> Vec3 {
    p_ti.rotation * (p_td.rotation.inverse() * (x_d - p_td.translation)) + p_ti.translation
}
