//! Pixel motion with its reverse-mode derivative.
//!
//! Chain: `Xc = d * ray(u)`, `Xw = R_a Xc + T_a`, `Y = R_b^T (Xw - T_b)`,
//! `u' = pi_b(Y)`; perturbations are right-multiplied twists `(omega, v)`.

use crate::geometry::{Intrinsics, Pose, Vec3, Vec6};

pub(crate) struct MotionEval {
    pub xc: Vec3,
    pub y: Vec3,
    pub du: [f64; 2],
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct MotionGrad {
    pub log_depth: f64,
    pub pose_a: Vec6,
    pub pose_b: Vec6,
    pub focal_a: [f64; 2],
    pub focal_b: [f64; 2],
}

#[inline]
pub(crate) fn eval(
    u: (f64, f64),
    log_depth: f64,
    k_a: &Intrinsics,
    p_a: &Pose,
    k_b: &Intrinsics,
    p_b: &Pose,
) -> Option<MotionEval> {
    let xc = k_a.ray(u) * log_depth.exp();
    let xw = p_a.transform_point(&xc);
    let y = p_b.inverse_transform_point(&xw);
    if !(y.z > 0.0) {
        return None;
    }
    let ux = k_b.fx * y.x / y.z + k_b.cx;
    let uy = k_b.fy * y.y / y.z + k_b.cy;
    Some(MotionEval {
        xc,
        y,
        du: [ux - u.0, uy - u.1],
    })
}

#[inline]
pub(crate) fn backprop(
    m: &MotionEval,
    g: [f64; 2],
    k_b: &Intrinsics,
    p_a: &Pose,
    p_b: &Pose,
) -> MotionGrad {
    let y = &m.y;
    let iz = 1.0 / y.z;
    let gy = Vec3::new(
        k_b.fx * iz * g[0],
        k_b.fy * iz * g[1],
        -(k_b.fx * y.x * g[0] + k_b.fy * y.y * g[1]) * iz * iz,
    );
    let gw = p_b.rotation * gy;
    let ga = p_a.rotation.inverse_transform_vector(&gw);
    let w_a = m.xc.cross(&ga);
    let w_b = gy.cross(y);
    MotionGrad {
        log_depth: ga.dot(&m.xc),
        pose_a: Vec6::new(w_a.x, w_a.y, w_a.z, ga.x, ga.y, ga.z),
        pose_b: Vec6::new(w_b.x, w_b.y, w_b.z, -gy.x, -gy.y, -gy.z),
        focal_a: [-m.xc.x * ga.x, -m.xc.y * ga.y],
        focal_b: [g[0] * k_b.fx * y.x * iz, g[1] * k_b.fy * y.y * iz],
    }
}
