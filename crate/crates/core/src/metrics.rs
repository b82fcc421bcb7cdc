//! Depth and trajectory error metrics.

use nalgebra::{Matrix3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Mat3, Pose, Vec3};

pub use crate::geometry::Trajectory;

/// Default timestamp association tolerance, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta_125: f64,
    pub rmse_log: f64,
}

/// Abs Rel, fraction with `max(p/g, g/p) < 1.25`, and RMSE of log depth over
/// jointly valid pixels; `scale_align` first multiplies `pred` by `median(gt)/median(pred)`.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, scale_align: bool) -> Result<DepthMetrics> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::invalid(format!(
            "depth maps differ in size: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let pairs: Vec<(f64, f64)> = (0..gt.data.len())
        .filter(|&i| pred.is_valid_at(i) && gt.is_valid_at(i))
        .map(|i| (pred.data[i], gt.data[i]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Degenerate("no jointly valid depth pixels".into()));
    }
    let scale = if scale_align {
        median(pairs.iter().map(|p| p.1).collect()) / median(pairs.iter().map(|p| p.0).collect())
    } else {
        1.0
    };
    let n = pairs.len() as f64;
    let (mut abs_rel, mut inliers, mut sq_log) = (0.0, 0usize, 0.0);
    for &(p, g) in &pairs {
        let p = p * scale;
        abs_rel += (p - g).abs() / g;
        // multiplied form so that an exact 1.25 ratio is not split by division rounding
        if p.max(g) < 1.25 * p.min(g) {
            inliers += 1;
        }
        sq_log += (p.ln() - g.ln()).powi(2);
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        delta_125: inliers as f64 / n,
        rmse_log: (sq_log / n).sqrt(),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_pose(&self, p: &Pose) -> Pose {
        let r = UnitQuaternion::from_matrix(&self.rotation);
        Pose::new(r * p.rotation, self.apply(&p.translation))
    }
}

/// Least-squares similarity (or rigid transform) taking `src` onto `dst`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::invalid("point sets differ in length"));
    }
    if src.len() < 3 {
        return Err(Error::Degenerate(format!("{} matched positions, need 3", src.len())));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        spread += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().cloned().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("matched positions are collinear".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    // singular values come unsorted from nalgebra; order them with U and V
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let perm = Matrix3::from_fn(|r, c| if idx[c] == r { 1.0 } else { 0.0 });
    let (u, v_t) = (u * perm, perm.transpose() * v_t);
    let d = Vec3::new(
        svd.singular_values[idx[0]],
        svd.singular_values[idx[1]],
        svd.singular_values[idx[2]],
    );
    let rotation = u * s * v_t;
    let scale = if with_scale {
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_s
    } else {
        1.0
    };
    Ok(Similarity {
        scale,
        rotation,
        translation: mu_d - rotation * mu_s * scale,
    })
}

/// Index pairs `(pred, gt)` matched by nearest timestamp within `tolerance`;
/// each ground-truth sample is used at most once.
pub fn associate(pred: &Trajectory, gt: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    let gt_times = gt.times();
    let mut used = vec![false; gt_times.len()];
    let mut out = Vec::new();
    for (i, (t, _)) in pred.samples().iter().enumerate() {
        let j = gt_times.partition_point(|g| g < t);
        let best = [j.checked_sub(1), (j < gt_times.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (gt_times[a] - t).abs().total_cmp(&(gt_times[b] - t).abs()));
        if let Some(b) = best {
            if (gt_times[b] - t).abs() <= tolerance && !used[b] {
                used[b] = true;
                out.push((i, b));
            }
        }
    }
    out
}

fn matched_positions(pred: &Trajectory, gt: &Trajectory, tol: f64) -> (Vec<(usize, usize)>, Vec<Vec3>, Vec<Vec3>) {
    let m = associate(pred, gt, tol);
    let p = m.iter().map(|&(i, _)| pred.samples()[i].1.translation).collect();
    let g = m.iter().map(|&(_, j)| gt.samples()[j].1.translation).collect();
    (m, p, g)
}

pub fn umeyama_align(pred: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<Similarity> {
    let (_, p, g) = matched_positions(pred, gt, ASSOCIATION_TOLERANCE);
    umeyama(&p, &g, with_scale)
}

/// Position RMSE after similarity alignment.
pub fn ate(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ate_with(pred, gt, ASSOCIATION_TOLERANCE, true)
}

pub fn ate_with(pred: &Trajectory, gt: &Trajectory, tolerance: f64, with_scale: bool) -> Result<f64> {
    let (_, p, g) = matched_positions(pred, gt, tolerance);
    if p.len() < 3 {
        return Err(Error::Degenerate(format!("{} matched poses, need 3", p.len())));
    }
    let sim = umeyama(&p, &g, with_scale)?;
    let sq: f64 = p.iter().zip(&g).map(|(a, b)| (sim.apply(a) - b).norm_squared()).sum();
    Ok((sq / p.len() as f64).sqrt())
}

/// Relative pose error over `delta` matched samples: (translation RMSE, rotation RMSE in degrees).
pub fn rpe(pred: &Trajectory, gt: &Trajectory, delta: usize) -> Result<(f64, f64)> {
    if delta == 0 {
        return Err(Error::invalid("rpe delta must be >= 1"));
    }
    let m = associate(pred, gt, ASSOCIATION_TOLERANCE);
    if m.len() < delta + 1 {
        return Err(Error::Degenerate(format!(
            "{} matched poses, need {} for delta {delta}",
            m.len(),
            delta + 1
        )));
    }
    let (ps, gs) = (pred.samples(), gt.samples());
    let (mut st, mut sr) = (0.0, 0.0);
    let n = m.len() - delta;
    for k in 0..n {
        let (pi, gi) = m[k];
        let (pj, gj) = m[k + delta];
        let rel_p = ps[pi].1.inverse().compose(&ps[pj].1);
        let rel_g = gs[gi].1.inverse().compose(&gs[gj].1);
        let e = rel_g.inverse().compose(&rel_p);
        st += e.translation.norm_squared();
        sr += e.rotation_angle().to_degrees().powi(2);
    }
    Ok(((st / n as f64).sqrt(), (sr / n as f64).sqrt()))
}

/// Everything the evaluation command reports.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: Option<f64>,
    pub delta_125: Option<f64>,
    pub rmse_log: Option<f64>,
    pub ate: Option<f64>,
    pub rpe_trans: Option<f64>,
    pub rpe_rot: Option<f64>,
}
