use serde::{Deserialize, Serialize};

use super::pose::{Pose, Vec3};
use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Viewing ray with unit depth through pixel `u`.
    #[inline]
    pub fn ray(&self, u: (f64, f64)) -> Vec3 {
        Vec3::new((u.0 - self.cx) / self.fx, (u.1 - self.cy) / self.fy, 1.0)
    }

    pub fn unproject(&self, u: (f64, f64), depth: f64) -> Result<Vec3> {
        unproject(u, depth, self)
    }

    pub fn project(&self, p: &Vec3) -> Result<(f64, f64)> {
        project(p, self)
    }
}

pub fn unproject(u: (f64, f64), depth: f64, k: &Intrinsics) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::invalid(format!("depth must be positive, got {depth}")));
    }
    Ok(k.ray(u) * depth)
}

pub fn project(p: &Vec3, k: &Intrinsics) -> Result<(f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// H x W depths in meters; entries that are not finite and positive are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "depth buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid_at(&self, i: usize) -> bool {
        let d = self.data[i];
        d.is_finite() && d > 0.0
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.data.len()).map(|i| self.is_valid_at(i)).collect()
    }

    pub fn valid_count(&self) -> usize {
        (0..self.data.len()).filter(|&i| self.is_valid_at(i)).count()
    }
}

/// Which coordinate frame a pointmap is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameTag {
    World,
    Camera(usize),
}

/// Per-pixel 3D points with optional confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub confidence: Option<Vec<f64>>,
    pub frame: FrameTag,
}

impl Pointmap {
    #[inline]
    pub fn confidence_at(&self, i: usize) -> f64 {
        self.confidence.as_ref().map_or(1.0, |c| c[i])
    }

    /// Camera-frame pointmap of a depth map; invalid pixels get zero confidence.
    pub fn from_depth_camera(depth: &DepthMap, k: &Intrinsics, frame: usize) -> Pointmap {
        let mut points = Vec::with_capacity(depth.data.len());
        let mut conf = Vec::with_capacity(depth.data.len());
        for y in 0..depth.height {
            for x in 0..depth.width {
                let i = y * depth.width + x;
                if depth.is_valid_at(i) {
                    points.push(k.ray((x as f64, y as f64)) * depth.data[i]);
                    conf.push(1.0);
                } else {
                    points.push(Vec3::zeros());
                    conf.push(0.0);
                }
            }
        }
        Pointmap {
            width: depth.width,
            height: depth.height,
            points,
            confidence: Some(conf),
            frame: FrameTag::Camera(frame),
        }
    }

    pub fn transformed(&self, pose: &Pose, frame: FrameTag) -> Pointmap {
        Pointmap {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            frame,
            ..self.clone()
        }
    }
}

/// World-frame pointmap `P * unproject(u, D(u), K)`.
pub fn pointmap_from_depth(depth: &DepthMap, k: &Intrinsics, pose: &Pose) -> Pointmap {
    let cam = Pointmap::from_depth_camera(depth, k, 0);
    let conf = cam.confidence.clone();
    Pointmap {
        points: cam
            .points
            .iter()
            .zip(conf.as_ref().unwrap())
            .map(|(p, &c)| if c > 0.0 { pose.transform_point(p) } else { *p })
            .collect(),
        frame: FrameTag::World,
        confidence: conf,
        ..cam
    }
}

/// Camera-induced pixel displacement between two views.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub width: usize,
    pub height: usize,
    pub du: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl MotionField {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.du[i])
    }
}

/// Displacement of one pixel with depth `d` from view `(k_a, p_a)` to `(k_b, p_b)`.
#[inline]
pub fn pixel_motion(
    u: (f64, f64),
    d: f64,
    k_a: &Intrinsics,
    p_a: &Pose,
    k_b: &Intrinsics,
    p_b: &Pose,
) -> Option<[f64; 2]> {
    if !(d.is_finite() && d > 0.0) {
        return None;
    }
    let xw = p_a.transform_point(&(k_a.ray(u) * d));
    let y = p_b.inverse_transform_point(&xw);
    let (ux, uy) = project(&y, k_b).ok()?;
    Some([ux - u.0, uy - u.1])
}

pub fn motion_field(
    depth: &DepthMap,
    k_t: &Intrinsics,
    p_t: &Pose,
    k_tp: &Intrinsics,
    p_tp: &Pose,
) -> MotionField {
    let n = depth.width * depth.height;
    let mut du = vec![[0.0; 2]; n];
    let mut valid = vec![false; n];
    for y in 0..depth.height {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            if let Some(m) = pixel_motion((x as f64, y as f64), depth.data[i], k_t, p_t, k_tp, p_tp)
            {
                du[i] = m;
                valid[i] = true;
            }
        }
    }
    MotionField {
        width: depth.width,
        height: depth.height,
        du,
        valid,
    }
}
