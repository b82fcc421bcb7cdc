use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, Pose, Vec6};

/// How depth enters the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// One log-depth per pixel.
    #[default]
    PerPixel,
    /// One log-scale offset per frame applied to all its log-depths.
    FrameScale,
}

/// Whether all frames share one set of intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicsMode {
    #[default]
    Shared,
    PerFrame,
}

/// The optimization variable: per-frame poses, intrinsics and log-depths plus
/// per-edge alignment poses and log-scales.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub width: usize,
    pub height: usize,
    pub poses: Vec<Pose>,
    /// One entry when shared, otherwise one per frame.
    pub intrinsics: Vec<Intrinsics>,
    pub log_depths: Vec<Vec<f64>>,
    /// Pixels taking part in any loss term; fixed during optimization.
    pub valid: Vec<Vec<bool>>,
    /// Raw log-scales; the effective scale is centred so the product over edges is 1.
    pub edge_log_scales: Vec<f64>,
    pub edge_poses: Vec<Pose>,
}

impl GlobalState {
    /// Builds a state from depth maps; invalid depths are masked out and given depth 1.
    pub fn new(
        poses: Vec<Pose>,
        intrinsics: Vec<Intrinsics>,
        depths: &[DepthMap],
        edge_poses: Vec<Pose>,
    ) -> Result<Self> {
        let n = poses.len();
        if n == 0 {
            return Err(Error::invalid("state needs at least one frame"));
        }
        if depths.len() != n {
            return Err(Error::invalid(format!("{} depth maps for {n} frames", depths.len())));
        }
        if intrinsics.len() != 1 && intrinsics.len() != n {
            return Err(Error::invalid(format!(
                "{} intrinsics for {n} frames; expected 1 (shared) or {n}",
                intrinsics.len()
            )));
        }
        let (width, height) = (depths[0].width, depths[0].height);
        if depths.iter().any(|d| d.width != width || d.height != height) {
            return Err(Error::invalid("depth maps differ in size"));
        }
        let valid: Vec<Vec<bool>> = depths.iter().map(DepthMap::valid_mask).collect();
        let log_depths = depths
            .iter()
            .zip(&valid)
            .map(|(d, m)| {
                d.data
                    .iter()
                    .zip(m)
                    .map(|(&v, &ok)| if ok { v.ln() } else { 0.0 })
                    .collect()
            })
            .collect();
        let e = edge_poses.len();
        Ok(Self {
            width,
            height,
            poses,
            intrinsics,
            log_depths,
            valid,
            edge_log_scales: vec![0.0; e],
            edge_poses,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_poses.len()
    }

    pub fn intrinsics_mode(&self) -> IntrinsicsMode {
        if self.intrinsics.len() == 1 {
            IntrinsicsMode::Shared
        } else {
            IntrinsicsMode::PerFrame
        }
    }

    #[inline]
    pub fn intrinsics_group(&self, frame: usize) -> usize {
        if self.intrinsics.len() == 1 {
            0
        } else {
            frame
        }
    }

    #[inline]
    pub fn intrinsics_of(&self, frame: usize) -> &Intrinsics {
        &self.intrinsics[self.intrinsics_group(frame)]
    }

    /// Depth map of a frame; masked pixels are reported as 0 (invalid).
    pub fn depth(&self, frame: usize) -> DepthMap {
        let data = self.log_depths[frame]
            .iter()
            .zip(&self.valid[frame])
            .map(|(&l, &ok)| if ok { l.exp() } else { 0.0 })
            .collect();
        DepthMap {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Effective per-edge scales `exp(s_e - mean(s))`.
    pub fn edge_scales(&self) -> Vec<f64> {
        if self.edge_log_scales.is_empty() {
            return Vec::new();
        }
        let mean = self.edge_log_scales.iter().sum::<f64>() / self.edge_log_scales.len() as f64;
        self.edge_log_scales.iter().map(|s| (s - mean).exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.poses
            .iter()
            .chain(&self.edge_poses)
            .all(|p| p.translation.iter().all(|v| v.is_finite()) && p.rotation.coords.iter().all(|v| v.is_finite()))
            && self.log_depths.iter().flatten().all(|v| v.is_finite())
            && self.edge_log_scales.iter().all(|v| v.is_finite())
            && self
                .intrinsics
                .iter()
                .all(|k| k.fx.is_finite() && k.fy.is_finite())
    }

    /// Applies a tangent-space step laid out by `layout`.
    pub fn retract(&self, layout: &ParamLayout, delta: &[f64]) -> GlobalState {
        assert_eq!(delta.len(), layout.len(), "step length does not match layout");
        let mut out = self.clone();
        for (f, pose) in out.poses.iter_mut().enumerate() {
            let o = layout.pose_offset(f);
            *pose = pose.retract(&Vec6::from_column_slice(&delta[o..o + 6]));
        }
        if layout.optimize_focal {
            for (g, k) in out.intrinsics.iter_mut().enumerate() {
                let o = layout.focal_offset(g);
                k.fx *= delta[o].exp();
                k.fy *= delta[o + 1].exp();
            }
        }
        match layout.depth_mode {
            DepthMode::PerPixel => {
                for (f, ld) in out.log_depths.iter_mut().enumerate() {
                    let o = layout.depth_offset(f);
                    for (v, d) in ld.iter_mut().zip(&delta[o..o + layout.pixels]) {
                        *v += d;
                    }
                }
            }
            DepthMode::FrameScale => {
                for (f, ld) in out.log_depths.iter_mut().enumerate() {
                    let d = delta[layout.depth_offset(f)];
                    ld.iter_mut().for_each(|v| *v += d);
                }
            }
        }
        for (e, s) in out.edge_log_scales.iter_mut().enumerate() {
            *s += delta[layout.scale_offset(e)];
        }
        for (e, pose) in out.edge_poses.iter_mut().enumerate() {
            let o = layout.edge_pose_offset(e);
            *pose = pose.retract(&Vec6::from_column_slice(&delta[o..o + 6]));
        }
        out
    }
}

/// Position of every parameter block in the flat gradient/step vector.
///
/// Order: frame pose twists, focal log-scales (optional), depth parameters,
/// edge log-scales, edge pose twists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_frames: usize,
    pub n_intrinsics: usize,
    pub n_edges: usize,
    pub pixels: usize,
    pub optimize_focal: bool,
    pub depth_mode: DepthMode,
}

impl ParamLayout {
    pub fn new(state: &GlobalState, depth_mode: DepthMode, optimize_focal: bool) -> Self {
        Self {
            n_frames: state.n_frames(),
            n_intrinsics: state.intrinsics.len(),
            n_edges: state.n_edges(),
            pixels: state.width * state.height,
            optimize_focal,
            depth_mode,
        }
    }

    fn focal_block(&self) -> usize {
        if self.optimize_focal {
            2 * self.n_intrinsics
        } else {
            0
        }
    }

    fn depth_block(&self) -> usize {
        match self.depth_mode {
            DepthMode::PerPixel => self.n_frames * self.pixels,
            DepthMode::FrameScale => self.n_frames,
        }
    }

    pub fn pose_offset(&self, frame: usize) -> usize {
        6 * frame
    }

    pub fn focal_offset(&self, group: usize) -> usize {
        6 * self.n_frames + 2 * group
    }

    pub fn depth_offset(&self, frame: usize) -> usize {
        let base = 6 * self.n_frames + self.focal_block();
        match self.depth_mode {
            DepthMode::PerPixel => base + frame * self.pixels,
            DepthMode::FrameScale => base + frame,
        }
    }

    pub fn scale_offset(&self, edge: usize) -> usize {
        6 * self.n_frames + self.focal_block() + self.depth_block() + edge
    }

    pub fn edge_pose_offset(&self, edge: usize) -> usize {
        self.scale_offset(self.n_edges) + 6 * edge
    }

    pub fn len(&self) -> usize {
        self.edge_pose_offset(self.n_edges)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human-readable name of a flat index, for diagnostics.
    pub fn describe(&self, index: usize) -> String {
        let focal = 6 * self.n_frames;
        let depth = focal + self.focal_block();
        let scale = depth + self.depth_block();
        let epose = scale + self.n_edges;
        if index < focal {
            format!("pose[{}][{}]", index / 6, index % 6)
        } else if index < depth {
            format!("focal[{}][{}]", (index - focal) / 2, (index - focal) % 2)
        } else if index < scale {
            match self.depth_mode {
                DepthMode::PerPixel => format!(
                    "log_depth[{}][{}]",
                    (index - depth) / self.pixels,
                    (index - depth) % self.pixels
                ),
                DepthMode::FrameScale => format!("depth_scale[{}]", index - depth),
            }
        } else if index < epose {
            format!("edge_log_scale[{}]", index - scale)
        } else {
            format!("edge_pose[{}][{}]", (index - epose) / 6, (index - epose) % 6)
        }
    }
}
