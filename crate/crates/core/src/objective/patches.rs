use serde::{Deserialize, Serialize};

use super::EventPatch;
use crate::error::{Error, Result};
use crate::events::{accumulate_patch, EventStream};
use crate::geometry::pixel_motion;
use crate::imaging::{harris_corners, image_gradient, HarrisParams, Image, SnrMap};
use crate::solver::GlobalState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchParams {
    pub half_width: usize,
    pub harris: HarrisParams,
    /// Patches whose motion vectors spread more than this (pixels) are dropped.
    pub max_motion_spread: f64,
}

impl Default for PatchParams {
    fn default() -> Self {
        Self {
            half_width: 7,
            harris: HarrisParams::default(),
            max_motion_spread: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchSelection {
    pub patches: Vec<EventPatch>,
    /// SNR at every detected corner, gated or not.
    pub corner_snrs: Vec<f64>,
    pub rejected_motion: usize,
}

/// Diagonal of the bounding box of the motion vectors over a patch, or `None`
/// if any pixel has no valid motion.
pub fn patch_motion_spread(
    state: &GlobalState,
    frame: usize,
    target: usize,
    center: (usize, usize),
    half_width: usize,
) -> Option<f64> {
    let (ka, kb) = (state.intrinsics_of(frame), state.intrinsics_of(target));
    let (pa, pb) = (&state.poses[frame], &state.poses[target]);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let h = half_width;
    for y in center.1 - h..=center.1 + h {
        for x in center.0 - h..=center.0 + h {
            let i = y * state.width + x;
            if !state.valid[frame][i] {
                return None;
            }
            let d = state.log_depths[frame][i].exp();
            let m = pixel_motion((x as f64, y as f64), d, ka, pa, kb, pb)?;
            for c in 0..2 {
                lo[c] = lo[c].min(m[c]);
                hi[c] = hi[c].max(m[c]);
            }
        }
    }
    Some((hi[0] - lo[0]).hypot(hi[1] - lo[1]))
}

/// Event patches at the Harris corners of every frame but the last.
///
/// Frame `t` observes the events in `[times[t], times[t+1])` and is predicted
/// with the motion from `t` to `t+1` under `state`.
pub fn build_event_patches(
    gray: &[Image],
    snr: &[SnrMap],
    events: &EventStream,
    frame_times: &[i64],
    state: &GlobalState,
    params: &PatchParams,
) -> Result<PatchSelection> {
    let n = state.n_frames();
    if gray.len() != n || snr.len() != n || frame_times.len() != n {
        return Err(Error::invalid(format!(
            "{} images, {} SNR maps and {} timestamps for {n} frames",
            gray.len(),
            snr.len(),
            frame_times.len()
        )));
    }
    if events.width() as usize != state.width || events.height() as usize != state.height {
        return Err(Error::invalid("event sensor size differs from frame size"));
    }
    let h = params.half_width;
    let harris = HarrisParams {
        border_margin: params.harris.border_margin.max(h),
        ..params.harris
    };
    let mut out = PatchSelection::default();
    for t in 0..n.saturating_sub(1) {
        if gray[t].channels() != 1 {
            return Err(Error::invalid("patch selection expects grayscale frames"));
        }
        let corners = harris_corners(&gray[t], &harris).with_snr(&snr[t]);
        let grad = image_gradient(&gray[t]);
        for c in &corners.corners {
            out.corner_snrs.push(c.snr);
            let spread = patch_motion_spread(state, t, t + 1, (c.x, c.y), h);
            if !spread.is_some_and(|s| s <= params.max_motion_spread) {
                out.rejected_motion += 1;
                continue;
            }
            let observed = accumulate_patch(
                events,
                (c.x as u32, c.y as u32),
                h as u32,
                frame_times[t],
                frame_times[t + 1],
            )?;
            let mut gradient = Vec::with_capacity(observed.len());
            for y in c.y - h..=c.y + h {
                for x in c.x - h..=c.x + h {
                    gradient.push(grad.at(x, y));
                }
            }
            out.patches.push(EventPatch {
                frame: t,
                target: t + 1,
                center: (c.x, c.y),
                half_width: h,
                observed,
                gradient,
                corner_snr: c.snr,
            });
        }
    }
    log::debug!(
        "{} event patches from {} corners ({} rejected by motion spread)",
        out.patches.len(),
        out.corner_snrs.len(),
        out.rejected_motion
    );
    Ok(out)
}
