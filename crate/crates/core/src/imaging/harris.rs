use serde::{Deserialize, Serialize};

use super::{gaussian_blur, image_gradient, Image, SnrMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarrisParams {
    pub k: f64,
    pub sigma: f64,
    pub nms_radius: usize,
    pub max_corners: usize,
    pub border_margin: usize,
    /// Responses below this fraction of the strongest response are dropped.
    pub relative_threshold: f64,
}

impl Default for HarrisParams {
    fn default() -> Self {
        Self {
            k: 0.04,
            sigma: 1.0,
            nms_radius: 5,
            max_corners: 64,
            border_margin: 7,
            relative_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub score: f64,
    pub snr: f64,
}

/// Corners sorted by descending score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CornerSet {
    pub corners: Vec<Corner>,
}

impl CornerSet {
    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }

    /// Attaches the SNR value at each corner location.
    pub fn with_snr(mut self, snr: &SnrMap) -> Self {
        for c in &mut self.corners {
            c.snr = snr.get(c.x, c.y);
        }
        self
    }
}

/// `det(M) - k trace(M)^2` of the Gaussian-weighted structure tensor.
pub fn harris_response(gray: &Image, k: f64, sigma: f64) -> Vec<f64> {
    let g = image_gradient(gray);
    let (w, h) = (gray.width(), gray.height());
    let mk = |f: &dyn Fn(usize) -> f64| {
        Image::new(w, h, 1, (0..w * h).map(f).collect()).expect("finite structure tensor")
    };
    let ixx = gaussian_blur(&mk(&|i| g.gx[i] * g.gx[i]), sigma);
    let iyy = gaussian_blur(&mk(&|i| g.gy[i] * g.gy[i]), sigma);
    let ixy = gaussian_blur(&mk(&|i| g.gx[i] * g.gy[i]), sigma);
    (0..w * h)
        .map(|i| {
            let (a, b, c) = (ixx.data()[i], iyy.data()[i], ixy.data()[i]);
            a * b - c * c - k * (a + b) * (a + b)
        })
        .collect()
}

pub fn harris_corners(gray: &Image, params: &HarrisParams) -> CornerSet {
    let (w, h) = (gray.width(), gray.height());
    let resp = harris_response(gray, params.k, params.sigma);
    let peak = resp.iter().cloned().fold(0.0_f64, f64::max);
    if peak <= 0.0 {
        return CornerSet::default();
    }
    let threshold = params.relative_threshold * peak;
    let m = params.border_margin;
    let r = params.nms_radius as isize;
    let r2 = r * r;

    let mut corners = Vec::new();
    for y in m..h.saturating_sub(m) {
        for x in m..w.saturating_sub(m) {
            let i = y * w + x;
            let v = resp[i];
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -r..=r {
                for dx in -r..=r {
                    if (dx == 0 && dy == 0) || dx * dx + dy * dy > r2 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    // ties go to the earlier pixel in raster order
                    if resp[j] > v || (resp[j] == v && j < i) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                corners.push(Corner {
                    x,
                    y,
                    score: v,
                    snr: 0.0,
                });
            }
        }
    }
    corners.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.y, a.x).cmp(&(b.y, b.x)))
    });
    corners.truncate(params.max_corners);
    CornerSet { corners }
}
