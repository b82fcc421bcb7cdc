//! Classical image operations: enhancement, SNR map, gradients, hole filling
//! and SNR-weighted feature fusion. Harris corners live in [`harris`].

mod harris;

pub use harris::{harris_corners, harris_response, Corner, CornerSet, HarrisParams};

use crate::error::{Error, Result};

/// H x W x C image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Single-channel image from a closure over `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Value with replicate padding outside the image.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    /// Bilinear sample of channel `c` at continuous coordinates (replicate border).
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let v00 = self.get_clamped(xi, yi, c);
        let v10 = self.get_clamped(xi + 1, yi, c);
        let v01 = self.get_clamped(xi, yi + 1, c);
        let v11 = self.get_clamped(xi + 1, yi + 1, c);
        (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
    }

    fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rec.601 luma for 3-channel input; 1-channel input is returned as is.
    pub fn to_gray(&self) -> Image {
        match self.channels {
            1 => self.clone(),
            3 => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
                    .collect();
                Image {
                    width: self.width,
                    height: self.height,
                    channels: 1,
                    data,
                }
            }
            c => {
                // generic fallback: channel mean
                let data = self
                    .data
                    .chunks_exact(c)
                    .map(|px| px.iter().sum::<f64>() / c as f64)
                    .collect();
                Image {
                    width: self.width,
                    height: self.height,
                    channels: 1,
                    data,
                }
            }
        }
    }

    /// Per-pixel maximum over channels.
    pub fn max_channel(&self) -> Image {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Multiplies every value by `s`.
    pub fn scaled(&self, s: f64) -> Image {
        Image {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

/// Per-pixel reliability `mean / (|I - mean| + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub epsilon: f64,
}

impl SnrMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// H' x W' x C' feature tensor, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "feature buffer has {} values, expected {}",
                values.len(),
                width * height * channels
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }
}

/// Spatial gradient of a single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

impl GradientField {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.gx[i], self.gy[i])
    }
}

/// `clamp(image * illumination, 0, 1)` with the illumination broadcast over channels.
pub fn enhance(image: &Image, illumination: &Image) -> Result<Image> {
    if !image.same_size(illumination) || illumination.channels != 1 {
        return Err(Error::invalid(format!(
            "illumination {}x{}x{} does not match image {}x{}",
            illumination.width, illumination.height, illumination.channels, image.width, image.height
        )));
    }
    if illumination.data.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("illumination map must be strictly positive"));
    }
    let c = image.channels;
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| (v * illumination.data[i / c]).clamp(0.0, 1.0))
        .collect();
    Ok(Image {
        data,
        ..image.clone()
    })
}

/// Classical stand-in for a learned illumination estimator: the Gaussian-smoothed
/// max-channel prior, inverted so the enhanced image has mean brightness near `target`.
pub fn illumination_fallback(image: &Image, sigma: f64, target: f64) -> Image {
    let prior = gaussian_blur(&image.max_channel(), sigma);
    let data = prior
        .data
        .iter()
        .map(|&v| target / v.max(1e-3))
        .collect();
    Image { data, ..prior }
}

/// Box mean filter with replicate padding. `kernel` must be odd.
pub fn mean_filter(gray: &Image, kernel: usize) -> Result<Image> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!("mean filter kernel must be odd, got {kernel}")));
    }
    let r = (kernel / 2) as isize;
    let norm = (kernel * kernel) as f64;
    let mut out = Image::filled(gray.width, gray.height, 1, 0.0);
    for y in 0..gray.height as isize {
        for x in 0..gray.width as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += gray.get_clamped(x + dx, y + dy, 0);
                }
            }
            out.set(x as usize, y as usize, 0, acc / norm);
        }
    }
    Ok(out)
}

/// Separable Gaussian blur, kernel radius `ceil(3 sigma)`, replicate padding.
pub fn gaussian_blur(gray: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return gray.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);

    let (w, h) = (gray.width, gray.height);
    let mut tmp = Image::filled(w, h, 1, 0.0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let v: f64 = (-r..=r)
                .map(|i| k[(i + r) as usize] * gray.get_clamped(x + i, y, 0))
                .sum();
            tmp.set(x as usize, y as usize, 0, v);
        }
    }
    let mut out = Image::filled(w, h, 1, 0.0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let v: f64 = (-r..=r)
                .map(|i| k[(i + r) as usize] * tmp.get_clamped(x, y + i, 0))
                .sum();
            out.set(x as usize, y as usize, 0, v);
        }
    }
    out
}

pub fn snr_map(enhanced: &Image, kernel: usize, epsilon: f64) -> Result<SnrMap> {
    if epsilon <= 0.0 {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let gray = enhanced.to_gray();
    let smooth = mean_filter(&gray, kernel)?;
    let values = gray
        .data
        .iter()
        .zip(&smooth.data)
        .map(|(&g, &m)| m / ((g - m).abs() + epsilon))
        .collect();
    Ok(SnrMap {
        width: gray.width,
        height: gray.height,
        values,
        epsilon,
    })
}

/// Min-max normalisation to [0, 1]; a constant map becomes 0.5 everywhere.
pub fn normalize_snr(map: &SnrMap) -> Image {
    let data = normalize_min_max(&map.values);
    Image {
        width: map.width,
        height: map.height,
        channels: 1,
        data,
    }
}

pub(crate) fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Bilinear resize of a single-channel map (pixel-centre aligned).
pub fn resize_bilinear(map: &Image, width: usize, height: usize) -> Image {
    let sx = map.width as f64 / width as f64;
    let sy = map.height as f64 / height as f64;
    Image::from_fn(width, height, |x, y| {
        let fx = (x as f64 + 0.5) * sx - 0.5;
        let fy = (y as f64 + 0.5) * sy - 0.5;
        map.sample_bilinear(fx, fy, 0)
    })
}

/// `concat(f_img * m, f_evt * (1 - m))` along channels.
pub fn snr_fusion(f_img: &FeatureMap, f_evt: &FeatureMap, m_hat: &Image) -> Result<FeatureMap> {
    if f_img.width != f_evt.width || f_img.height != f_evt.height || f_img.channels != f_evt.channels
    {
        return Err(Error::invalid("image and event features differ in shape"));
    }
    if m_hat.width != f_img.width || m_hat.height != f_img.height || m_hat.channels != 1 {
        return Err(Error::invalid(format!(
            "SNR weight map {}x{} does not match features {}x{}",
            m_hat.width, m_hat.height, f_img.width, f_img.height
        )));
    }
    let c = f_img.channels;
    let mut values = Vec::with_capacity(f_img.values.len() * 2);
    for i in 0..f_img.width * f_img.height {
        let m = m_hat.data[i];
        values.extend(f_img.values[i * c..(i + 1) * c].iter().map(|v| v * m));
        values.extend(f_evt.values[i * c..(i + 1) * c].iter().map(|v| v * (1.0 - m)));
    }
    Ok(FeatureMap {
        width: f_img.width,
        height: f_img.height,
        channels: 2 * c,
        values,
    })
}

/// Central differences inside, one-sided differences on the border.
pub fn image_gradient(gray: &Image) -> GradientField {
    let (w, h) = (gray.width, gray.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if w < 2 {
                0.0
            } else if x == 0 {
                gray.get(1, y, 0) - gray.get(0, y, 0)
            } else if x == w - 1 {
                gray.get(w - 1, y, 0) - gray.get(w - 2, y, 0)
            } else {
                0.5 * (gray.get(x + 1, y, 0) - gray.get(x - 1, y, 0))
            };
            gy[i] = if h < 2 {
                0.0
            } else if y == 0 {
                gray.get(x, 1, 0) - gray.get(x, 0, 0)
            } else if y == h - 1 {
                gray.get(x, h - 1, 0) - gray.get(x, h - 2, 0)
            } else {
                0.5 * (gray.get(x, y + 1, 0) - gray.get(x, y - 1, 0))
            };
        }
    }
    GradientField {
        width: w,
        height: h,
        gx,
        gy,
    }
}

/// Result of [`fill_holes`].
#[derive(Debug, Clone)]
pub struct FillResult {
    pub image: Image,
    /// Valid after filling: original valid pixels plus the filled holes.
    pub mask: Vec<bool>,
    /// Holes with no valid neighbour within the radius; left untouched.
    pub unfilled: usize,
}

/// Replaces invalid pixels by the inverse-distance weighted mean of valid pixels within `radius`.
pub fn fill_holes(image: &Image, valid: &[bool], radius: usize) -> Result<FillResult> {
    if valid.len() != image.width * image.height {
        return Err(Error::invalid("validity mask does not match image size"));
    }
    let (w, h, c) = (image.width, image.height, image.channels);
    let r = radius as isize;
    let r2 = (radius * radius) as isize;
    let mut out = image.clone();
    let mut mask = valid.to_vec();
    let mut unfilled = 0;
    let mut acc = vec![0.0; c];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if valid[y as usize * w + x as usize] {
                continue;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut wsum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = dx * dx + dy * dy;
                    if d2 == 0 || d2 > r2 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if !valid[ny * w + nx] {
                        continue;
                    }
                    let wt = 1.0 / (d2 as f64).sqrt();
                    wsum += wt;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += wt * image.get(nx, ny, ch);
                    }
                }
            }
            if wsum > 0.0 {
                for (ch, a) in acc.iter().enumerate() {
                    out.set(x as usize, y as usize, ch, a / wsum);
                }
                mask[y as usize * w + x as usize] = true;
            } else {
                unfilled += 1;
            }
        }
    }
    Ok(FillResult {
        image: out,
        mask,
        unfilled,
    })
}
