//! File formats: float32 tensors, PNG frames, TUM trajectories, JSON, loss CSV
//! and solver checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, Pose, Trajectory, Vec3};
use crate::imaging::Image;
use crate::objective::LossBreakdown;
use crate::solver::GlobalState;

pub const TENSOR_MAGIC: [u8; 4] = *b"FT32";

/// `H x W x C` float32 tensor, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_f64(height: usize, width: usize, channels: usize, data: &[f64]) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "tensor data has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data: data.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(&TENSOR_MAGIC);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let codec = |m: String| Error::Codec {
            path: path.to_path_buf(),
            message: m,
        };
        if bytes.len() < 16 || bytes[..4] != TENSOR_MAGIC {
            return Err(codec("missing FT32 header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (height, width, channels) = (dim(0), dim(1), dim(2));
        let n = height * width * channels;
        if bytes.len() != 16 + 4 * n {
            return Err(codec(format!(
                "{height}x{width}x{channels} tensor needs {} bytes, file has {}",
                16 + 4 * n,
                bytes.len()
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

fn expect_shape(t: &Tensor, path: &Path, channels: usize, size: Option<(usize, usize)>) -> Result<()> {
    let ok = t.channels == channels && size.is_none_or(|(w, h)| t.width == w && t.height == h);
    if ok {
        Ok(())
    } else {
        Err(Error::Codec {
            path: path.to_path_buf(),
            message: format!(
                "expected {}x{channels} tensor, got {}x{}x{}",
                size.map_or("HxW".to_string(), |(w, h)| format!("{h}x{w}")),
                t.height,
                t.width,
                t.channels
            ),
        })
    }
}

/// Depth as an `H x W x 1` tensor; invalid pixels stored as 0.
pub fn write_depth(path: impl AsRef<Path>, d: &DepthMap) -> Result<()> {
    let data: Vec<f64> = (0..d.data.len())
        .map(|i| if d.is_valid_at(i) { d.data[i] } else { 0.0 })
        .collect();
    write_tensor(path, &Tensor::from_f64(d.height, d.width, 1, &data)?)
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    expect_shape(&t, path, 1, None)?;
    DepthMap::new(t.width, t.height, t.to_f64())
}

pub fn write_image_f32(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_tensor(path, &Tensor::from_f64(img.height(), img.width(), img.channels(), img.data())?)
}

pub fn read_image_f32(path: impl AsRef<Path>) -> Result<Image> {
    let t = read_tensor(path)?;
    Image::new(t.width, t.height, t.channels, t.to_f64())
}

/// Flow field `H x W x 2`.
pub fn read_flow(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Vec<[f64; 2]>> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    expect_shape(&t, path, 2, Some((width, height)))?;
    Ok(t.data.chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect())
}

pub fn write_flow(path: impl AsRef<Path>, width: usize, height: usize, flow: &[[f64; 2]]) -> Result<()> {
    let flat: Vec<f64> = flow.iter().flat_map(|f| *f).collect();
    write_tensor(path, &Tensor::from_f64(height, width, 2, &flat)?)
}

/// Boolean mask `H x W x 1`; nonzero is true.
pub fn read_mask(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Vec<bool>> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    expect_shape(&t, path, 1, Some((width, height)))?;
    Ok(t.data.iter().map(|&v| v != 0.0).collect())
}

pub fn write_mask(path: impl AsRef<Path>, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let flat: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_tensor(path, &Tensor::from_f64(height, width, 1, &flat)?)
}

/// Reads an 8- or 16-bit PNG into [0, 1]; alpha is dropped, gray stays single-channel.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let codec = |m: String| Error::Codec {
        path: path.to_path_buf(),
        message: m,
    };
    let img = image::open(path).map_err(|e| codec(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    use image::DynamicImage as D;
    let (channels, data): (usize, Vec<f64>) = match img {
        D::ImageLuma8(b) => (1, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        D::ImageLumaA8(_) => {
            let b = img.to_luma8();
            (1, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
        D::ImageLuma16(b) => (1, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect()),
        D::ImageLumaA16(_) => {
            let b = img.to_luma16();
            (1, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        D::ImageRgb16(_) | D::ImageRgba16(_) => {
            let b = img.to_rgb16();
            (3, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        _ => {
            let b = img.to_rgb8();
            (3, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
    };
    Image::new(w, h, channels, data)
}

/// Writes a 1- or 3-channel image, clamped to [0, 1], as an 8- or 16-bit PNG.
pub fn write_png(path: impl AsRef<Path>, img: &Image, sixteen_bit: bool) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let codec = |m: String| Error::Codec {
        path: path.to_path_buf(),
        message: m,
    };
    let q = |v: f64, max: f64| (v.clamp(0.0, 1.0) * max).round();
    let dynimg = match (img.channels(), sixteen_bit) {
        (1, false) => image::DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w, h, img.data().iter().map(|&v| q(v, 255.0) as u8).collect())
                .expect("buffer size"),
        ),
        (1, true) => image::DynamicImage::ImageLuma16(
            image::ImageBuffer::from_raw(w, h, img.data().iter().map(|&v| q(v, 65535.0) as u16).collect())
                .expect("buffer size"),
        ),
        (3, false) => image::DynamicImage::ImageRgb8(
            image::RgbImage::from_raw(w, h, img.data().iter().map(|&v| q(v, 255.0) as u8).collect())
                .expect("buffer size"),
        ),
        (3, true) => image::DynamicImage::ImageRgb16(
            image::ImageBuffer::from_raw(w, h, img.data().iter().map(|&v| q(v, 65535.0) as u16).collect())
                .expect("buffer size"),
        ),
        (c, _) => return Err(codec(format!("cannot write {c}-channel PNG"))),
    };
    dynimg.save(path).map_err(|e| codec(e.to_string()))
}

/// Reads an image by extension: `.png` or the float32 container.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => read_png(path),
        _ => read_image_f32(path),
    }
}

/// TUM lines `t tx ty tz qx qy qz qw`; `#` comments and blank lines skipped.
pub fn parse_tum(text: &str, path: &Path) -> Result<Trajectory> {
    let mut samples = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            message: m,
        };
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("`{s}`: {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", v.len())));
        }
        let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err(err("zero quaternion".into()));
        }
        samples.push((
            v[0],
            Pose::new(nalgebra::UnitQuaternion::from_quaternion(q), Vec3::new(v[1], v[2], v[3])),
        ));
    }
    Trajectory::new(samples)
}

pub fn read_tum(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text, path)
}

pub fn format_tum(traj: &Trajectory) -> String {
    let mut s = String::new();
    for (t, p) in traj.samples() {
        let q = p.rotation.quaternion();
        let tr = p.translation;
        writeln!(s, "{t} {} {} {} {} {} {} {}", tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w).unwrap();
    }
    s
}

pub fn write_tum(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_tum(traj)).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `iter,align,smooth,flow,event,total` with each column already weighted.
pub fn format_loss_csv(trace: &[LossBreakdown]) -> String {
    let mut s = String::from("iter,align,smooth,flow,event,total\n");
    for (i, lb) in trace.iter().enumerate() {
        writeln!(
            s,
            "{i},{},{},{},{},{}",
            lb.align,
            lb.w_smooth * lb.smooth,
            lb.w_flow * lb.flow,
            lb.w_event * lb.event,
            lb.total
        )
        .unwrap();
    }
    s
}

pub fn write_loss_csv(path: impl AsRef<Path>, trace: &[LossBreakdown]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_loss_csv(trace)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub n_edges: usize,
    pub tensors: Vec<TensorEntry>,
}

fn pose_rows(poses: &[Pose]) -> Vec<f64> {
    poses
        .iter()
        .flat_map(|p| {
            let [w, x, y, z] = p.wxyz();
            [w, x, y, z, p.translation.x, p.translation.y, p.translation.z]
        })
        .collect()
}

fn poses_from_rows(data: &[f64]) -> Vec<Pose> {
    data.chunks_exact(7)
        .map(|r| Pose::from_wxyz(r[0], r[1], r[2], r[3], Vec3::new(r[4], r[5], r[6])))
        .collect()
}

/// Writes the state as float32 tensors plus `checkpoint.json`.
///
/// Poses are rows `qw qx qy qz tx ty tz`; masked depth pixels are stored as NaN.
pub fn write_checkpoint(dir: impl AsRef<Path>, state: &GlobalState) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut put = |name: &str, t: Tensor| -> Result<()> {
        let file = format!("{name}.f32");
        write_tensor(dir.join(&file), &t)?;
        entries.push(TensorEntry {
            name: name.to_string(),
            file,
            shape: [t.height, t.width, t.channels],
        });
        Ok(())
    };
    put("poses", Tensor::from_f64(state.n_frames(), 7, 1, &pose_rows(&state.poses))?)?;
    let k: Vec<f64> = state.intrinsics.iter().flat_map(|k| [k.fx, k.fy, k.cx, k.cy]).collect();
    put("intrinsics", Tensor::from_f64(state.intrinsics.len(), 4, 1, &k)?)?;
    for f in 0..state.n_frames() {
        let d: Vec<f64> = state.log_depths[f]
            .iter()
            .zip(&state.valid[f])
            .map(|(&l, &ok)| if ok { l } else { f64::NAN })
            .collect();
        put(&format!("log_depth_{f:04}"), Tensor::from_f64(state.height, state.width, 1, &d)?)?;
    }
    put("edge_log_scales", Tensor::from_f64(state.n_edges(), 1, 1, &state.edge_log_scales)?)?;
    put("edge_poses", Tensor::from_f64(state.n_edges(), 7, 1, &pose_rows(&state.edge_poses))?)?;
    write_json(
        dir.join("checkpoint.json"),
        &CheckpointManifest {
            width: state.width,
            height: state.height,
            n_frames: state.n_frames(),
            n_edges: state.n_edges(),
            tensors: entries,
        },
    )
}

pub fn read_checkpoint(dir: impl AsRef<Path>) -> Result<GlobalState> {
    let dir = dir.as_ref();
    let m: CheckpointManifest = read_json(dir.join("checkpoint.json"))?;
    let load = |name: &str| -> Result<(PathBuf, Tensor)> {
        let e = m
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::schema("tensors", format!("checkpoint lacks `{name}`")))?;
        let p = dir.join(&e.file);
        let t = read_tensor(&p)?;
        Ok((p, t))
    };
    let poses = poses_from_rows(&load("poses")?.1.to_f64());
    let intrinsics = load("intrinsics")?
        .1
        .to_f64()
        .chunks_exact(4)
        .map(|r| Intrinsics::new(r[0], r[1], r[2], r[3]))
        .collect::<Result<Vec<_>>>()?;
    let mut log_depths = Vec::new();
    let mut valid = Vec::new();
    for f in 0..m.n_frames {
        let (p, t) = load(&format!("log_depth_{f:04}"))?;
        expect_shape(&t, &p, 1, Some((m.width, m.height)))?;
        let v = t.to_f64();
        valid.push(v.iter().map(|x| x.is_finite()).collect());
        log_depths.push(v.iter().map(|&x| if x.is_finite() { x } else { 0.0 }).collect());
    }
    Ok(GlobalState {
        width: m.width,
        height: m.height,
        poses,
        intrinsics,
        log_depths,
        valid,
        edge_log_scales: load("edge_log_scales")?.1.to_f64(),
        edge_poses: poses_from_rows(&load("edge_poses")?.1.to_f64()),
    })
}
