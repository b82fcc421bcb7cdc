//! Aligns independently timestamped image, depth, pose and event streams into
//! per-frame tuples.
//!
//! Image, depth and pose times are seconds; event times are microseconds.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::geometry::{warp_depth, DepthMap, Intrinsics, Pose, Trajectory, Vec3};
use crate::imaging::{fill_holes, Image};

/// How trajectory poses are handed to the depth warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpConvention {
    /// Inverted to world-to-camera before warping, so points land in the image camera frame.
    #[default]
    WorldToCamera,
    /// Camera-to-world poses passed unchanged.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    pub warp: WarpConvention,
    pub fill_radius: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            warp: WarpConvention::WorldToCamera,
            fill_radius: 4,
        }
    }
}

/// Raw sensor streams.
#[derive(Debug, Clone)]
pub struct SensorStreams {
    pub image_intrinsics: Intrinsics,
    pub depth_intrinsics: Intrinsics,
    pub image_times: Vec<f64>,
    pub images: Vec<Image>,
    /// Rectification validity masks; when present, images are hole-filled.
    pub image_valid: Option<Vec<Vec<bool>>>,
    pub depth_times: Vec<f64>,
    pub depths: Vec<DepthMap>,
    pub poses: Trajectory,
    pub events: EventStream,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTuple {
    pub image_t: f64,
    pub image: Image,
    pub depth: DepthMap,
    pub events: EventStream,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncOutput {
    pub tuples: Vec<AlignedTuple>,
    /// Depth samples or frames dropped (pose gaps, empty warps, no depth).
    pub skipped: usize,
    /// Image pixels that hole filling could not reach.
    pub unfilled: usize,
}

/// Nearest image index per depth time; ties go to the earlier image.
pub fn match_timestamps(depth_times: &[f64], image_times: &[f64]) -> Result<Vec<(usize, usize)>> {
    if image_times.is_empty() {
        return Err(Error::invalid("no image timestamps to match against"));
    }
    Ok(depth_times
        .iter()
        .enumerate()
        .map(|(d, &t)| {
            let k = image_times.partition_point(|&x| x < t);
            let j = if k == 0 {
                0
            } else if k == image_times.len() {
                k - 1
            } else if (t - image_times[k - 1]) <= (image_times[k] - t) {
                k - 1
            } else {
                k
            };
            (d, j)
        })
        .collect())
}

/// Depth points of one sample carried into the camera frame at the image time.
///
/// Returns the warped camera-frame points, one per valid depth pixel.
pub fn warp_points(
    depth: &DepthMap,
    k_depth: &Intrinsics,
    pose_d: &Pose,
    pose_i: &Pose,
    convention: WarpConvention,
) -> Vec<Vec3> {
    let (pd, pi) = match convention {
        WarpConvention::WorldToCamera => (pose_d.inverse(), pose_i.inverse()),
        WarpConvention::Literal => (*pose_d, *pose_i),
    };
    let mut out = Vec::with_capacity(depth.valid_count());
    for y in 0..depth.height {
        for x in 0..depth.width {
            let z = depth.get(x, y);
            if !(z > 0.0 && z.is_finite()) {
                continue;
            }
            let xd = k_depth.ray((x as f64, y as f64)) * z;
            out.push(warp_depth(&xd, &pd, &pi));
        }
    }
    out
}

/// Nearest-pixel splat keeping the smallest depth per pixel.
pub fn rasterize(points: &[Vec3], k: &Intrinsics, width: usize, height: usize) -> DepthMap {
    let mut data = vec![0.0; width * height];
    for p in points {
        if !(p.z > 0.0) {
            continue;
        }
        let u = k.fx * p.x / p.z + k.cx;
        let v = k.fy * p.y / p.z + k.cy;
        let (x, y) = (u.round(), v.round());
        if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
            continue;
        }
        let i = y as usize * width + x as usize;
        if data[i] == 0.0 || p.z < data[i] {
            data[i] = p.z;
        }
    }
    DepthMap::new(width, height, data).expect("sized depth")
}

fn check_streams(s: &SensorStreams) -> Result<()> {
    if s.images.len() != s.image_times.len() {
        return Err(Error::schema("images", "count differs from image timestamps"));
    }
    if s.depths.len() != s.depth_times.len() {
        return Err(Error::schema("depths", "count differs from depth timestamps"));
    }
    if let Some(v) = &s.image_valid {
        if v.len() != s.images.len() {
            return Err(Error::schema("image_valid", "count differs from images"));
        }
    }
    for (name, t) in [("image_times", &s.image_times), ("depth_times", &s.depth_times)] {
        if t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::schema(name, "timestamps must be strictly increasing"));
        }
    }
    if s.images.is_empty() {
        return Err(Error::MissingInput("images".into()));
    }
    Ok(())
}

fn us(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

/// Shared core: one tuple per image that has at least one matched depth sample,
/// built from the temporally closest of those samples.
fn align_matched(s: &SensorStreams, cfg: &SyncConfig) -> Result<SyncOutput> {
    check_streams(s)?;
    let pairs = match_timestamps(&s.depth_times, &s.image_times)?;
    let mut best: Vec<Option<usize>> = vec![None; s.images.len()];
    let mut skipped = 0;
    for &(d, j) in &pairs {
        if s.poses.pose_at(s.depth_times[d]).is_err() {
            warn!("depth sample {d} at t = {} lies outside pose coverage; skipped", s.depth_times[d]);
            skipped += 1;
            continue;
        }
        let dt = (s.depth_times[d] - s.image_times[j]).abs();
        match best[j] {
            Some(prev) if (s.depth_times[prev] - s.image_times[j]).abs() <= dt => skipped += 1,
            Some(_) => {
                skipped += 1;
                best[j] = Some(d);
            }
            None => best[j] = Some(d),
        }
    }
    let jobs: Vec<(usize, usize)> = best.iter().enumerate().filter_map(|(j, d)| d.map(|d| (j, d))).collect();
    let built: Vec<Result<Option<(AlignedTuple, usize)>>> = jobs
        .par_iter()
        .map(|&(j, d)| {
            let ti = s.image_times[j];
            let pose_i = match s.poses.pose_at(ti) {
                Ok(p) => p,
                Err(_) => return Ok(None),
            };
            let pose_d = s.poses.pose_at(s.depth_times[d])?;
            let pts = warp_points(&s.depths[d], &s.depth_intrinsics, &pose_d, &pose_i, cfg.warp);
            let img = &s.images[j];
            let depth = rasterize(&pts, &s.image_intrinsics, img.width(), img.height());
            if depth.valid_count() == 0 {
                return Ok(None);
            }
            let (image, unfilled) = match &s.image_valid {
                Some(masks) => {
                    let f = fill_holes(img, &masks[j], cfg.fill_radius)?;
                    (f.image, f.unfilled)
                }
                None => (img.clone(), 0),
            };
            Ok(Some((
                AlignedTuple {
                    image_t: ti,
                    image,
                    depth,
                    events: EventStream::empty(s.events.width(), s.events.height()),
                    pose: pose_i,
                },
                unfilled,
            )))
        })
        .collect();
    let mut tuples = Vec::new();
    let mut unfilled = 0;
    for (r, &(j, _)) in built.into_iter().zip(&jobs) {
        match r? {
            Some((t, u)) => {
                tuples.push(t);
                unfilled += u;
            }
            None => {
                warn!("image {j} at t = {} produced no tuple; skipped", s.image_times[j]);
                skipped += 1;
            }
        }
    }
    // event slices run from the previous tuple (or the preceding image) to this one
    let mut prev: Option<f64> = None;
    for t in &mut tuples {
        let start = prev.unwrap_or_else(|| {
            let j = s.image_times.partition_point(|&x| x < t.image_t);
            if j > 0 {
                s.image_times[j - 1]
            } else {
                t.image_t
            }
        });
        t.events = s.events.slice(us(start), us(t.image_t));
        prev = Some(t.image_t);
    }
    Ok(SyncOutput {
        tuples,
        skipped,
        unfilled,
    })
}

/// Day rate: every depth sample goes to its nearest image; when several land
/// on one image, the closest in time is kept.
pub fn align_day(s: &SensorStreams, cfg: &SyncConfig) -> Result<SyncOutput> {
    if s.depth_times.len() > s.image_times.len() {
        warn!("day alignment expects image rate >= depth rate");
    }
    align_matched(s, cfg)
}

/// Night rate: each image takes the temporally closest depth sample among
/// those falling nearest to it; frames with none are skipped.
pub fn align_night(s: &SensorStreams, cfg: &SyncConfig) -> Result<SyncOutput> {
    if s.depth_times.len() < s.image_times.len() {
        warn!("night alignment expects depth rate >= image rate");
    }
    let mut out = align_matched(s, cfg)?;
    let covered: std::collections::HashSet<u64> = out.tuples.iter().map(|t| t.image_t.to_bits()).collect();
    let without = s.image_times.iter().filter(|t| !covered.contains(&t.to_bits())).count();
    out.skipped = out.skipped.max(without);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;
    use crate::geometry::{se3_exp, Vec6};
    use crate::synth::{DepthModel, PoseSample, SceneSpec, TextureSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn match_examples() {
        assert_eq!(match_timestamps(&[10.0], &[8.0, 13.0]).unwrap(), vec![(0, 0)]);
        assert_eq!(match_timestamps(&[10.0], &[8.0, 12.0]).unwrap(), vec![(0, 0)]);
        assert!(match_timestamps(&[1.0], &[]).is_err());
    }

    #[test]
    fn match_agrees_with_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut imgs: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..100.0)).collect();
        imgs.sort_by(f64::total_cmp);
        imgs.dedup();
        let mut deps: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..105.0)).collect();
        deps.sort_by(f64::total_cmp);
        for (d, j) in match_timestamps(&deps, &imgs).unwrap() {
            let mut best = 0;
            for k in 1..imgs.len() {
                if (deps[d] - imgs[k]).abs() < (deps[d] - imgs[best]).abs() {
                    best = k;
                }
            }
            assert_eq!(j, best);
        }
    }

    fn k() -> Intrinsics {
        Intrinsics::new(20.0, 20.0, 11.5, 9.5).unwrap()
    }

    fn static_streams(n: usize) -> SensorStreams {
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let d = DepthMap::from_fn(24, 20, |x, y| 2.0 + 0.01 * x as f64 + 0.02 * y as f64);
        let poses = Trajectory::new(times.iter().map(|&t| (t, Pose::from_translation(Vec3::new(1.0, 2.0, 3.0)))).collect()).unwrap();
        let events = (0..n * 10).map(|i| Event::new(i as i64 * 10_000, 1, 1, 1)).collect();
        SensorStreams {
            image_intrinsics: k(),
            depth_intrinsics: k(),
            image_times: times.clone(),
            images: vec![Image::filled(24, 20, 1, 0.5); n],
            image_valid: None,
            depth_times: times,
            depths: vec![d; n],
            poses,
            events: EventStream::new(events, 24, 20).unwrap(),
        }
    }

    #[test]
    fn static_rig_passes_depth_through() {
        let s = static_streams(4);
        let out = align_day(&s, &SyncConfig::default()).unwrap();
        assert_eq!(out.tuples.len(), 4);
        for t in &out.tuples {
            for (a, b) in t.depth.data.iter().zip(&s.depths[0].data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // slices are disjoint, ordered and cover [first image, last image)
        let total: usize = out.tuples.iter().map(|t| t.events.len()).sum();
        assert_eq!(total, s.events.window(0, 300_000).len());
        for w in out.tuples.windows(2) {
            assert!(w[0].image_t < w[1].image_t);
        }
        let night = align_night(&s, &SyncConfig::default()).unwrap();
        assert_eq!(night, out);
    }

    #[test]
    fn depth_before_first_pose_is_skipped() {
        let mut s = static_streams(3);
        s.depth_times[0] = -0.05;
        let out = align_day(&s, &SyncConfig::default()).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.tuples.len(), 2);
    }

    #[test]
    fn night_picks_the_closest_depth() {
        let mut s = static_streams(2);
        s.image_times = vec![0.0, 0.1];
        s.depth_times = vec![0.0, 0.092, 0.097];
        let far = DepthMap::filled(24, 20, 5.0);
        let near = DepthMap::filled(24, 20, 3.0);
        s.depths = vec![far.clone(), far, near];
        let out = align_night(&s, &SyncConfig::default()).unwrap();
        // 0.097 is 3 ms away, 0.092 is 8 ms away
        assert!(out.tuples[1].depth.data.iter().all(|&v| v == 0.0 || (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn night_without_depth_skips_frame() {
        let mut s = static_streams(3);
        s.depth_times = vec![0.0];
        s.depths.truncate(1);
        let out = align_night(&s, &SyncConfig::default()).unwrap();
        assert_eq!(out.tuples.len(), 1);
        assert_eq!(out.skipped, 2);
    }

    fn rig() -> (SceneSpec, crate::synth::Scene) {
        let p1 = se3_exp(&Vec6::new(0.01, -0.02, 0.015, 0.05, 0.02, -0.03));
        let spec = SceneSpec {
            width: 24,
            height: 20,
            intrinsics: k(),
            texture: TextureSpec::default(),
            depth_model: DepthModel::Relief {
                z0: 2.0,
                amplitude: 0.2,
                wavelength: 0.9,
            },
            trajectory: vec![
                PoseSample {
                    t: 0.0,
                    translation: [0.0; 3],
                    rotation: [1.0, 0.0, 0.0, 0.0],
                },
                PoseSample {
                    t: 1.0,
                    translation: p1.translation.into(),
                    rotation: p1.wxyz(),
                },
            ],
            frame_times: None,
            contrast_c: 0.2,
            seed: 1,
        };
        let scene = spec.build().unwrap();
        (spec, scene)
    }

    #[test]
    fn warped_points_lie_on_the_rerendered_surface() {
        let (spec, scene) = rig();
        let (_, d, pd) = scene.render(0.3).unwrap();
        let pi = scene.pose_at(0.7).unwrap();
        let pts = warp_points(&d, &spec.intrinsics, &pd, &pi, WarpConvention::WorldToCamera);
        let k = spec.intrinsics;
        let mut checked = 0;
        for p in pts {
            let u = (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
            if !(u.0 > 1.0 && u.1 > 1.0 && u.0 < 22.0 && u.1 < 18.0) {
                continue;
            }
            // depth seen from the image camera along the exact projected ray
            let z = scene.depth_along(&pi, u).unwrap();
            assert!((z - p.z).abs() < 1e-6, "{z} vs {}", p.z);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn literal_convention_differs_on_rotation() {
        let (spec, scene) = rig();
        let (_, d, pd) = scene.render(0.0).unwrap();
        let pi = scene.pose_at(1.0).unwrap();
        let a = warp_points(&d, &spec.intrinsics, &pd, &pi, WarpConvention::WorldToCamera);
        let b = warp_points(&d, &spec.intrinsics, &pd, &pi, WarpConvention::Literal);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).norm() > 1e-3));
    }

    #[test]
    fn day_alignment_matches_rerendered_plane() {
        // fronto-parallel plane under in-plane translation: depth is constant, so
        // splatted pixels must equal the image-time render exactly
        let mut spec = rig().0;
        spec.depth_model = DepthModel::Plane {
            z0: 2.0,
            slope_x: 0.0,
            slope_y: 0.0,
        };
        spec.trajectory[1].translation = [0.3, -0.1, 0.0];
        spec.trajectory[1].rotation = [1.0, 0.0, 0.0, 0.0];
        let scene = spec.build().unwrap();
        let image_times = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let depth_times = vec![0.02, 0.51, 0.97];
        let mut images = Vec::new();
        for &t in &image_times {
            images.push(scene.render(t).unwrap().0);
        }
        let depths = depth_times.iter().map(|&t| scene.render(t).unwrap().1).collect();
        let s = SensorStreams {
            image_intrinsics: spec.intrinsics,
            depth_intrinsics: spec.intrinsics,
            image_times: image_times.clone(),
            images,
            image_valid: None,
            depth_times,
            depths,
            poses: scene.trajectory.clone(),
            events: EventStream::empty(24, 20),
        };
        let out = align_day(&s, &SyncConfig::default()).unwrap();
        assert_eq!(out.tuples.len(), 3);
        for t in &out.tuples {
            let (_, gt, _) = scene.render(t.image_t).unwrap();
            let mut n = 0;
            for (a, b) in t.depth.data.iter().zip(&gt.data) {
                if *a > 0.0 {
                    assert!((a - b).abs() < 1e-6);
                    n += 1;
                }
            }
            assert!(n > 200);
        }
    }
}
