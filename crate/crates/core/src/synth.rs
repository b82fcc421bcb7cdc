//! Synthetic textured surfaces seen from a known trajectory, with events
//! generated by the linearized brightness-increment model or by log-intensity
//! threshold crossings.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventStream};
use crate::geometry::{motion_field, DepthMap, Intrinsics, Pose, Trajectory, Vec3, Vec6};
use crate::imaging::{image_gradient, Image};
use crate::solver::GlobalState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    /// Checker cell size in world units.
    pub checker_cell: f64,
    pub checker_weight: f64,
    /// Steepness of the smoothed checker edges.
    pub checker_sharpness: f64,
    pub noise_weight: f64,
    pub noise_components: usize,
    pub noise_min_wavelength: f64,
    pub noise_max_wavelength: f64,
    /// Weight of a linear ramp along world x.
    pub gradient_weight: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            checker_cell: 0.3,
            checker_weight: 1.0,
            checker_sharpness: 3.0,
            noise_weight: 1.0,
            noise_components: 12,
            noise_min_wavelength: 0.15,
            noise_max_wavelength: 0.6,
            gradient_weight: 0.0,
        }
    }
}

/// Surface as a height field `z = f(x, y)` in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DepthModel {
    Plane { z0: f64, slope_x: f64, slope_y: f64 },
    Relief { z0: f64, amplitude: f64, wavelength: f64 },
}

impl DepthModel {
    fn height(&self, x: f64, y: f64) -> (f64, f64, f64) {
        match *self {
            DepthModel::Plane { z0, slope_x, slope_y } => (z0 + slope_x * x + slope_y * y, slope_x, slope_y),
            DepthModel::Relief {
                z0,
                amplitude,
                wavelength,
            } => {
                let k = TAU / wavelength;
                let (sx, cx) = (k * x).sin_cos();
                let (sy, cy) = (k * y).sin_cos();
                (z0 + amplitude * sx * cy, amplitude * k * cx * cy, -amplitude * k * sx * sy)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSample {
    /// Seconds.
    pub t: f64,
    pub translation: [f64; 3],
    /// Unit quaternion `w, x, y, z`.
    pub rotation: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub texture: TextureSpec,
    pub depth_model: DepthModel,
    /// Camera-to-world keyframes, interpolated in between.
    pub trajectory: Vec<PoseSample>,
    /// Frame timestamps in seconds; defaults to the keyframe times.
    #[serde(default)]
    pub frame_times: Option<Vec<f64>>,
    pub contrast_c: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Noise layer: sum of seeded plane waves.
#[derive(Debug, Clone)]
struct Waves {
    k: Vec<(f64, f64)>,
    phase: Vec<f64>,
    amp: Vec<f64>,
}

impl Waves {
    fn new(tex: &TextureSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Waves {
            k: Vec::new(),
            phase: Vec::new(),
            amp: Vec::new(),
        };
        for _ in 0..tex.noise_components {
            let dir = rng.random_range(0.0..TAU);
            let lambda = if tex.noise_max_wavelength > tex.noise_min_wavelength {
                rng.random_range(tex.noise_min_wavelength..tex.noise_max_wavelength)
            } else {
                tex.noise_min_wavelength
            };
            let k = TAU / lambda;
            w.k.push((k * dir.cos(), k * dir.sin()));
            w.phase.push(rng.random_range(0.0..TAU));
            w.amp.push(rng.random_range(0.5..1.0));
        }
        w
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.amp.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let s: f64 = (0..self.k.len())
            .map(|i| self.amp[i] * (self.k[i].0 * x + self.k[i].1 * y + self.phase[i]).sin())
            .sum();
        s / total
    }
}

/// Scene with its precomputed texture and trajectory.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub trajectory: Trajectory,
    waves: Waves,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::schema("width", "image size must be positive"));
        }
        if !(self.contrast_c > 0.0 && self.contrast_c.is_finite()) {
            return Err(Error::schema("contrast_c", format!("must be > 0, got {}", self.contrast_c)));
        }
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::schema("intrinsics", "focal lengths must be positive"));
        }
        if self.trajectory.is_empty() {
            return Err(Error::schema("trajectory", "needs at least one sample"));
        }
        if self.trajectory.windows(2).any(|w| !(w[0].t < w[1].t)) {
            return Err(Error::schema("trajectory", "timestamps must be strictly increasing"));
        }
        for (i, s) in self.trajectory.iter().enumerate() {
            let n = s.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || s.translation.iter().chain(&s.rotation).any(|v| !v.is_finite()) {
                return Err(Error::schema(format!("trajectory[{i}]"), "invalid pose"));
            }
        }
        let (lo, hi) = (self.trajectory[0].t, self.trajectory.last().unwrap().t);
        if let Some(ft) = &self.frame_times {
            if ft.is_empty() || ft.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::schema("frame_times", "must be nonempty and strictly increasing"));
            }
            if ft.iter().any(|&t| t < lo || t > hi) {
                return Err(Error::schema("frame_times", "must lie within the trajectory span"));
            }
        }
        let t = &self.texture;
        if !(t.checker_cell > 0.0 && t.noise_min_wavelength > 0.0 && t.noise_max_wavelength >= t.noise_min_wavelength) {
            return Err(Error::schema("texture", "cell size and wavelengths must be positive"));
        }
        match self.depth_model {
            DepthModel::Plane { z0, .. } if !z0.is_finite() => Err(Error::schema("depth_model.z0", "must be finite")),
            DepthModel::Relief { wavelength, .. } if !(wavelength > 0.0) => {
                Err(Error::schema("depth_model.wavelength", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn frame_times(&self) -> Vec<f64> {
        self.frame_times
            .clone()
            .unwrap_or_else(|| self.trajectory.iter().map(|s| s.t).collect())
    }

    pub fn build(&self) -> Result<Scene> {
        self.validate()?;
        let samples = self
            .trajectory
            .iter()
            .map(|s| {
                let [w, x, y, z] = s.rotation;
                (s.t, Pose::from_wxyz(w, x, y, z, Vec3::from(s.translation)))
            })
            .collect();
        Ok(Scene {
            trajectory: Trajectory::new(samples)?,
            waves: Waves::new(&self.texture, self.seed),
            spec: self.clone(),
        })
    }

    /// Textured relief in front of a camera sweeping a curved path.
    ///
    /// `step_rot` (radians) and `step_trans` (meters) set the per-frame motion;
    /// frames are `dt` seconds apart.
    pub fn preset(width: usize, height: usize, n_frames: usize, step_rot: f64, step_trans: f64, seed: u64) -> Self {
        let f = 0.95 * width as f64;
        let dt = 0.05;
        let trajectory = (0..n_frames)
            .map(|i| {
                let s = i as f64;
                let a = 0.35 * s;
                // curved, non-collinear path with gently varying orientation
                let t = Vec3::new(
                    step_trans * s,
                    step_trans * 2.0 * (1.0 - a.cos()),
                    step_trans * 0.5 * a.sin(),
                );
                let w = Vec3::new(step_rot * 0.6 * a.sin(), step_rot * s * 0.8, step_rot * 0.3 * s);
                let p = crate::geometry::se3_exp(&Vec6::new(w.x, w.y, w.z, 0.0, 0.0, 0.0));
                PoseSample {
                    t: dt * s,
                    translation: t.into(),
                    rotation: p.wxyz(),
                }
            })
            .collect();
        SceneSpec {
            width,
            height,
            intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: (width as f64 - 1.0) / 2.0,
                cy: (height as f64 - 1.0) / 2.0,
            },
            texture: TextureSpec::default(),
            depth_model: DepthModel::Relief {
                z0: 2.5,
                amplitude: 0.15,
                wavelength: 1.3,
            },
            trajectory,
            frame_times: None,
            contrast_c: 0.2,
            seed,
        }
    }
}

impl Scene {
    /// Texture brightness at a world point, within [0.1, 0.9].
    pub fn texture(&self, x: f64, y: f64) -> f64 {
        let t = &self.spec.texture;
        let c = (t.checker_sharpness * (PI * x / t.checker_cell).sin() * (PI * y / t.checker_cell).sin()).tanh();
        let n = self.waves.eval(x, y);
        let g = (x / 2.0).tanh();
        let wsum = t.checker_weight + t.noise_weight + t.gradient_weight;
        if wsum <= 0.0 {
            return 0.5;
        }
        0.5 + 0.4 * (t.checker_weight * c + t.noise_weight * n + t.gradient_weight * g) / wsum
    }

    /// Distance along the camera ray through `u` (equal to camera-frame depth), if any.
    fn intersect(&self, pose: &Pose, u: (f64, f64)) -> Option<Vec3> {
        let ray = self.spec.intrinsics.ray(u);
        let o = pose.translation;
        let d = pose.rotation * ray;
        let model = &self.spec.depth_model;
        let (z0, _, _) = model.height(o.x, o.y);
        let mut s = if d.z.abs() > 1e-12 { (z0 - o.z) / d.z } else { return None };
        for _ in 0..50 {
            let p = o + d * s;
            let (f, fx, fy) = model.height(p.x, p.y);
            let g = p.z - f;
            let dg = d.z - fx * d.x - fy * d.y;
            if dg.abs() < 1e-12 {
                return None;
            }
            let step = g / dg;
            s -= step;
            if step.abs() < 1e-14 * s.abs().max(1.0) {
                break;
            }
        }
        let p = o + d * s;
        let (f, _, _) = model.height(p.x, p.y);
        ((p.z - f).abs() < 1e-9 && s > 0.0 && s.is_finite()).then_some(Vec3::new(p.x, p.y, s))
    }

    /// Ray-cast depth through a subpixel location.
    pub fn depth_along(&self, pose: &Pose, u: (f64, f64)) -> Option<f64> {
        self.intersect(pose, u).map(|h| h.z)
    }

    /// Frame at a pose: grayscale image and camera-frame depth.
    pub fn render_at(&self, pose: &Pose) -> (Image, DepthMap) {
        let (w, h) = (self.spec.width, self.spec.height);
        let mut img = vec![0.0; w * h];
        let mut depth = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if let Some(hit) = self.intersect(pose, (x as f64, y as f64)) {
                    img[i] = self.texture(hit.x, hit.y);
                    depth[i] = hit.z;
                }
            }
        }
        (
            Image::new(w, h, 1, img).expect("finite render"),
            DepthMap::new(w, h, depth).expect("sized depth"),
        )
    }

    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        self.trajectory.pose_at(t)
    }

    pub fn render(&self, t: f64) -> Result<(Image, DepthMap, Pose)> {
        let pose = self.pose_at(t)?;
        let (img, d) = self.render_at(&pose);
        Ok((img, d, pose))
    }
}

pub fn render_scene(spec: &SceneSpec, t: f64) -> Result<(Image, DepthMap, Pose)> {
    spec.build()?.render(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventMode {
    #[default]
    Linearized,
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub mode: EventMode,
    /// Linearized quantum is `max|dL| / quantum_divisor` per window.
    pub quantum_divisor: f64,
    /// Sub-frames rendered per window in threshold mode.
    pub threshold_substeps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            mode: EventMode::Linearized,
            quantum_divisor: 8.0,
            threshold_substeps: 16,
        }
    }
}

fn us_to_s(t: i64) -> f64 {
    t as f64 / 1e6
}

pub fn s_to_us(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

/// Linearized increment `-grad(I) . du` for every pixel of the frame at `t`
/// moving to `t_prime`; invalid motion contributes 0.
pub fn linearized_increment(scene: &Scene, t: f64, t_prime: f64) -> Result<Vec<f64>> {
    let (img, depth, p0) = scene.render(t)?;
    let p1 = scene.pose_at(t_prime)?;
    let k = &scene.spec.intrinsics;
    let mf = motion_field(&depth, k, &p0, k, &p1);
    let g = image_gradient(&img);
    Ok((0..depth.data.len())
        .map(|i| {
            if mf.valid[i] {
                -(g.gx[i] * mf.du[i][0] + g.gy[i] * mf.du[i][1])
            } else {
                0.0
            }
        })
        .collect())
}

/// Events in `[t, t_prime)` (microseconds).
pub fn simulate_events(scene: &Scene, t: i64, t_prime: i64, opts: &SimOptions) -> Result<EventStream> {
    if t >= t_prime {
        return Err(Error::invalid(format!("empty interval [{t}, {t_prime})")));
    }
    let (w, h) = (scene.spec.width, scene.spec.height);
    let mut events = Vec::new();
    match opts.mode {
        EventMode::Linearized => {
            let inc = linearized_increment(scene, us_to_s(t), us_to_s(t_prime))?;
            let peak = inc.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            // below this the increment is reprojection round-off
            if peak > 1e-9 {
                let q = peak / opts.quantum_divisor;
                let span = (t_prime - t) as i128;
                for (i, v) in inc.iter().enumerate() {
                    let n = (v / q).round() as i64;
                    let (x, y) = ((i % w) as u32, (i / w) as u32);
                    let p = if n > 0 { 1 } else { -1 };
                    let m = n.unsigned_abs() as i128;
                    for j in 0..m {
                        let dt = ((2 * j + 1) * span / (2 * m)) as i64;
                        events.push(Event::new(t + dt, x, y, p));
                    }
                }
            }
        }
        EventMode::Threshold => {
            let c = scene.spec.contrast_c;
            let steps = opts.threshold_substeps.max(1);
            let times: Vec<i64> = (0..=steps).map(|s| t + (t_prime - t) * s as i64 / steps as i64).collect();
            let log_frame = |ts: i64| -> Result<Vec<f64>> {
                let (img, _, _) = scene.render(us_to_s(ts))?;
                Ok(img.data().iter().map(|v| v.max(1e-6).ln()).collect())
            };
            let mut reference = log_frame(t)?;
            let mut prev = reference.clone();
            for s in 1..=steps {
                let cur = log_frame(times[s])?;
                let (ta, tb) = (times[s - 1], times[s]);
                for i in 0..w * h {
                    let (x, y) = ((i % w) as u32, (i / w) as u32);
                    loop {
                        let diff = cur[i] - reference[i];
                        let p: i8 = if diff >= c {
                            1
                        } else if diff <= -c {
                            -1
                        } else {
                            break;
                        };
                        reference[i] += p as f64 * c;
                        // crossing time by linear interpolation within the sub-step
                        let frac = if cur[i] != prev[i] {
                            ((reference[i] - prev[i]) / (cur[i] - prev[i])).clamp(0.0, 1.0)
                        } else {
                            1.0
                        };
                        let te = (ta + ((tb - ta) as f64 * frac) as i64).min(t_prime - 1);
                        events.push(Event::new(te, x, y, p));
                    }
                }
                prev = cur;
            }
        }
    }
    EventStream::new(events, w as u32, h as u32)
}

/// Gaussian perturbation of frame poses (right-multiplied twists) and valid log-depths.
pub fn perturb(state: &GlobalState, sigma_rot: f64, sigma_trans: f64, sigma_logdepth: f64, seed: u64) -> GlobalState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = state.clone();
    for p in &mut out.poses {
        let mut xi = Vec6::zeros();
        for j in 0..6 {
            xi[j] = std.sample(&mut rng) * if j < 3 { sigma_rot } else { sigma_trans };
        }
        *p = p.retract(&xi);
    }
    for (ld, valid) in out.log_depths.iter_mut().zip(&out.valid) {
        for (v, &ok) in ld.iter_mut().zip(valid) {
            let n = std.sample(&mut rng);
            if ok {
                *v += sigma_logdepth * n;
            }
        }
    }
    out
}

/// Rendered frames, depths, poses and events at the frame times of a scene.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub frame_times_us: Vec<i64>,
    pub frames: Vec<Image>,
    pub depths: Vec<DepthMap>,
    pub poses: Vec<Pose>,
    pub events: EventStream,
}

pub fn generate(spec: &SceneSpec, opts: &SimOptions) -> Result<(Scene, SynthDataset)> {
    let scene = spec.build()?;
    let times: Vec<i64> = spec.frame_times().iter().map(|&t| s_to_us(t)).collect();
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::schema("frame_times", "frames closer than one microsecond"));
    }
    let mut frames = Vec::new();
    let mut depths = Vec::new();
    let mut poses = Vec::new();
    for &t in &times {
        // keep exact keyframe poses for frames on keyframe times
        let (img, d, p) = scene.render(us_to_s(t).clamp(scene.trajectory.span().unwrap().0, scene.trajectory.span().unwrap().1))?;
        frames.push(img);
        depths.push(d);
        poses.push(p);
    }
    let mut all = Vec::new();
    for w in times.windows(2) {
        all.extend_from_slice(simulate_events(&scene, w[0], w[1], opts)?.events());
    }
    let events = EventStream::new(all, spec.width as u32, spec.height as u32)?;
    Ok((
        scene,
        SynthDataset {
            frame_times_us: times,
            frames,
            depths,
            poses,
            events,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::accumulate_patch;
    use crate::geometry::{se3_exp, so3_exp};
    use crate::objective::predicted_increment;

    fn flat(z: f64) -> SceneSpec {
        SceneSpec {
            width: 24,
            height: 20,
            intrinsics: Intrinsics::new(20.0, 20.0, 11.5, 9.5).unwrap(),
            texture: TextureSpec::default(),
            depth_model: DepthModel::Plane {
                z0: z,
                slope_x: 0.0,
                slope_y: 0.0,
            },
            trajectory: vec![
                PoseSample {
                    t: 0.0,
                    translation: [0.0; 3],
                    rotation: [1.0, 0.0, 0.0, 0.0],
                },
                PoseSample {
                    t: 1.0,
                    translation: [0.0; 3],
                    rotation: [1.0, 0.0, 0.0, 0.0],
                },
            ],
            frame_times: None,
            contrast_c: 0.2,
            seed: 3,
        }
    }

    #[test]
    fn static_plane_renders_constant_depth() {
        let spec = flat(2.0);
        let (a, d, _) = render_scene(&spec, 0.0).unwrap();
        let (b, _, _) = render_scene(&spec, 0.7).unwrap();
        assert_eq!(a, b);
        assert!(d.data.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(a.data().iter().all(|v| (0.1..=0.9).contains(v)));
    }

    #[test]
    fn zero_motion_emits_nothing() {
        let mut relief = flat(2.0);
        relief.depth_model = DepthModel::Relief {
            z0: 2.5,
            amplitude: 0.1,
            wavelength: 1.2,
        };
        for spec in [flat(2.0), relief] {
            let scene = spec.build().unwrap();
            for mode in [EventMode::Linearized, EventMode::Threshold] {
                let opts = SimOptions {
                    mode,
                    ..Default::default()
                };
                assert!(simulate_events(&scene, 0, 100_000, &opts).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let mut s = flat(2.0);
        s.contrast_c = 0.0;
        let e = s.validate().unwrap_err();
        assert!(e.to_string().contains("contrast_c"), "{e}");
    }

    fn moving() -> SceneSpec {
        let mut s = flat(2.0);
        s.depth_model = DepthModel::Relief {
            z0: 2.0,
            amplitude: 0.1,
            wavelength: 1.0,
        };
        let p1 = se3_exp(&Vec6::new(0.002, -0.003, 0.001, 0.01, 0.004, 0.0));
        s.trajectory[1] = PoseSample {
            t: 1.0,
            translation: p1.translation.into(),
            rotation: p1.wxyz(),
        };
        s
    }

    #[test]
    fn linearized_events_reproduce_increment_within_one_quantum() {
        let scene = moving().build().unwrap();
        let opts = SimOptions::default();
        let (t0, t1) = (0, 1_000_000);
        let ev = simulate_events(&scene, t0, t1, &opts).unwrap();
        let inc = linearized_increment(&scene, 0.0, 1.0).unwrap();
        let q = inc.iter().fold(0.0_f64, |m, v| m.max(v.abs())) / opts.quantum_divisor;
        let (w, h) = (24usize, 20usize);
        let hw = 3;
        let (img, depth, p0) = scene.render(0.0).unwrap();
        let p1 = scene.pose_at(1.0).unwrap();
        let k = scene.spec.intrinsics;
        let mf = motion_field(&depth, &k, &p0, &k, &p1);
        let g = image_gradient(&img);
        for cy in [hw, h / 2, h - 1 - hw] {
            for cx in [hw, w / 2, w - 1 - hw] {
                let obs = accumulate_patch(&ev, (cx as u32, cy as u32), hw as u32, t0, t1).unwrap();
                let mut grads = Vec::new();
                let mut mot = Vec::new();
                for y in cy - hw..=cy + hw {
                    for x in cx - hw..=cx + hw {
                        grads.push(g.at(x, y));
                        mot.push(mf.du[y * w + x]);
                    }
                }
                let pred = predicted_increment(&grads, &mot, 1.0);
                for (o, p) in obs.iter().zip(&pred) {
                    assert!((o * q - p).abs() <= 0.5 * q + 1e-12, "{o} * {q} vs {p}");
                }
            }
        }
    }

    #[test]
    fn threshold_mode_counts_crossings() {
        // uniform texture brightening in time is not expressible by a static scene,
        // so check the counting rule on a texture ramp sliding under the camera
        let mut s = flat(2.0);
        s.texture = TextureSpec {
            checker_weight: 0.0,
            noise_weight: 0.0,
            gradient_weight: 1.0,
            ..Default::default()
        };
        s.trajectory[1].translation = [1.5, 0.0, 0.0];
        let scene = s.build().unwrap();
        let c = s.contrast_c;
        let ev = simulate_events(&scene, 0, 1_000_000, &SimOptions {
            mode: EventMode::Threshold,
            ..Default::default()
        })
        .unwrap();
        let (a, _, _) = scene.render(0.0).unwrap();
        let (b, _, _) = scene.render(1.0).unwrap();
        for (x, y) in [(3usize, 4usize), (12, 10), (20, 15)] {
            let dl = b.get(x, y, 0).ln() - a.get(x, y, 0).ln();
            let want = (dl.abs() / c).floor() as i64 * dl.signum() as i64;
            let got: i64 = ev
                .events()
                .iter()
                .filter(|e| (e.x as usize, e.y as usize) == (x, y))
                .map(|e| e.p as i64)
                .sum();
            assert_eq!(got, want, "pixel ({x}, {y}) dl {dl}");
        }
    }

    #[test]
    fn rendered_motion_matches_motion_field() {
        // Lucas-Kanade on a 7x7 window as an independent displacement estimate
        let spec = moving();
        let scene = spec.build().unwrap();
        let (a, d, p0) = scene.render(0.0).unwrap();
        let p1 = scene.pose_at(1.0).unwrap();
        let (b, _) = scene.render_at(&p1);
        let k = spec.intrinsics;
        let mf = motion_field(&d, &k, &p0, &k, &p1);
        for (cx, cy) in [(8usize, 8usize), (12, 10), (15, 11)] {
            let mut uv = [0.0f64, 0.0];
            for _ in 0..20 {
                let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in cy - 3..=cy + 3 {
                    for x in cx - 3..=cx + 3 {
                        let (xf, yf) = (x as f64, y as f64);
                        let ib = b.sample_bilinear(xf + uv[0], yf + uv[1], 0);
                        let gx = (b.sample_bilinear(xf + uv[0] + 0.5, yf + uv[1], 0)
                            - b.sample_bilinear(xf + uv[0] - 0.5, yf + uv[1], 0))
                            / 1.0;
                        let gy = (b.sample_bilinear(xf + uv[0], yf + uv[1] + 0.5, 0)
                            - b.sample_bilinear(xf + uv[0], yf + uv[1] - 0.5, 0))
                            / 1.0;
                        let e = a.get(x, y, 0) - ib;
                        a11 += gx * gx;
                        a12 += gx * gy;
                        a22 += gy * gy;
                        b1 += gx * e;
                        b2 += gy * e;
                    }
                }
                let det = a11 * a22 - a12 * a12;
                uv[0] += (a22 * b1 - a12 * b2) / det;
                uv[1] += (a11 * b2 - a12 * b1) / det;
            }
            let m = mf.du[cy * spec.width + cx];
            assert!((uv[0] - m[0]).abs() < 0.1 && (uv[1] - m[1]).abs() < 0.1, "{uv:?} vs {m:?}");
        }
    }

    #[test]
    fn perturb_examples() {
        let d = DepthMap::filled(4, 4, 2.0);
        let k = Intrinsics::new(4.0, 4.0, 1.5, 1.5).unwrap();
        let s = GlobalState::new(vec![Pose::identity(); 3], vec![k], &[d.clone(), d.clone(), d], vec![]).unwrap();
        assert_eq!(perturb(&s, 0.0, 0.0, 0.0, 1), s);
        assert_eq!(perturb(&s, 0.1, 0.2, 0.3, 9), perturb(&s, 0.1, 0.2, 0.3, 9));
        assert_ne!(perturb(&s, 0.1, 0.2, 0.3, 9), perturb(&s, 0.1, 0.2, 0.3, 10));
    }

    #[test]
    fn perturb_rotation_norm_follows_chi_distribution() {
        let d = DepthMap::filled(1, 1, 1.0);
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let n = 1000;
        let s = GlobalState::new(vec![Pose::identity(); n], vec![k], &vec![d; n], vec![]).unwrap();
        let sigma = 0.01;
        let p = perturb(&s, sigma, 0.0, 0.0, 42);
        let mean = p.poses.iter().map(|q| q.rotation_angle()).sum::<f64>() / n as f64;
        // mean of a 3-dof chi variable: 2 sqrt(2/pi)
        let want = sigma * 2.0 * (2.0 / PI).sqrt();
        assert!((mean - want).abs() < 0.1 * want, "{mean} vs {want}");
    }

    #[test]
    fn preset_is_curved_and_deterministic() {
        let spec = SceneSpec::preset(32, 24, 5, 0.01, 0.02, 7);
        let (_, a) = generate(&spec, &SimOptions::default()).unwrap();
        let (_, b) = generate(&spec, &SimOptions::default()).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.frames, b.frames);
        assert!(a.depths.iter().all(|d| d.valid_count() == 32 * 24));
        assert!(!a.events.is_empty());
        let _ = so3_exp(&Vec3::zeros());
    }
}
