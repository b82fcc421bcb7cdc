//! Batch commands behind the `evrecon` binary: simulate, sync, optimize, eval.
//!
//! Every command reads and writes plain files (JSON manifests, FT32 tensors,
//! TUM trajectories, CSV events) and records the resolved configuration next
//! to its outputs.

mod assemble;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use assemble::{
    build_problem, edges_from_depth, flows_from_state, initial_state, prepare_frames, reseat_edges, ProblemInputs,
};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::events::{parse_events_with, write_events, EventStream};
use crate::geometry::{DepthMap, FrameTag, Intrinsics, Pointmap, Pose, Trajectory, Vec3};
use crate::imaging::Image;
use crate::io::{
    read_depth, read_flow, read_image, read_json, read_mask, read_tensor, read_tum, write_checkpoint, write_depth,
    write_flow, write_image_f32, write_json, write_loss_csv, write_mask, write_png, write_tum,
};
use crate::metrics::{ate, depth_metrics, rpe, MetricsReport};
use crate::objective::{FlowObservation, PairEdge};
use crate::solver::{build_pair_graph, optimize, GlobalState, IntrinsicsMode, PairGraph};
use crate::sync::{align_day, align_night, SensorStreams};
use crate::synth::{generate, perturb, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub t_us: i64,
    pub image: String,
    /// Depth initialization.
    #[serde(default)]
    pub depth: Option<String>,
    /// Single-channel illumination map used for enhancement.
    #[serde(default)]
    pub illumination: Option<String>,
}

/// Pointmaps of one pair, both `H x W x 3` in the camera frame of `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointmapEntry {
    pub a: usize,
    pub b: usize,
    pub aa: String,
    pub ba: String,
    #[serde(default)]
    pub confidence_aa: Option<String>,
    #[serde(default)]
    pub confidence_ba: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowEntry {
    pub a: usize,
    pub b: usize,
    pub flow: String,
    #[serde(default)]
    pub mask: Option<String>,
}

/// Input of `optimize`; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameEntry>,
    #[serde(default)]
    pub events: Option<String>,
    /// Initial camera-to-world poses (TUM).
    #[serde(default)]
    pub trajectory: Option<String>,
    #[serde(default)]
    pub pointmaps: Vec<PointmapEntry>,
    #[serde(default)]
    pub flows: Vec<FlowEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedFile {
    /// Seconds.
    pub t: f64,
    pub path: String,
    #[serde(default)]
    pub valid_mask: Option<String>,
}

/// Input of `sync`; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncManifest {
    pub width: usize,
    pub height: usize,
    pub image_intrinsics: Intrinsics,
    /// Defaults to the image intrinsics.
    #[serde(default)]
    pub depth_intrinsics: Option<Intrinsics>,
    pub images: Vec<TimedFile>,
    pub depths: Vec<TimedFile>,
    pub poses: String,
    #[serde(default)]
    pub events: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Day,
    Night,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    pub mode: SyncMode,
    pub tuples: usize,
    pub skipped: usize,
    pub unfilled_pixels: usize,
    pub rate_mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub iterations: usize,
    pub initial_total: f64,
    pub final_total: f64,
    pub w_event: f64,
    pub patches: usize,
    pub rejected_patches: usize,
    pub diverged: Option<String>,
}

fn frame_name(i: usize) -> String {
    format!("{i:06}")
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_config(out: &Path, cfg: &Config) -> Result<()> {
    write_json(out.join("config.json"), cfg)
}

/// Renders a scene spec into frames, depths, events, flows, ground-truth
/// trajectory and the manifests `optimize` and `sync` read.
pub fn cmd_simulate(scene_path: &Path, cfg: &Config, out: &Path, seed: Option<u64>) -> Result<usize> {
    let mut spec: SceneSpec = read_json(scene_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let (_, data) = generate(&spec, &cfg.simulation)?;
    for d in ["frames", "depth", "flow"] {
        mkdir(&out.join(d))?;
    }
    let k = spec.intrinsics;
    let mut frames = Vec::new();
    for (i, (img, depth)) in data.frames.iter().zip(&data.depths).enumerate() {
        let n = frame_name(i);
        write_image_f32(out.join(format!("frames/{n}.f32")), img)?;
        write_png(out.join(format!("frames/{n}.png")), img, true)?;
        write_depth(out.join(format!("depth/{n}.f32")), depth)?;
        frames.push(FrameEntry {
            t_us: data.frame_times_us[i],
            image: format!("frames/{n}.f32"),
            depth: Some(format!("depth/{n}.f32")),
            illumination: None,
        });
    }
    let gt = GlobalState::new(data.poses.clone(), vec![k], &data.depths, Vec::new())?;
    let mut flows = Vec::new();
    for f in flows_from_state(&gt, [0.0, 0.0]) {
        let n = frame_name(f.frame_a);
        write_flow(out.join(format!("flow/{n}.f32")), spec.width, spec.height, &f.flow)?;
        write_mask(out.join(format!("flow/{n}_mask.f32")), spec.width, spec.height, &f.mask)?;
        flows.push(FlowEntry {
            a: f.frame_a,
            b: f.frame_b,
            flow: format!("flow/{n}.f32"),
            mask: Some(format!("flow/{n}_mask.f32")),
        });
    }
    write_events(out.join("events.csv"), &data.events)?;
    let times_s: Vec<f64> = data.frame_times_us.iter().map(|&t| t as f64 / 1e6).collect();
    let traj = Trajectory::new(times_s.iter().copied().zip(data.poses.iter().copied()).collect())?;
    write_tum(out.join("trajectory.tum"), &traj)?;
    write_json(
        out.join("manifest.json"),
        &DatasetManifest {
            width: spec.width,
            height: spec.height,
            intrinsics: k,
            frames,
            events: Some("events.csv".into()),
            trajectory: Some("trajectory.tum".into()),
            pointmaps: Vec::new(),
            flows,
        },
    )?;
    let timed = |dir: &str| -> Vec<TimedFile> {
        times_s
            .iter()
            .enumerate()
            .map(|(i, &t)| TimedFile {
                t,
                path: format!("{dir}/{}.f32", frame_name(i)),
                valid_mask: None,
            })
            .collect()
    };
    write_json(
        out.join("sync.json"),
        &SyncManifest {
            width: spec.width,
            height: spec.height,
            image_intrinsics: k,
            depth_intrinsics: None,
            images: timed("frames"),
            depths: timed("depth"),
            poses: "trajectory.tum".into(),
            events: Some("events.csv".into()),
        },
    )?;
    write_json(out.join("scene.json"), &spec)?;
    write_config(out, cfg)?;
    info!("simulated {} frames, {} events", data.frames.len(), data.events.len());
    Ok(data.frames.len())
}

fn load_pointmap(path: &Path, conf: Option<&Path>, w: usize, h: usize, frame: usize) -> Result<Pointmap> {
    let t = read_tensor(path)?;
    if t.width != w || t.height != h || t.channels != 3 {
        return Err(Error::invalid(format!(
            "{}: pointmap is {}x{}x{}, expected {h}x{w}x3",
            path.display(),
            t.height,
            t.width,
            t.channels
        )));
    }
    let v = t.to_f64();
    let points = v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    let confidence = match conf {
        Some(p) => {
            let c = read_tensor(p)?;
            if c.width != w || c.height != h || c.channels != 1 {
                return Err(Error::invalid(format!("{}: confidence map has the wrong shape", p.display())));
            }
            Some(c.to_f64())
        }
        None => None,
    };
    Ok(Pointmap {
        width: w,
        height: h,
        points,
        confidence,
        frame: FrameTag::Camera(frame),
    })
}

/// Loaded optimization inputs.
struct Loaded {
    intrinsics: Intrinsics,
    poses: Vec<Pose>,
    depths: Vec<DepthMap>,
    inputs: ProblemInputs,
    times_s: Vec<f64>,
    pointmaps_given: bool,
}

fn load_dataset(manifest_path: &Path, cfg: &Config) -> Result<Loaded> {
    let m: DatasetManifest = read_json(manifest_path)?;
    let base = base_dir(manifest_path);
    let mut missing = Vec::new();
    if m.frames.is_empty() {
        missing.push("images");
    }
    if m.events.is_none() {
        missing.push("events");
    }
    if m.trajectory.is_none() {
        missing.push("trajectory");
    }
    if m.frames.iter().any(|f| f.depth.is_none()) {
        missing.push("depth");
    }
    if !missing.is_empty() {
        return Err(Error::MissingInput(missing.join(", ")));
    }
    if m.frames.windows(2).any(|w| w[0].t_us >= w[1].t_us) {
        return Err(Error::schema("frames", "timestamps must be strictly increasing"));
    }
    let (w, h) = (m.width, m.height);
    let mut images = Vec::new();
    let mut depths = Vec::new();
    let mut illum = Vec::new();
    for f in &m.frames {
        let img = read_image(base.join(&f.image))?;
        if img.width() != w || img.height() != h {
            return Err(Error::schema("frames.image", format!("{} is not {w}x{h}", f.image)));
        }
        images.push(img);
        let d = read_depth(base.join(f.depth.as_ref().unwrap()))?;
        if d.width != w || d.height != h {
            return Err(Error::schema("frames.depth", "depth size differs from the frame size"));
        }
        depths.push(d);
        if let Some(p) = &f.illumination {
            illum.push(read_image(base.join(p))?);
        }
    }
    let illumination = match illum.len() {
        0 => None,
        n if n == images.len() => Some(illum),
        _ => return Err(Error::schema("frames.illumination", "given for some frames but not all")),
    };
    let traj = read_tum(base.join(m.trajectory.as_ref().unwrap()))?;
    let times_s: Vec<f64> = m.frames.iter().map(|f| f.t_us as f64 / 1e6).collect();
    let poses = times_s.iter().map(|&t| traj.pose_at(t)).collect::<Result<Vec<_>>>()?;
    let events = parse_events_with(base.join(m.events.as_ref().unwrap()), w as u32, h as u32, cfg.events.polarity)?;
    let n = m.frames.len();
    let mut edges = Vec::new();
    for p in &m.pointmaps {
        if p.a >= n || p.b >= n || p.a == p.b {
            return Err(Error::schema("pointmaps", format!("invalid pair ({}, {})", p.a, p.b)));
        }
        let ca = p.confidence_aa.as_ref().map(|c| base.join(c));
        let cb = p.confidence_ba.as_ref().map(|c| base.join(c));
        edges.push(PairEdge {
            frame_a: p.a,
            frame_b: p.b,
            pointmap_aa: load_pointmap(&base.join(&p.aa), ca.as_deref(), w, h, p.a)?,
            pointmap_ba: load_pointmap(&base.join(&p.ba), cb.as_deref(), w, h, p.a)?,
        });
    }
    let mut flows = Vec::new();
    for f in &m.flows {
        if f.a >= n || f.b >= n {
            return Err(Error::schema("flows", format!("invalid pair ({}, {})", f.a, f.b)));
        }
        let flow = read_flow(base.join(&f.flow), w, h)?;
        let mask = match &f.mask {
            Some(p) => read_mask(base.join(p), w, h)?,
            None => vec![true; w * h],
        };
        flows.push(FlowObservation {
            frame_a: f.a,
            frame_b: f.b,
            flow,
            mask,
        });
    }
    Ok(Loaded {
        intrinsics: m.intrinsics,
        poses,
        depths,
        pointmaps_given: !edges.is_empty(),
        inputs: ProblemInputs {
            images,
            illumination,
            events,
            frame_times_us: m.frames.iter().map(|f| f.t_us).collect(),
            edges,
            flows,
        },
        times_s,
    })
}

/// Runs the global optimization on a dataset manifest.
///
/// Outputs are written even when the run diverges; divergence is then
/// reported as [`Error::NonFinite`].
pub fn cmd_optimize(manifest_path: &Path, cfg: &Config, out: &Path, seed: u64) -> Result<OptimizeSummary> {
    cfg.validate()?;
    let mut data = load_dataset(manifest_path, cfg)?;
    let n = data.poses.len();
    let k = vec![data.intrinsics];
    let graph = if data.pointmaps_given {
        PairGraph {
            edges: data.inputs.edges.iter().map(|e| (e.frame_a, e.frame_b)).collect(),
            window: cfg.solver.window,
            stride: cfg.solver.stride,
        }
    } else {
        let g = build_pair_graph(n, cfg.solver.window, cfg.solver.stride)?;
        data.inputs.edges = edges_from_depth(&g, &data.depths, &k, &data.poses);
        g
    };
    let k = match cfg.solver.intrinsics_mode {
        IntrinsicsMode::Shared => k,
        IntrinsicsMode::PerFrame => vec![k[0]; n],
    };
    let mut init = initial_state(&data.poses, &k, &data.depths, &graph)?;
    let p = &cfg.perturb;
    if p.sigma_rot > 0.0 || p.sigma_trans > 0.0 || p.sigma_log_depth > 0.0 {
        init = perturb(&init, p.sigma_rot, p.sigma_trans, p.sigma_log_depth, seed);
        reseat_edges(&mut init, &graph);
    }
    let (problem, sel) = build_problem(&data.inputs, &init, cfg)?;
    info!(
        "{n} frames, {} pairs, {} flows, {} event patches ({} rejected), w_event {:e}",
        problem.edges.len(),
        problem.flows.len(),
        sel.patches.len(),
        sel.rejected_motion,
        problem.w_event
    );
    let res = optimize(&init, &problem, &cfg.solver)?;
    mkdir(&out.join("depth"))?;
    let traj = Trajectory::new(data.times_s.iter().copied().zip(res.state.poses.iter().copied()).collect())?;
    write_tum(out.join("trajectory.tum"), &traj)?;
    for f in 0..n {
        write_depth(out.join(format!("depth/{}.f32", frame_name(f))), &res.state.depth(f))?;
    }
    write_loss_csv(out.join("loss.csv"), &res.trace)?;
    write_checkpoint(out.join("checkpoint"), &res.state)?;
    write_config(out, cfg)?;
    let summary = OptimizeSummary {
        iterations: res.trace.len().saturating_sub(1),
        initial_total: res.trace.first().map_or(f64::NAN, |l| l.total),
        final_total: res.trace.last().map_or(f64::NAN, |l| l.total),
        w_event: problem.w_event,
        patches: sel.patches.len(),
        rejected_patches: sel.rejected_motion,
        diverged: res.diverged.map(str::to_string),
    };
    write_json(out.join("summary.json"), &summary)?;
    if let Some(term) = res.diverged {
        return Err(Error::NonFinite { term });
    }
    Ok(summary)
}

fn depth_files(dir: &Path) -> Result<Vec<String>> {
    let d = dir.join("depth");
    if !d.is_dir() {
        return Ok(Vec::new());
    }
    let mut names: Vec<String> = fs::read_dir(&d)
        .map_err(|e| Error::io(&d, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".f32"))
        .collect();
    names.sort();
    Ok(names)
}

/// Depth and pose metrics of a prediction directory against a ground-truth
/// directory; both hold `trajectory.tum` and/or `depth/*.f32`.
pub fn cmd_eval(pred: &Path, gt: &Path, out: &Path, scale_align: bool) -> Result<MetricsReport> {
    let pred_depths = depth_files(pred)?;
    let gt_depths = depth_files(gt)?;
    let pred_traj = pred.join("trajectory.tum");
    if pred_depths.is_empty() && !pred_traj.is_file() {
        return Err(Error::MissingInput(format!(
            "{} holds neither depth maps nor a trajectory",
            pred.display()
        )));
    }
    let unmatched: Vec<&String> = pred_depths
        .iter()
        .filter(|n| !gt_depths.contains(n))
        .chain(gt_depths.iter().filter(|n| !pred_depths.contains(n)))
        .collect();
    if !pred_depths.is_empty() && !unmatched.is_empty() {
        return Err(Error::invalid(format!(
            "unmatched depth frames: {}",
            unmatched.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut report = MetricsReport::default();
    let mut csv = String::from("frame,abs_rel,delta_125,rmse_log\n");
    if !pred_depths.is_empty() {
        let (mut a, mut d, mut r) = (0.0, 0.0, 0.0);
        for name in &pred_depths {
            let m = depth_metrics(
                &read_depth(pred.join("depth").join(name))?,
                &read_depth(gt.join("depth").join(name))?,
                scale_align,
            )?;
            csv.push_str(&format!(
                "{},{},{},{}\n",
                name.trim_end_matches(".f32"),
                m.abs_rel,
                m.delta_125,
                m.rmse_log
            ));
            a += m.abs_rel;
            d += m.delta_125;
            r += m.rmse_log;
        }
        let n = pred_depths.len() as f64;
        report.abs_rel = Some(a / n);
        report.delta_125 = Some(d / n);
        report.rmse_log = Some(r / n);
    }
    if pred_traj.is_file() {
        let p = read_tum(&pred_traj)?;
        let g = read_tum(gt.join("trajectory.tum"))?;
        match ate(&p, &g) {
            Ok(v) => report.ate = Some(v),
            Err(e) => warn!("ATE unavailable: {e}"),
        }
        match rpe(&p, &g, 1) {
            Ok((t, r)) => {
                report.rpe_trans = Some(t);
                report.rpe_rot = Some(r);
            }
            Err(e) => warn!("RPE unavailable: {e}"),
        }
    }
    mkdir(out)?;
    write_json(out.join("metrics.json"), &report)?;
    fs::write(out.join("per_frame.csv"), csv).map_err(|e| Error::io(out.join("per_frame.csv"), e))?;
    Ok(report)
}

/// Aligns raw streams into tuples and writes them as numbered files.
pub fn cmd_sync(manifest_path: &Path, mode: SyncMode, cfg: &Config, out: &Path) -> Result<SyncSummary> {
    cfg.validate()?;
    let m: SyncManifest = read_json(manifest_path)?;
    let base = base_dir(manifest_path);
    if m.images.is_empty() {
        return Err(Error::schema("images", "no image entries"));
    }
    if m.poses.is_empty() {
        return Err(Error::schema("poses", "no pose file given"));
    }
    let poses = read_tum(base.join(&m.poses))?;
    let images = m.images.iter().map(|f| read_image(base.join(&f.path))).collect::<Result<Vec<Image>>>()?;
    let masks: Vec<Option<Vec<bool>>> = m
        .images
        .iter()
        .map(|f| f.valid_mask.as_ref().map(|p| read_mask(base.join(p), m.width, m.height)).transpose())
        .collect::<Result<_>>()?;
    let image_valid = if masks.iter().all(Option::is_some) && !masks.is_empty() {
        Some(masks.into_iter().map(Option::unwrap).collect())
    } else {
        if masks.iter().any(Option::is_some) {
            return Err(Error::schema("images.valid_mask", "given for some images but not all"));
        }
        None
    };
    let depths = m.depths.iter().map(|f| read_depth(base.join(&f.path))).collect::<Result<Vec<_>>>()?;
    let events = match &m.events {
        Some(p) => parse_events_with(base.join(p), m.width as u32, m.height as u32, cfg.events.polarity)?,
        None => EventStream::empty(m.width as u32, m.height as u32),
    };
    let streams = SensorStreams {
        image_intrinsics: m.image_intrinsics,
        depth_intrinsics: m.depth_intrinsics.unwrap_or(m.image_intrinsics),
        image_times: m.images.iter().map(|f| f.t).collect(),
        images,
        image_valid,
        depth_times: m.depths.iter().map(|f| f.t).collect(),
        depths,
        poses,
        events,
    };
    let rate_mismatch = match mode {
        SyncMode::Day => streams.depth_times.len() > streams.image_times.len(),
        SyncMode::Night => streams.depth_times.len() < streams.image_times.len(),
    };
    if rate_mismatch {
        warn!("{mode:?} mode does not match the stream rates; processing anyway");
    }
    let res = match mode {
        SyncMode::Day => align_day(&streams, &cfg.sync)?,
        SyncMode::Night => align_night(&streams, &cfg.sync)?,
    };
    for d in ["image", "depth", "events"] {
        mkdir(&out.join(d))?;
    }
    for (i, t) in res.tuples.iter().enumerate() {
        let n = frame_name(i);
        write_image_f32(out.join(format!("image/{n}.f32")), &t.image)?;
        write_depth(out.join(format!("depth/{n}.f32")), &t.depth)?;
        write_events(out.join(format!("events/{n}.csv")), &t.events)?;
    }
    if !res.tuples.is_empty() {
        let traj = Trajectory::new(res.tuples.iter().map(|t| (t.image_t, t.pose)).collect())?;
        write_tum(out.join("trajectory.tum"), &traj)?;
    }
    let summary = SyncSummary {
        mode,
        tuples: res.tuples.len(),
        skipped: res.skipped,
        unfilled_pixels: res.unfilled,
        rate_mismatch,
    };
    write_json(out.join("summary.json"), &summary)?;
    write_config(out, cfg)?;
    Ok(summary)
}
