//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line with the measured quantity before asserting.

use std::time::Instant;

use evrecon_core::config::Config;
use evrecon_core::events::{accumulate_patch, Event, EventStream};
use evrecon_core::geometry::{interpolate_pose, se3_exp, so3_exp, so3_log, Pose, Trajectory, Vec3, Vec6};
use evrecon_core::imaging::{snr_fusion, snr_map, FeatureMap, Image};
use evrecon_core::metrics::{ate, depth_metrics};
use evrecon_core::objective::{event_loss, total_objective, Patch};
use evrecon_core::pipeline::{
    build_problem, cmd_optimize, cmd_simulate, edges_from_depth, flows_from_state, initial_state, reseat_edges, ProblemInputs,
};
use evrecon_core::solver::{build_pair_graph, gradient, optimize, DepthMode, GlobalState, PairGraph};
use evrecon_core::sync::{align_day, warp_points, SensorStreams, SyncConfig, WarpConvention};
use evrecon_core::synth::{generate, perturb, DepthModel, PoseSample, Scene, SceneSpec, SimOptions, SynthDataset};
use evrecon_core::DepthMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, pass: bool, detail: String) {
    println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
}

struct Fixture {
    data: SynthDataset,
    gt: GlobalState,
    graph: PairGraph,
    inputs: ProblemInputs,
}

fn fixture(spec: &SceneSpec, sim: &SimOptions, cfg: &Config, flow_offset: [f64; 2]) -> Fixture {
    let (_, data) = generate(spec, sim).unwrap();
    let k = vec![spec.intrinsics];
    let graph = build_pair_graph(data.poses.len(), cfg.solver.window, cfg.solver.stride).unwrap();
    let gt = initial_state(&data.poses, &k, &data.depths, &graph).unwrap();
    let edges = edges_from_depth(&graph, &data.depths, &k, &data.poses);
    let flows = flows_from_state(&gt, flow_offset);
    let inputs = ProblemInputs {
        images: data.frames.clone(),
        illumination: None,
        events: data.events.clone(),
        frame_times_us: data.frame_times_us.clone(),
        edges,
        flows,
    };
    Fixture {
        data,
        gt,
        graph,
        inputs,
    }
}

fn trajectory(times_us: &[i64], poses: &[Pose]) -> Trajectory {
    Trajectory::new(times_us.iter().zip(poses).map(|(&t, p)| (t as f64 / 1e6, *p)).collect()).unwrap()
}

#[test]
fn criterion_01_gradient_matches_finite_differences() {
    let start = Instant::now();
    let spec = SceneSpec::preset(16, 16, 3, 0.01, 0.03, 11);
    let mut cfg = Config::default();
    cfg.patches.half_width = 3;
    cfg.patches.harris.border_margin = 3;
    cfg.patches.max_motion_spread = 10.0;
    // flows offset from the truth keep every L1 residual away from its kink
    let fx = fixture(&spec, &SimOptions::default(), &cfg, [1.0, -0.7]);
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    let mut checked = 0;
    let mut patches = 0;
    for (depth_mode, focal) in [(DepthMode::PerPixel, true), (DepthMode::FrameScale, false)] {
        let mut state = perturb(&fx.gt, 0.01, 0.01, 0.02, 3);
        reseat_edges(&mut state, &fx.graph);
        // move edge parameters off their initial values too
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (s, p) in state.edge_log_scales.iter_mut().zip(state.edge_poses.iter_mut()) {
            *s = rng.random_range(-0.1..0.1);
            let xi = Vec6::from_fn(|_, _| rng.random_range(-0.01..0.01));
            *p = p.retract(&xi);
        }
        let (problem, sel) = build_problem(&fx.inputs, &state, &cfg).unwrap();
        patches += sel.patches.len();
        let mut scfg = cfg.solver;
        scfg.depth_mode = depth_mode;
        scfg.optimize_focal = focal;
        let layout = scfg.layout(&state);
        let (_, g) = gradient(&state, &problem, &layout).unwrap();
        let h = 1e-5;
        for i in 0..layout.len() {
            let mut d = vec![0.0; layout.len()];
            d[i] = h;
            let lp = total_objective(&state.retract(&layout, &d), &problem).unwrap().total;
            d[i] = -h;
            let lm = total_objective(&state.retract(&layout, &d), &problem).unwrap().total;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            if rel > worst {
                worst = rel;
                worst_at = format!("{} (analytic {:e}, fd {:e})", layout.describe(i), g[i], fd);
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 60.0 && patches > 0;
    report(
        1,
        pass,
        format!("{checked} parameters, {patches} event patches, worst relative error {worst:.3e} at {worst_at}, {secs:.1} s (need < 1e-4, < 60 s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_event_loss_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let patches: Vec<Patch> = (0..8)
            .map(|_| Patch {
                center: (7, 7),
                half_width: 2,
                observed: (0..25).map(|_| rng.random_range(-3i32..=3) as f64).collect(),
                predicted: (0..25).map(|_| rng.random_range(-1.0..1.0)).collect(),
                corner_snr: 1.0,
            })
            .collect();
        let base = event_loss(&patches).loss;
        for c in [0.1, 1.0, 10.0, 1000.0] {
            let scaled: Vec<Patch> = patches
                .iter()
                .map(|p| Patch {
                    predicted: p.predicted.iter().map(|v| v * c).collect(),
                    ..p.clone()
                })
                .collect();
            worst = worst.max((event_loss(&scaled).loss - base).abs());
        }
    }
    let pass = worst < 1e-10;
    report(2, pass, format!("max change {worst:.3e} over c in {{0.1, 1, 10, 1000}} (need < 1e-10)"));
    assert!(pass);
}

#[test]
fn criterion_03_closed_loop_zero() {
    let start = Instant::now();
    // small baseline keeps the smoothness of the true trajectory negligible
    let spec = SceneSpec::preset(48, 40, 3, 0.0005, 0.001, 5);
    let sim = SimOptions {
        quantum_divisor: 1000.0,
        ..Default::default()
    };
    let cfg = Config::default();
    let fx = fixture(&spec, &sim, &cfg, [0.0, 0.0]);
    let (problem, sel) = build_problem(&fx.inputs, &fx.gt, &cfg).unwrap();
    let lb = total_objective(&fx.gt, &problem).unwrap();
    // quantization bound: each observed value is within q/2 of the prediction
    let mut bound = 0.0;
    for p in &sel.patches {
        let pred = evrecon_core::objective::predicted_patches(&fx.gt, std::slice::from_ref(p));
        let pp = &pred[0].predicted;
        let n2: f64 = pp.iter().map(|v| v * v).sum();
        let peak = quantum_peak(&fx, p.frame, &spec);
        let q = peak / sim.quantum_divisor;
        if n2 > 0.0 {
            bound += (pp.len() as f64 * q * q / n2).min(4.0);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = lb.total < 1e-6 && lb.event <= bound + 1e-12 && secs < 10.0;
    report(
        3,
        pass,
        format!(
            "total {:.3e} (align {:.3e}, smooth {:.3e}, flow {:.3e}, event {:.3e} <= bound {:.3e}, {} patches), {secs:.1} s (need < 1e-6, < 10 s)",
            lb.total,
            lb.align,
            lb.w_smooth * lb.smooth,
            lb.w_flow * lb.flow,
            lb.w_event * lb.event,
            bound,
            sel.patches.len()
        ),
    );
    assert!(pass);
}

fn quantum_peak(fx: &Fixture, frame: usize, spec: &SceneSpec) -> f64 {
    let scene: Scene = spec.build().unwrap();
    let t0 = fx.data.frame_times_us[frame] as f64 / 1e6;
    let t1 = fx.data.frame_times_us[frame + 1] as f64 / 1e6;
    evrecon_core::synth::linearized_increment(&scene, t0, t1)
        .unwrap()
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
}

const STEP_ROT: f64 = 0.02;
const STEP_TRANS: f64 = 0.06;

/// Pose noise: 2 degrees RMS rotation, 2 % of the scene depth in translation.
fn recovery_run(seed: u64, event_on: bool) -> (f64, f64, f64) {
    let spec = SceneSpec::preset(64, 48, 10, STEP_ROT, STEP_TRANS, 100 + seed);
    let mut cfg = Config::default();
    if !event_on {
        cfg.weights.w_event_base = 0.0;
    }
    let fx = fixture(&spec, &SimOptions::default(), &cfg, [0.0, 0.0]);
    let depth = match spec.depth_model {
        DepthModel::Relief { z0, .. } | DepthModel::Plane { z0, .. } => z0,
    };
    let sigma_rot = 2f64.to_radians() / 3f64.sqrt();
    let sigma_trans = 0.02 * depth / 3f64.sqrt();
    let mut init = perturb(&fx.gt, sigma_rot, sigma_trans, 0.0, 1000 + seed);
    reseat_edges(&mut init, &fx.graph);
    let (problem, _) = build_problem(&fx.inputs, &init, &cfg).unwrap();
    let gt_traj = trajectory(&fx.data.frame_times_us, &fx.data.poses);
    let a0 = ate(&trajectory(&fx.data.frame_times_us, &init.poses), &gt_traj).unwrap();
    let res = optimize(&init, &problem, &cfg.solver).unwrap();
    assert!(res.diverged.is_none());
    let a1 = ate(&trajectory(&fx.data.frame_times_us, &res.state.poses), &gt_traj).unwrap();
    (a0, a1, problem.w_event)
}

#[test]
fn criterion_04_perturbation_recovery() {
    let start = Instant::now();
    let (a0, a1, w_event) = recovery_run(0, true);
    let secs = start.elapsed().as_secs_f64();
    let pass = a1 <= 0.1 * a0 && secs < 300.0;
    report(
        4,
        pass,
        format!("ATE {a0:.4e} -> {a1:.4e} (ratio {:.3}, need <= 0.1), w_event {w_event:.3e}, {secs:.1} s (need < 300 s)", a1 / a0),
    );
    assert!(pass);
}

#[test]
fn criterion_05_event_term_helps() {
    let seeds = 5;
    let (mut on, mut off) = (0.0, 0.0);
    let mut rows = Vec::new();
    for s in 0..seeds {
        let (_, a_on, w) = recovery_run(s, true);
        let (_, a_off, _) = recovery_run(s, false);
        on += a_on / seeds as f64;
        off += a_off / seeds as f64;
        rows.push(format!("{a_on:.3e}/{a_off:.3e} (w_event {w:.2e})"));
    }
    let pass = on <= off;
    report(
        5,
        pass,
        format!("mean final ATE with events {on:.4e}, without {off:.4e} over {seeds} seeds; per seed {}", rows.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_06_accumulate_patch_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (w, h) = (20u32, 16u32);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(0..400);
        let events: Vec<Event> = (0..n)
            .map(|_| {
                Event::new(
                    rng.random_range(0..1000),
                    rng.random_range(0..w),
                    rng.random_range(0..h),
                    if rng.random_bool(0.5) { 1 } else { -1 },
                )
            })
            .collect();
        let stream = EventStream::new(events.clone(), w, h).unwrap();
        let hw = rng.random_range(0..4u32);
        let cx = rng.random_range(hw..w - hw);
        let cy = rng.random_range(hw..h - hw);
        let t0 = rng.random_range(0..600);
        let t1 = rng.random_range(t0..1001);
        let got = accumulate_patch(&stream, (cx, cy), hw, t0, t1).unwrap();
        let side = (2 * hw + 1) as usize;
        let mut want = vec![0.0; side * side];
        for dy in 0..side {
            for dx in 0..side {
                let (x, y) = (cx - hw + dx as u32, cy - hw + dy as u32);
                want[dy * side + dx] = events
                    .iter()
                    .filter(|e| e.x == x && e.y == y && e.t >= t0 && e.t < t1)
                    .map(|e| e.p as f64)
                    .sum();
            }
        }
        if got != want {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    report(6, pass, format!("{mismatches} mismatching streams out of 100"));
    assert!(pass);
}

#[test]
fn criterion_07_snr_map() {
    let eps = 1e-3;
    let constant = snr_map(&Image::filled(9, 7, 1, 0.4), 5, eps).unwrap();
    let const_err = constant.values.iter().map(|v| (v - 0.4 / eps).abs()).fold(0.0, f64::max);
    // 3x3 image, 3x3 box mean with replicate padding, evaluated at the centre
    // and at a corner by hand
    let img = Image::new(3, 3, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
    let m = snr_map(&img, 3, eps).unwrap();
    let centre = 0.5 / (0.0 + eps);
    // corner window: rows {0,0,1} x cols {0,0,1}
    let corner_mean: f64 = (0.1 * 4.0 + 0.2 * 2.0 + 0.4 * 2.0 + 0.5) / 9.0;
    let corner = corner_mean / ((0.1 - corner_mean).abs() + eps);
    let hand_err = (m.get(1, 1) - centre).abs().max((m.get(0, 0) - corner).abs());
    let pass = const_err < 1e-9 && hand_err < 1e-9;
    report(7, pass, format!("constant-image error {const_err:.3e}, hand 3x3 error {hand_err:.3e} (need < 1e-9)"));
    assert!(pass);
}

#[test]
fn criterion_08_fusion_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (w, h, c) = (5, 4, 3);
    let fi = FeatureMap::new(w, h, c, (0..w * h * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let fe = FeatureMap::new(w, h, c, (0..w * h * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let mut exact = true;
    for m in [0.0, 1.0] {
        let fused = snr_fusion(&fi, &fe, &Image::filled(w, h, 1, m)).unwrap();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let (img_part, evt_part) = (fused.get(x, y, ch), fused.get(x, y, c + ch));
                    let (want_img, want_evt) = if m == 1.0 {
                        (fi.get(x, y, ch), 0.0)
                    } else {
                        (0.0, fe.get(x, y, ch))
                    };
                    exact &= img_part == want_img && evt_part == want_evt;
                }
            }
        }
    }
    report(8, exact, format!("m = 0 and m = 1 reproduce the pure concatenations exactly: {exact}"));
    assert!(exact);
}

#[test]
fn criterion_09_sync_round_trip() {
    let p1 = se3_exp(&Vec6::new(0.02, -0.03, 0.01, 0.15, 0.05, -0.04));
    let spec = SceneSpec {
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
        ..SceneSpec::preset(40, 32, 2, 0.0, 0.0, 9)
    };
    let scene = spec.build().unwrap();
    let k = spec.intrinsics;
    let image_times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
    let depth_times = vec![0.03, 0.26, 0.48, 0.71, 0.94];
    let images = image_times.iter().map(|&t| scene.render(t).unwrap().0).collect();
    let depths: Vec<DepthMap> = depth_times.iter().map(|&t| scene.render(t).unwrap().1).collect();
    let streams = SensorStreams {
        image_intrinsics: k,
        depth_intrinsics: k,
        image_times: image_times.clone(),
        images,
        image_valid: None,
        depth_times: depth_times.clone(),
        depths: depths.clone(),
        poses: scene.trajectory.clone(),
        events: EventStream::empty(40, 32),
    };
    let out = align_day(&streams, &SyncConfig::default()).unwrap();
    // every warped point against the depth ray-cast at its exact projection
    let mut worst = 0.0_f64;
    let mut points = 0;
    for (di, &d) in depth_times.iter().enumerate() {
        let t = &out.tuples[di];
        let pd = scene.pose_at(d).unwrap();
        for p in warp_points(&depths[di], &k, &pd, &t.pose, WarpConvention::WorldToCamera) {
            let u = (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
            if !(u.0 >= 0.0 && u.1 >= 0.0 && u.0 <= 39.0 && u.1 <= 31.0) {
                continue;
            }
            if let Some(z) = scene.depth_along(&t.pose, u) {
                // the surface may be occluded from the new view; those points hit something nearer
                if z + 1e-6 >= p.z {
                    worst = worst.max((z - p.z).abs());
                    points += 1;
                }
            }
        }
    }
    let a = Pose::identity();
    let b = Pose::new(so3_exp(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)), Vec3::zeros());
    let mid = interpolate_pose(&a, 0.0, &b, 1.0, 0.5).unwrap();
    let slerp_err = (so3_log(&mid.rotation).norm().to_degrees() - 45.0).abs();
    let pass = out.tuples.len() == depth_times.len() && points > 1000 && worst < 1e-6 && slerp_err < 1e-9;
    report(
        9,
        pass,
        format!(
            "{} tuples, {points} warped points, worst depth error {worst:.3e} m (need < 1e-6), SLERP midpoint error {slerp_err:.3e} deg (need < 1e-9)",
            out.tuples.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_metrics_oracles() {
    let gt = DepthMap::from_fn(8, 6, |x, y| 1.0 + 0.1 * x as f64 + 0.05 * y as f64);
    let pred = DepthMap::new(8, 6, gt.data.iter().map(|v| 1.25 * v).collect()).unwrap();
    let m = depth_metrics(&pred, &gt, false).unwrap();
    let depth_err = (m.abs_rel - 0.25).abs().max(m.delta_125.abs()).max((m.rmse_log - 1.25f64.ln()).abs());
    let poses: Vec<Pose> = (0..12)
        .map(|i| {
            let s = i as f64;
            se3_exp(&Vec6::new(0.05 * s, -0.02 * s, 0.1, s * 0.3, (s * 0.7).sin(), 0.2 * s * s))
        })
        .collect();
    let gt_traj = Trajectory::new(poses.iter().enumerate().map(|(i, p)| (i as f64, *p)).collect()).unwrap();
    let sim = Pose::new(so3_exp(&Vec3::new(0.3, -1.1, 0.7)), Vec3::new(4.0, -2.0, 9.0));
    let s = 2.7;
    let moved = Trajectory::new(
        poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let t = sim.rotation * (p.translation * s) + sim.translation;
                (i as f64, Pose::new(sim.rotation * p.rotation, t))
            })
            .collect(),
    )
    .unwrap();
    let ate_err = ate(&moved, &gt_traj).unwrap();
    let pass = depth_err < 1e-12 && ate_err < 1e-9;
    report(
        10,
        pass,
        format!(
            "depth metrics (abs_rel {}, delta_125 {}, rmse_log {}) error {depth_err:.3e}; similarity ATE {ate_err:.3e} (need < 1e-9)",
            m.abs_rel, m.delta_125, m.rmse_log
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_11_identical_loss_traces() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec::preset(32, 24, 6, STEP_ROT, STEP_TRANS, 21);
    let scene_path = dir.path().join("scene.json");
    std::fs::write(&scene_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let mut cfg = Config::default();
    cfg.solver.iters = 40;
    cfg.perturb.sigma_rot = 0.02;
    cfg.perturb.sigma_trans = 0.03;
    let data = dir.path().join("data");
    cmd_simulate(&scene_path, &cfg, &data, None).unwrap();
    let manifest = data.join("manifest.json");
    let mut traces = Vec::new();
    // different pool sizes must not change a single bit
    for threads in [1, 4, 4] {
        let out = dir.path().join(format!("run{}", traces.len()));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| cmd_optimize(&manifest, &cfg, &out, 7)).unwrap();
        traces.push(std::fs::read(out.join("loss.csv")).unwrap());
    }
    let identical = traces.windows(2).all(|w| w[0] == w[1]);
    let rows = String::from_utf8_lossy(&traces[0]).lines().count() - 1;
    report(
        11,
        identical,
        format!("3 runs (1, 4, 4 threads), {rows} trace rows each, byte-identical: {identical}"),
    );
    assert!(identical);
}
