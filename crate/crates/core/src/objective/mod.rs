//! Loss terms of the global objective and their hand-derived gradients.
//!
//! `total = align + w_smooth * smooth + w_flow * flow + w_event * event`.

mod event;
mod motion;
mod patches;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{se3_left_jacobian_inv, se3_right_jacobian_inv, Pointmap, Vec6};
use crate::solver::GlobalState;

pub use event::{
    event_loss, event_weight, patch_loss, patch_loss_grad, predicted_increment, EventLossValue,
    Patch,
};
pub use patches::{build_event_patches, patch_motion_spread, PatchParams, PatchSelection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weights {
    pub w_smooth: f64,
    pub w_flow: f64,
    pub w_event_base: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            w_smooth: 0.01,
            w_flow: 0.01,
            w_event_base: 0.01,
        }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("weights.w_smooth", self.w_smooth),
            ("weights.w_flow", self.w_flow),
            ("weights.w_event_base", self.w_event_base),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::schema(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Pairwise pointmaps for frames `a < b`, both expressed in frame `a` coordinates.
///
/// The edge's alignment pose and scale live in [`GlobalState`] at the same index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEdge {
    pub frame_a: usize,
    pub frame_b: usize,
    pub pointmap_aa: Pointmap,
    pub pointmap_ba: Pointmap,
}

/// Observed flow from `frame_a` to `frame_b` and the pixels it applies to.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowObservation {
    pub frame_a: usize,
    pub frame_b: usize,
    pub flow: Vec<[f64; 2]>,
    pub mask: Vec<bool>,
}

/// Event observation around a corner of `frame`, predicted from the motion towards `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventPatch {
    pub frame: usize,
    pub target: usize,
    pub center: (usize, usize),
    pub half_width: usize,
    pub observed: Vec<f64>,
    /// Image gradient of `frame` over the patch, row-major like `observed`.
    pub gradient: Vec<(f64, f64)>,
    pub corner_snr: f64,
}

impl EventPatch {
    /// Flat pixel indices covered by the patch, in patch order.
    pub fn pixels(&self, width: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let h = self.half_width;
        let (cx, cy) = self.center;
        (0..2 * h + 1).flat_map(move |dy| {
            (0..2 * h + 1).map(move |dx| {
                let (x, y) = (cx + dx - h, cy + dy - h);
                (x, y, y * width + x)
            })
        })
    }
}

/// Everything the objective needs besides the state.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub edges: Vec<PairEdge>,
    pub flows: Vec<FlowObservation>,
    pub patches: Vec<EventPatch>,
    pub weights: Weights,
    /// Effective event weight, fixed when the problem is built.
    pub w_event: f64,
}

impl Problem {
    /// Event weight derived from the SNR of the patch corners.
    pub fn new(
        edges: Vec<PairEdge>,
        flows: Vec<FlowObservation>,
        patches: Vec<EventPatch>,
        weights: Weights,
    ) -> Self {
        let snrs: Vec<f64> = patches.iter().map(|p| p.corner_snr).collect();
        let w_event = event_weight(&snrs, weights.w_event_base);
        Self {
            edges,
            flows,
            patches,
            weights,
            w_event,
        }
    }

    pub fn with_event_weight(mut self, w_event: f64) -> Self {
        self.w_event = w_event;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub smooth: f64,
    pub flow: f64,
    pub event: f64,
    pub w_smooth: f64,
    pub w_flow: f64,
    pub w_event: f64,
    pub total: f64,
    pub skipped_patches: usize,
}

impl LossBreakdown {
    pub fn combine(&self) -> f64 {
        self.align + self.w_smooth * self.smooth + self.w_flow * self.flow + self.w_event * self.event
    }
}

/// Gradient in the state's own structure; edge log-scale entries are with
/// respect to the centred log-scale.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrad {
    pub pose: Vec<Vec6>,
    pub focal: Vec<[f64; 2]>,
    pub depth: Vec<Vec<f64>>,
    pub edge_log_scale: Vec<f64>,
    pub edge_pose: Vec<Vec6>,
}

impl StateGrad {
    pub fn zeros(state: &GlobalState) -> Self {
        Self {
            pose: vec![Vec6::zeros(); state.n_frames()],
            focal: vec![[0.0; 2]; state.intrinsics.len()],
            depth: vec![vec![0.0; state.width * state.height]; state.n_frames()],
            edge_log_scale: vec![0.0; state.n_edges()],
            edge_pose: vec![Vec6::zeros(); state.n_edges()],
        }
    }
}

/// One job's share of value and gradient; merged in job order.
#[derive(Default)]
struct Contrib {
    value: f64,
    poses: Vec<(usize, Vec6)>,
    focal: Vec<(usize, [f64; 2])>,
    depth_frame: usize,
    depth: Vec<(usize, f64)>,
    edge: Option<(usize, f64, Vec6)>,
    skipped: usize,
}

impl Contrib {
    fn merge_into(&self, state: &GlobalState, w: f64, g: &mut StateGrad) {
        for (f, v) in &self.poses {
            g.pose[*f] += v * w;
        }
        for (f, v) in &self.focal {
            let k = &mut g.focal[state.intrinsics_group(*f)];
            k[0] += w * v[0];
            k[1] += w * v[1];
        }
        let d = &mut g.depth[self.depth_frame];
        for (i, v) in &self.depth {
            d[*i] += w * v;
        }
        if let Some((e, s, p)) = &self.edge {
            g.edge_log_scale[*e] += w * s;
            g.edge_pose[*e] += p * w;
        }
    }
}

fn align_job(state: &GlobalState, e: usize, frame: usize, pm: &Pointmap, sigma: f64, grad: bool) -> Contrib {
    let k = state.intrinsics_of(frame);
    let pose = &state.poses[frame];
    let pw = &state.edge_poses[e];
    let mut c = Contrib {
        depth_frame: frame,
        ..Default::default()
    };
    let (mut gp, mut gf, mut gs, mut ge) = (Vec6::zeros(), [0.0; 2], 0.0, Vec6::zeros());
    for y in 0..state.height {
        for x in 0..state.width {
            let i = y * state.width + x;
            let conf = pm.confidence_at(i);
            let xpm = pm.points[i];
            if !state.valid[frame][i] || !(conf > 0.0) || !xpm.iter().all(|v| v.is_finite()) {
                continue;
            }
            let xc = k.ray((x as f64, y as f64)) * state.log_depths[frame][i].exp();
            let xe = pw.transform_point(&xpm) * sigma;
            let r = pose.transform_point(&xc) - xe;
            let n = r.norm();
            c.value += conf * n;
            if !grad || n == 0.0 {
                continue;
            }
            let g = r * (conf / n);
            let rg = pose.rotation.inverse_transform_vector(&g);
            c.depth.push((i, rg.dot(&xc)));
            let w = xc.cross(&rg);
            gp += Vec6::new(w.x, w.y, w.z, rg.x, rg.y, rg.z);
            gf[0] -= xc.x * rg.x;
            gf[1] -= xc.y * rg.y;
            gs -= g.dot(&xe);
            let rw = pw.rotation.inverse_transform_vector(&g) * sigma;
            let we = xpm.cross(&rw);
            ge -= Vec6::new(we.x, we.y, we.z, rw.x, rw.y, rw.z);
        }
    }
    if grad {
        c.poses.push((frame, gp));
        c.focal.push((frame, gf));
        c.edge = Some((e, gs, ge));
    }
    c
}

fn smooth_job(state: &GlobalState, grad: bool) -> Contrib {
    let mut c = Contrib::default();
    for t in 0..state.n_frames().saturating_sub(1) {
        let xi = state.poses[t].inverse().compose(&state.poses[t + 1]).log();
        c.value += xi.norm_squared();
        if grad {
            c.poses.push((t + 1, se3_right_jacobian_inv(&xi).transpose() * xi * 2.0));
            c.poses.push((t, -(se3_left_jacobian_inv(&xi).transpose() * xi * 2.0)));
        }
    }
    c
}

fn flow_job(state: &GlobalState, obs: &FlowObservation, grad: bool) -> Contrib {
    let (a, b) = (obs.frame_a, obs.frame_b);
    let (ka, kb) = (state.intrinsics_of(a), state.intrinsics_of(b));
    let (pa, pb) = (&state.poses[a], &state.poses[b]);
    let mut c = Contrib {
        depth_frame: a,
        ..Default::default()
    };
    let mut acc = motion::MotionGrad::default();
    for y in 0..state.height {
        for x in 0..state.width {
            let i = y * state.width + x;
            if !obs.mask[i] || !state.valid[a][i] {
                continue;
            }
            let Some(m) = motion::eval((x as f64, y as f64), state.log_depths[a][i], ka, pa, kb, pb)
            else {
                continue;
            };
            let r = [m.du[0] - obs.flow[i][0], m.du[1] - obs.flow[i][1]];
            c.value += r[0].abs() + r[1].abs();
            if grad {
                let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                let mg = motion::backprop(&m, [sign(r[0]), sign(r[1])], kb, pa, pb);
                c.depth.push((i, mg.log_depth));
                accumulate_motion(&mut acc, &mg);
            }
        }
    }
    if grad {
        push_motion(&mut c, a, b, &acc);
    }
    c
}

fn accumulate_motion(acc: &mut motion::MotionGrad, mg: &motion::MotionGrad) {
    acc.pose_a += mg.pose_a;
    acc.pose_b += mg.pose_b;
    for j in 0..2 {
        acc.focal_a[j] += mg.focal_a[j];
        acc.focal_b[j] += mg.focal_b[j];
    }
}

fn push_motion(c: &mut Contrib, a: usize, b: usize, acc: &motion::MotionGrad) {
    c.poses.push((a, acc.pose_a));
    c.poses.push((b, acc.pose_b));
    c.focal.push((a, acc.focal_a));
    c.focal.push((b, acc.focal_b));
}

/// Predicted increment of a patch under the current state (`dtau * C = 1`).
fn predict(state: &GlobalState, p: &EventPatch) -> (Vec<f64>, Vec<Option<(usize, motion::MotionEval)>>) {
    let (a, b) = (p.frame, p.target);
    let (ka, kb) = (state.intrinsics_of(a), state.intrinsics_of(b));
    let (pa, pb) = (&state.poses[a], &state.poses[b]);
    let mut pred = Vec::with_capacity(p.gradient.len());
    let mut evals = Vec::with_capacity(p.gradient.len());
    for ((x, y, i), g) in p.pixels(state.width).zip(&p.gradient) {
        let m = if state.valid[a][i] {
            motion::eval((x as f64, y as f64), state.log_depths[a][i], ka, pa, kb, pb)
        } else {
            None
        };
        match m {
            Some(m) => {
                pred.push(-(g.0 * m.du[0] + g.1 * m.du[1]));
                evals.push(Some((i, m)));
            }
            None => {
                pred.push(0.0);
                evals.push(None);
            }
        }
    }
    (pred, evals)
}

fn event_job(state: &GlobalState, p: &EventPatch, grad: bool) -> Contrib {
    let mut c = Contrib {
        depth_frame: p.frame,
        ..Default::default()
    };
    let (pred, evals) = predict(state, p);
    let Some((loss, dp)) = patch_loss_grad(&p.observed, &pred) else {
        c.skipped = 1;
        return c;
    };
    c.value = loss;
    if grad {
        let (a, b) = (p.frame, p.target);
        let kb = state.intrinsics_of(b);
        let (pa, pb) = (&state.poses[a], &state.poses[b]);
        let mut acc = motion::MotionGrad::default();
        for ((ev, g), d) in evals.iter().zip(&p.gradient).zip(&dp) {
            let Some((i, m)) = ev else { continue };
            let mg = motion::backprop(m, [-d * g.0, -d * g.1], kb, pa, pb);
            c.depth.push((*i, mg.log_depth));
            accumulate_motion(&mut acc, &mg);
        }
        push_motion(&mut c, a, b, &acc);
    }
    c
}

/// Predicted-vs-observed patches at the current state.
pub fn predicted_patches(state: &GlobalState, patches: &[EventPatch]) -> Vec<Patch> {
    patches
        .iter()
        .map(|p| Patch {
            center: p.center,
            half_width: p.half_width,
            observed: p.observed.clone(),
            predicted: predict(state, p).0,
            corner_snr: p.corner_snr,
        })
        .collect()
}

fn align_jobs(state: &GlobalState, edges: &[PairEdge], grad: bool) -> Vec<Contrib> {
    let sigma = state.edge_scales();
    let jobs: Vec<(usize, usize, &Pointmap)> = edges
        .iter()
        .enumerate()
        .flat_map(|(e, pe)| [(e, pe.frame_a, &pe.pointmap_aa), (e, pe.frame_b, &pe.pointmap_ba)])
        .collect();
    jobs.par_iter()
        .map(|&(e, f, pm)| align_job(state, e, f, pm, sigma[e], grad))
        .collect()
}

fn sum(contribs: &[Contrib]) -> f64 {
    contribs.iter().map(|c| c.value).sum()
}

fn check(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term })
    }
}

fn check_edges(state: &GlobalState, edges: &[PairEdge]) {
    assert_eq!(edges.len(), state.n_edges(), "edge count differs between problem and state");
}

pub fn align_loss(edges: &[PairEdge], state: &GlobalState) -> f64 {
    check_edges(state, edges);
    sum(&align_jobs(state, edges, false))
}

pub fn smooth_loss(state: &GlobalState) -> f64 {
    smooth_job(state, false).value
}

pub fn flow_loss(state: &GlobalState, flows: &[FlowObservation]) -> f64 {
    flows.iter().map(|f| flow_job(state, f, false).value).sum()
}

/// Value of every term and, if requested, the gradient of the total.
pub fn evaluate(state: &GlobalState, problem: &Problem, want_grad: bool) -> Result<(LossBreakdown, Option<StateGrad>)> {
    check_edges(state, &problem.edges);
    let align = align_jobs(state, &problem.edges, want_grad);
    let smooth = smooth_job(state, want_grad);
    let flow: Vec<Contrib> = problem
        .flows
        .par_iter()
        .map(|f| flow_job(state, f, want_grad))
        .collect();
    let event: Vec<Contrib> = problem
        .patches
        .par_iter()
        .map(|p| event_job(state, p, want_grad))
        .collect();

    let w = &problem.weights;
    let mut lb = LossBreakdown {
        align: check("align", sum(&align))?,
        smooth: check("smooth", smooth.value)?,
        flow: check("flow", sum(&flow))?,
        event: check("event", sum(&event))?,
        w_smooth: w.w_smooth,
        w_flow: w.w_flow,
        w_event: problem.w_event,
        total: 0.0,
        skipped_patches: event.iter().map(|c| c.skipped).sum(),
    };
    lb.total = check("total", lb.combine())?;

    let grad = want_grad.then(|| {
        let mut g = StateGrad::zeros(state);
        for c in &align {
            c.merge_into(state, 1.0, &mut g);
        }
        smooth.merge_into(state, w.w_smooth, &mut g);
        for c in &flow {
            c.merge_into(state, w.w_flow, &mut g);
        }
        for c in &event {
            c.merge_into(state, problem.w_event, &mut g);
        }
        g
    });
    Ok((lb, grad))
}

pub fn total_objective(state: &GlobalState, problem: &Problem) -> Result<LossBreakdown> {
    Ok(evaluate(state, problem, false)?.0)
}
