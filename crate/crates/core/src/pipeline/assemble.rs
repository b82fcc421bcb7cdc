//! Turning frames, depths, poses and events into a state and a [`Problem`].

use crate::config::Config;
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::geometry::{motion_field, DepthMap, FrameTag, Intrinsics, Pointmap, Pose};
use crate::imaging::{enhance, illumination_fallback, snr_map, Image, SnrMap};
use crate::objective::{build_event_patches, FlowObservation, PairEdge, PatchSelection, Problem};
use crate::solver::{GlobalState, PairGraph};

fn intrinsics_for(k: &[Intrinsics], f: usize) -> &Intrinsics {
    if k.len() == 1 {
        &k[0]
    } else {
        &k[f]
    }
}

/// Pairwise pointmaps derived from depth and poses, both expressed in frame `a`.
pub fn edges_from_depth(graph: &PairGraph, depths: &[DepthMap], k: &[Intrinsics], poses: &[Pose]) -> Vec<PairEdge> {
    graph
        .edges
        .iter()
        .map(|&(a, b)| {
            let aa = Pointmap::from_depth_camera(&depths[a], intrinsics_for(k, a), a);
            let rel = poses[a].inverse().compose(&poses[b]);
            let ba = Pointmap::from_depth_camera(&depths[b], intrinsics_for(k, b), b).transformed(&rel, FrameTag::Camera(a));
            // keep the invalid markers of frame b
            let ba = Pointmap {
                points: ba
                    .points
                    .iter()
                    .zip(ba.confidence.as_ref().unwrap())
                    .map(|(p, &c)| if c > 0.0 { *p } else { crate::geometry::Vec3::zeros() })
                    .collect(),
                ..ba
            };
            PairEdge {
                frame_a: a,
                frame_b: b,
                pointmap_aa: aa,
                pointmap_ba: ba,
            }
        })
        .collect()
}

/// State whose edge poses start at the pose of each edge's first frame.
pub fn initial_state(poses: &[Pose], k: &[Intrinsics], depths: &[DepthMap], graph: &PairGraph) -> Result<GlobalState> {
    let edge_poses = graph.edges.iter().map(|&(a, _)| poses[a]).collect();
    GlobalState::new(poses.to_vec(), k.to_vec(), depths, edge_poses)
}

/// Resets edge poses to the current pose of each edge's first frame and scales to 1.
pub fn reseat_edges(state: &mut GlobalState, graph: &PairGraph) {
    state.edge_poses = graph.edges.iter().map(|&(a, _)| state.poses[a]).collect();
    state.edge_log_scales = vec![0.0; graph.edges.len()];
}

/// Flow between consecutive frames induced by the given state, shifted by `offset` pixels.
pub fn flows_from_state(state: &GlobalState, offset: [f64; 2]) -> Vec<FlowObservation> {
    (0..state.n_frames().saturating_sub(1))
        .map(|t| {
            let mf = motion_field(
                &state.depth(t),
                state.intrinsics_of(t),
                &state.poses[t],
                state.intrinsics_of(t + 1),
                &state.poses[t + 1],
            );
            FlowObservation {
                frame_a: t,
                frame_b: t + 1,
                flow: mf.du.iter().map(|d| [d[0] + offset[0], d[1] + offset[1]]).collect(),
                mask: mf.valid,
            }
        })
        .collect()
}

/// Grayscale frames for gradients and SNR maps of the enhanced frames.
pub fn prepare_frames(images: &[Image], illumination: Option<&[Image]>, cfg: &Config) -> Result<(Vec<Image>, Vec<SnrMap>)> {
    let mut gray = Vec::with_capacity(images.len());
    let mut snr = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let illum = match illumination {
            Some(m) => m[i].clone(),
            None => illumination_fallback(img, cfg.illumination.sigma, cfg.illumination.target),
        };
        let enhanced = enhance(img, &illum)?;
        snr.push(snr_map(&enhanced.to_gray(), cfg.snr.kernel, cfg.snr.epsilon)?);
        gray.push(img.to_gray());
    }
    Ok((gray, snr))
}

/// Observations the objective needs besides the state.
#[derive(Debug, Clone)]
pub struct ProblemInputs {
    pub images: Vec<Image>,
    pub illumination: Option<Vec<Image>>,
    pub events: EventStream,
    pub frame_times_us: Vec<i64>,
    pub edges: Vec<PairEdge>,
    pub flows: Vec<FlowObservation>,
}

/// Selects event patches under `state` and assembles the problem.
pub fn build_problem(inputs: &ProblemInputs, state: &GlobalState, cfg: &Config) -> Result<(Problem, PatchSelection)> {
    if inputs.images.len() != state.n_frames() {
        return Err(Error::invalid(format!(
            "{} images for {} frames",
            inputs.images.len(),
            state.n_frames()
        )));
    }
    let (gray, snr) = prepare_frames(&inputs.images, inputs.illumination.as_deref(), cfg)?;
    let selection = build_event_patches(&gray, &snr, &inputs.events, &inputs.frame_times_us, state, &cfg.patches)?;
    let problem = Problem::new(
        inputs.edges.clone(),
        inputs.flows.clone(),
        selection.patches.clone(),
        cfg.weights,
    );
    Ok((problem, selection))
}
