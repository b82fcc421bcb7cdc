//! The optimization variable, its flat parameterization, Adam and the
//! sliding-window pair graph.

mod adam;
mod state;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{evaluate, LossBreakdown, Problem, StateGrad};

pub use adam::{adam_step, AdamState};
pub use state::{DepthMode, GlobalState, IntrinsicsMode, ParamLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub window: usize,
    pub stride: usize,
    pub depth_mode: DepthMode,
    pub intrinsics_mode: IntrinsicsMode,
    pub optimize_focal: bool,
    pub log_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            window: 10,
            stride: 1,
            depth_mode: DepthMode::PerPixel,
            intrinsics_mode: IntrinsicsMode::Shared,
            optimize_focal: false,
            log_every: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::schema("solver.iters", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::schema("solver.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::schema("solver.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::schema("solver.eps", "must be positive"));
        }
        if self.window < 2 {
            return Err(Error::schema("solver.window", "must be >= 2"));
        }
        if self.stride == 0 {
            return Err(Error::schema("solver.stride", "must be >= 1"));
        }
        Ok(())
    }

    pub fn layout(&self, state: &GlobalState) -> ParamLayout {
        ParamLayout::new(state, self.depth_mode, self.optimize_focal)
    }
}

/// Frame pairs `(i, j)`, `i < j`, with `j - i < window` and `i` on the stride.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairGraph {
    pub edges: Vec<(usize, usize)>,
    pub window: usize,
    pub stride: usize,
}

pub fn build_pair_graph(n_frames: usize, window: usize, stride: usize) -> Result<PairGraph> {
    if window < 2 {
        return Err(Error::invalid(format!("window must be >= 2, got {window}")));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let edges = (0..n_frames)
        .step_by(stride)
        .flat_map(|i| (i + 1..n_frames.min(i + window)).map(move |j| (i, j)))
        .collect();
    Ok(PairGraph {
        edges,
        window,
        stride,
    })
}

/// Lays out a structured gradient as a flat vector.
pub fn flatten_gradient(layout: &ParamLayout, g: &StateGrad) -> Vec<f64> {
    let mut out = vec![0.0; layout.len()];
    for (f, p) in g.pose.iter().enumerate() {
        let o = layout.pose_offset(f);
        out[o..o + 6].copy_from_slice(p.as_slice());
    }
    if layout.optimize_focal {
        for (k, v) in g.focal.iter().enumerate() {
            let o = layout.focal_offset(k);
            out[o..o + 2].copy_from_slice(v);
        }
    }
    for (f, d) in g.depth.iter().enumerate() {
        let o = layout.depth_offset(f);
        match layout.depth_mode {
            DepthMode::PerPixel => out[o..o + layout.pixels].copy_from_slice(d),
            DepthMode::FrameScale => out[o] = d.iter().sum(),
        }
    }
    // the scales enter through s_e - mean(s)
    let e = g.edge_log_scale.len();
    if e > 0 {
        let mean = g.edge_log_scale.iter().sum::<f64>() / e as f64;
        for (i, v) in g.edge_log_scale.iter().enumerate() {
            out[layout.scale_offset(i)] = v - mean;
        }
    }
    for (i, p) in g.edge_pose.iter().enumerate() {
        let o = layout.edge_pose_offset(i);
        out[o..o + 6].copy_from_slice(p.as_slice());
    }
    out
}

/// Loss breakdown and flat gradient of the total objective.
pub fn gradient(
    state: &GlobalState,
    problem: &Problem,
    layout: &ParamLayout,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (lb, g) = evaluate(state, problem, true)?;
    let g = g.expect("gradient requested");
    Ok((lb, flatten_gradient(layout, &g)))
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub state: GlobalState,
    /// Loss before each step, followed by the loss of the returned state.
    pub trace: Vec<LossBreakdown>,
    /// Set when a non-finite loss stopped the run early.
    pub diverged: Option<&'static str>,
}

pub fn optimize(init: &GlobalState, problem: &Problem, cfg: &SolverConfig) -> Result<OptimizeResult> {
    cfg.validate()?;
    let layout = cfg.layout(init);
    let mut adam = AdamState::new(layout.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut state = init.clone();
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    for it in 0..cfg.iters {
        let (lb, g) = match gradient(&state, problem, &layout) {
            Ok(v) => v,
            Err(Error::NonFinite { term }) => return Ok(diverged(state, trace, term, it)),
            Err(e) => return Err(e),
        };
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            log::error!("non-finite gradient at {}", layout.describe(i));
            return Ok(diverged(state, trace, "gradient", it));
        }
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            log::info!(
                "iter {it:4} total {:.6e} align {:.4e} smooth {:.4e} flow {:.4e} event {:.4e}",
                lb.total,
                lb.align,
                lb.smooth,
                lb.flow,
                lb.event
            );
        }
        trace.push(lb);
        let next = adam_step(&state, &layout, &mut adam, &g);
        if !next.is_finite() {
            return Ok(diverged(state, trace, "state", it));
        }
        state = next;
    }
    match evaluate(&state, problem, false) {
        Ok((lb, _)) => trace.push(lb),
        Err(Error::NonFinite { term }) => return Ok(diverged(state, trace, term, cfg.iters)),
        Err(e) => return Err(e),
    }
    Ok(OptimizeResult {
        state,
        trace,
        diverged: None,
    })
}

fn diverged(state: GlobalState, trace: Vec<LossBreakdown>, term: &'static str, it: usize) -> OptimizeResult {
    log::error!("optimization diverged at iteration {it} ({term})");
    OptimizeResult {
        state,
        trace,
        diverged: Some(term),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_graph_examples() {
        let g = build_pair_graph(3, 3, 1).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(build_pair_graph(5, 2, 1).unwrap().edges, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        let (n, w) = (20, 10);
        let count: usize = (0..n).map(|i: usize| (w - 1).min(n - 1 - i)).sum();
        assert_eq!(build_pair_graph(n, w, 1).unwrap().edges.len(), count);
        assert!(build_pair_graph(4, 1, 1).is_err());
    }

    #[test]
    fn pair_graph_stride_subsamples_sources() {
        let g = build_pair_graph(6, 3, 2).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (2, 3), (2, 4), (4, 5)]);
        for (a, b) in g.edges {
            assert!(b - a < 3);
        }
    }

    #[test]
    fn config_rejects_zero_iters() {
        let cfg = SolverConfig {
            iters: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
