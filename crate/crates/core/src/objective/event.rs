/// Square window around a corner with observed and predicted increment images.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: (usize, usize),
    pub half_width: usize,
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
    pub corner_snr: f64,
}

impl Patch {
    pub fn side(&self) -> usize {
        2 * self.half_width + 1
    }
}

/// Sum over patches plus the number of patches skipped for a zero-norm side.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EventLossValue {
    pub loss: f64,
    pub skipped: usize,
}

/// `-grad(I) . du * scale` per pixel.
pub fn predicted_increment(gradient: &[(f64, f64)], motion: &[[f64; 2]], scale: f64) -> Vec<f64> {
    assert_eq!(gradient.len(), motion.len(), "gradient and motion patch sizes differ");
    gradient
        .iter()
        .zip(motion)
        .map(|(g, m)| -(g.0 * m[0] + g.1 * m[1]) * scale)
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Squared distance between the unit-normalized patches, or `None` when either is zero.
pub fn patch_loss(observed: &[f64], predicted: &[f64]) -> Option<f64> {
    let no = norm(observed);
    let np = norm(predicted);
    if no == 0.0 || np == 0.0 {
        return None;
    }
    Some(
        observed
            .iter()
            .zip(predicted)
            .map(|(o, p)| {
                let d = o / no - p / np;
                d * d
            })
            .sum(),
    )
}

/// Loss and its derivative with respect to each predicted pixel.
///
/// With `n = p/|p|`, `dL/dp = -2 (I - n n^T) o_hat / |p|`.
pub fn patch_loss_grad(observed: &[f64], predicted: &[f64]) -> Option<(f64, Vec<f64>)> {
    let no = norm(observed);
    let np = norm(predicted);
    if no == 0.0 || np == 0.0 {
        return None;
    }
    let mut loss = 0.0;
    let mut on = 0.0;
    for (o, p) in observed.iter().zip(predicted) {
        let (oh, n) = (o / no, p / np);
        loss += (oh - n) * (oh - n);
        on += oh * n;
    }
    let grad = observed
        .iter()
        .zip(predicted)
        .map(|(o, p)| -2.0 * (o / no - on * p / np) / np)
        .collect();
    Some((loss, grad))
}

pub fn event_loss(patches: &[Patch]) -> EventLossValue {
    let mut out = EventLossValue::default();
    for p in patches {
        match patch_loss(&p.observed, &p.predicted) {
            Some(l) => out.loss += l,
            None => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        log::warn!("{} of {} event patches skipped (zero norm)", out.skipped, patches.len());
    }
    out
}

/// `w_base * mean(1 - S_norm)` with min-max normalized corner SNRs.
pub fn event_weight(corner_snrs: &[f64], w_base: f64) -> f64 {
    if corner_snrs.is_empty() {
        return 0.5 * w_base;
    }
    let lo = corner_snrs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = corner_snrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return 0.5 * w_base;
    }
    let mean = corner_snrs.iter().map(|s| 1.0 - (s - lo) / (hi - lo)).sum::<f64>()
        / corner_snrs.len() as f64;
    w_base * mean
}
