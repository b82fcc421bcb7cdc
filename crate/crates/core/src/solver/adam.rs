use super::{GlobalState, ParamLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// Updates the moments and returns the bias-corrected step `-lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len(), "gradient length does not match optimizer state");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad)
            .map(|((m, v), g)| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                -self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

/// One Adam update applied through the state's retraction.
pub fn adam_step(state: &GlobalState, layout: &ParamLayout, adam: &mut AdamState, grad: &[f64]) -> GlobalState {
    let delta = adam.update(grad);
    state.retract(layout, &delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut a = AdamState::new(3, 0.01, 0.9, 0.999, 1e-8);
        assert_eq!(a.update(&[0.0; 3]), vec![0.0; 3]);
        assert_eq!(a.step, 1);
    }

    #[test]
    fn first_step_is_lr() {
        let mut a = AdamState::new(1, 0.01, 0.9, 0.999, 1e-8);
        let d = a.update(&[1.0])[0];
        assert!((d + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn second_step_follows_recurrence() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut a = AdamState::new(1, lr, b1, b2, eps);
        let g = 0.37;
        a.update(&[g]);
        let d = a.update(&[g])[0];
        let m = (1.0 - b1) * g * (1.0 + b1);
        let v = (1.0 - b2) * g * g * (1.0 + b2);
        let m_hat = m / (1.0 - b1 * b1);
        let v_hat = v / (1.0 - b2 * b2);
        let want = -lr * m_hat / (v_hat.sqrt() + eps);
        assert!((d - want).abs() < 1e-16);
        assert!(a.v[0] >= 0.0);
    }
}
