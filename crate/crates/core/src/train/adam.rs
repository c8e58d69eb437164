//! Bias-corrected Adam.

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn new(n: usize) -> Self {
        AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam update: `w -= lr * m_hat / (sqrt(v_hat) + eps)` with bias
/// correction at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    weights: &mut [f64],
    grads: &[f64],
    slot: &mut AdamSlot,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert_eq!(weights.len(), grads.len());
    debug_assert_eq!(weights.len(), slot.m.len());
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..weights.len() {
        let g = grads[i];
        slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
        slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
        let m_hat = slot.m[i] / bc1;
        let v_hat = slot.v[i] / bc2;
        weights[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state for a full parameter list (one slot per tensor, in the
/// model's declaration order).
#[derive(Debug, Clone)]
pub struct Adam {
    pub slots: Vec<AdamSlot>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(sizes: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            slots: sizes.iter().map(|&n| AdamSlot::new(n)).collect(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// Advance the shared step counter (call once per batch).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, weights: &mut [f64], grads: &[f64]) {
        adam_step(
            weights,
            grads,
            &mut self.slots[slot],
            self.t,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_scaled() {
        // with fresh state, m_hat = g and v_hat = g^2, so the update is
        // -lr * g / (|g| + eps)
        let lr = 1e-3;
        let eps = 1e-8;
        let g = [0.25, -3.0, 1e-4];
        let mut w = [1.0, 1.0, 1.0];
        let mut slot = AdamSlot::new(3);
        adam_step(&mut w, &g, &mut slot, 1, lr, 0.9, 0.999, eps);
        for i in 0..3 {
            let expect = 1.0 - lr * g[i] / (g[i].abs() + eps);
            assert!((w[i] - expect).abs() < 1e-15, "{i}: {} vs {expect}", w[i]);
        }
    }

    #[test]
    fn zero_gradient_leaves_weights_unchanged() {
        let mut w = [0.5, -0.25];
        let mut slot = AdamSlot::new(2);
        for t in 1..=5 {
            adam_step(&mut w, &[0.0, 0.0], &mut slot, t, 1e-2, 0.9, 0.999, 1e-8);
        }
        assert_eq!(w, [0.5, -0.25]);
    }

    #[test]
    fn two_steps_match_hand_trace() {
        // fixed gradient g = 0.5, lr = 0.1, betas 0.9/0.999, eps 1e-8
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let g = 0.5;
        let mut w = [2.0];
        let mut slot = AdamSlot::new(1);
        adam_step(&mut w, &[g], &mut slot, 1, lr, b1, b2, eps);
        adam_step(&mut w, &[g], &mut slot, 2, lr, b1, b2, eps);

        // hand trace
        let mut m = 0.0;
        let mut v = 0.0;
        let mut wh = 2.0;
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            wh -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((w[0] - wh).abs() < 1e-12, "{} vs {wh}", w[0]);
    }
}
