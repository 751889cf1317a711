//! Adam over flat parameter vectors, with the exponential learning-rate
//! schedule used by the training loops.

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    /// One update; returns the L2 norm of the applied step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> f64 {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let lr_t = lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        let mut norm_sq = 0.0;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let upd = lr_t * self.m[i] / (self.v[i].sqrt() + self.epsilon);
            params[i] -= upd;
            norm_sq += upd * upd;
        }
        norm_sq.sqrt()
    }

    /// Like [`Adam::step`] but rounds every parameter through f32 after the
    /// update, keeping values exactly representable in weight files.
    pub fn step_f32(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> f64 {
        let norm = self.step(params, grads, lr);
        for p in params.iter_mut() {
            *p = *p as f32 as f64;
        }
        norm
    }
}

/// Exponential decay reaching a tenth of the initial rate at `total` steps:
/// `lr0 * 0.1^(step/total)`.
pub fn exp_decay_lr(lr0: f64, step: usize, total: usize) -> f64 {
    lr0 * 0.1f64.powf(step as f64 / total.max(1) as f64)
}
