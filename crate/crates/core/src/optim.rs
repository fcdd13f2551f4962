//! Adam with per-entry step counts, so sparse updates (only some entries
//! stepped on a given iteration) keep exact bias correction and leave the
//! untouched entries and their moments alone.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: Vec<u32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Grows to `len` entries with zeroed moments.
    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
        self.steps.resize(len, 0);
    }

    /// One Adam update of entry `idx`; returns the applied change.
    #[inline]
    pub fn update(&mut self, cfg: &AdamConfig, idx: usize, param: &mut f64, grad: f64, lr: f64) -> f64 {
        let m = cfg.beta1 * self.m[idx] + (1.0 - cfg.beta1) * grad;
        let v = cfg.beta2 * self.v[idx] + (1.0 - cfg.beta2) * grad * grad;
        self.m[idx] = m;
        self.v[idx] = v;
        self.steps[idx] += 1;
        let t = self.steps[idx] as i32;
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        let delta = -lr * m_hat / (v_hat.sqrt() + cfg.eps);
        *param += delta;
        delta
    }
}

/// Dense Adam step over every entry.
pub fn adam_step(state: &mut AdamState, cfg: &AdamConfig, params: &mut [f64], grads: &[f64], lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.len(), "optimizer state length mismatch");
    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(cfg, i, p, g, lr);
    }
}
