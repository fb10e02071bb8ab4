//! Gradient-based parameter updates.

use serde::{Deserialize, Serialize};

use super::Tensor;

/// Adaptive-moment optimizer with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    params: Vec<Tensor>,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Optimizer moments in checkpoint form; order matches the parameter
/// registration order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Self {
        Adam::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: Vec<Tensor>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            params,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update over every registered parameter. Parameters without a
    /// populated gradient are treated as zero-gradient (their moments still
    /// decay).
    pub fn step(&mut self) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
            let mut vals = p.values();
            for (j, g) in grad.iter().enumerate() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                vals[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.set_values(&vals);
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step_count: self.step_count,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn load_state(&mut self, state: AdamState) {
        self.step_count = state.step_count;
        self.m = state.m;
        self.v = state.v;
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm; the caller can log when it exceeded the cap.
pub fn clip_global_norm(params: &[Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params {
            let scaled = p.grad().map(|g| g.iter().map(|x| x * scale).collect::<Vec<f64>>());
            if let Some(s) = scaled {
                p.zero_grad();
                p.accumulate_stored_grad(&s);
            }
        }
    }
    norm
}
