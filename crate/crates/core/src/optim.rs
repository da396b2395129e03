//! Adam with per-coordinate step multipliers.

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { beta1, beta2, epsilon, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    /// One update `x ← x − lr·scale·m̂/(√v̂ + ε)`. Coordinates with zero scale stay fixed.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: f64, scale: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            if scale[i] == 0.0 {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr * scale[i] * mh / (vh.sqrt() + self.epsilon);
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

/// Geometric interpolation from `start` to `end` over `n` steps.
pub fn decayed_rate(start: f64, end: f64, step: usize, n: usize) -> f64 {
    if n <= 1 {
        return start;
    }
    start * (end / start).powf(step as f64 / (n - 1) as f64)
}
