//! Adam with decoupled weight decay.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl From<&crate::config::Config> for AdamWConfig {
    fn from(c: &crate::config::Config) -> Self {
        AdamWConfig {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Optimizer state for a fixed list of parameter slots.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, slot_sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once before updating the slots.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "parameter and gradient lengths differ");
        assert_eq!(params.len(), self.m[slot].len(), "slot size changed");
        assert!(self.step > 0, "begin_step not called");
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for j in 0..params.len() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            params[j] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * params[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &[2],
        );
        let mut p = [1.0, -1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[3.0, -0.5]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decay_without_gradient() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        let mut p = [2.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.0]);
        assert!((p[0] - 2.0 * (1.0 - 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            &[1],
        );
        let mut p = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            opt.begin_step();
            opt.update(0, &mut p, &g);
        }
        assert!((p[0] - 1.5).abs() < 1e-2);
    }
}
