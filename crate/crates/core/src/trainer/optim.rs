use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay over a flat parameter slice.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        AdamW {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let AdamWConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * weight_decay * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Cosine decay from `base` at step 0 towards 0 at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = step as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Linear warmup over the first `warmup` steps, then cosine decay over the rest.
pub fn warmup_cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(base, step - warmup, total.saturating_sub(warmup))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, -2.0], 0.1);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.1);
        assert!((p[0] - 1.9).abs() < 1e-12);

        let mut opt = AdamW::new(cfg, 1);
        let mut p = vec![2.0];
        opt.step(&mut p, &[3.0], 0.0);
        assert_eq!(p[0], 2.0);
    }

    #[test]
    fn warmup_ramps_then_decays() {
        assert_eq!(warmup_cosine_lr(1.0, 0, 10, 0), 1.0);
        assert!((warmup_cosine_lr(1.0, 0, 14, 4) - 0.25).abs() < 1e-15);
        assert_eq!(warmup_cosine_lr(1.0, 3, 14, 4), 1.0);
        assert_eq!(warmup_cosine_lr(1.0, 4, 14, 4), 1.0);
        assert!((warmup_cosine_lr(1.0, 9, 14, 4) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(AdamWConfig::default(), 3);
        let target = [1.0, -2.0, 0.5];
        let mut p = vec![0.0; 3];
        for step in 0..3000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            opt.step(&mut p, &g, cosine_lr(0.05, step, 3000));
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 0.05, "{x} vs {t}");
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for s in 0..=10 {
            let lr = cosine_lr(2.0, s, 10);
            assert!(lr <= last);
            last = lr;
        }
    }
}
