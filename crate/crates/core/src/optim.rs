//! Adam, shared by model training (descent) and patch crafting (ascent).

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `t` is the 1-based
/// step count after this update.
pub fn adam_update(
    cfg: &AdamConfig,
    moments: &mut Moments,
    t: u32,
    param: &mut [f32],
    grad: &[f32],
    dir: Direction,
) {
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let sign = match dir {
        Direction::Descent => -1.0,
        Direction::Ascent => 1.0,
    };
    for i in 0..param.len() {
        let g = grad[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let step = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        param[i] += sign * cfg.lr * step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::with_lr(0.5);
        let mut mom = Moments::zeros(3);
        let mut p = vec![0.5, 0.5, 0.5];
        adam_update(&cfg, &mut mom, 1, &mut p, &[2.0, -3.0, 0.0], Direction::Ascent);
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!((p[1] - 0.0).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn descent_minimises_quadratic() {
        let cfg = AdamConfig::with_lr(0.05);
        let mut mom = Moments::zeros(1);
        let mut x = vec![3.0f32];
        for t in 1..=500 {
            let g = [2.0 * (x[0] - 1.0)];
            adam_update(&cfg, &mut mom, t, &mut x, &g, Direction::Descent);
        }
        assert!((x[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn zero_lr_is_a_null_step() {
        let cfg = AdamConfig::with_lr(0.0);
        let mut mom = Moments::zeros(2);
        let mut p = vec![0.25, 0.75];
        adam_update(&cfg, &mut mom, 1, &mut p, &[1.0, -1.0], Direction::Ascent);
        assert_eq!(p, vec![0.25, 0.75]);
    }
}
