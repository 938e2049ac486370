//! Adam with decoupled weight decay, plus the warmup/cosine schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Advances the step counter; call once per optimizer step, before
    /// updating the individual parameter tensors.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Updates parameter slot `slot` in place.
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32], lr: f32) {
        debug_assert_eq!(param.len(), grad.len());
        if self.m.len() <= slot {
            self.m.resize_with(slot + 1, Vec::new);
            self.v.resize_with(slot + 1, Vec::new);
        }
        if self.m[slot].len() != param.len() {
            self.m[slot] = vec![0.0; param.len()];
            self.v[slot] = vec![0.0; param.len()];
        }
        let t = self.t.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * param[i]);
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over the first 5% of steps, then cosine decay to zero.
    #[default]
    WarmupCosine,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f32, step: usize, total: usize) -> f32 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine => {
                let total = total.max(1);
                let warm = (total / 20).max(1);
                if step < warm {
                    base * (step + 1) as f32 / warm as f32
                } else {
                    let p = (step - warm) as f32 / (total - warm).max(1) as f32;
                    base * 0.5 * (1.0 + (std::f32::consts::PI * p.min(1.0)).cos())
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut opt = AdamW::new(0.0);
        let mut x = vec![3.0f32, -2.0];
        for _ in 0..2000 {
            opt.begin_step();
            let g: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
            opt.update(0, &mut x, &g, 0.01);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut opt = AdamW::new(0.1);
        let mut x = vec![1.0f32];
        opt.begin_step();
        opt.update(0, &mut x, &[0.0], 0.5);
        assert!((x[0] - 0.95).abs() < 1e-6);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule::WarmupCosine;
        assert!(s.lr_at(1.0, 0, 100) < s.lr_at(1.0, 4, 100));
        assert!((s.lr_at(1.0, 5, 100) - 1.0).abs() < 1e-6);
        assert!(s.lr_at(1.0, 99, 100) < 0.01);
    }
}
