//! SGD with momentum, L2 weight decay added to the gradient, and a stepped
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub gamma: f64,
    /// Iterations (0-based) at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    /// Reference solver settings: base 0.0025, decay by 0.1 at 6000 and 8000.
    pub fn reference() -> LrSchedule {
        LrSchedule {
            base_lr: 0.0025,
            gamma: 0.1,
            milestones: vec![6000, 8000],
        }
    }

    /// The reference schedule compressed onto a shorter run, milestones at
    /// the same 60% / 80% marks. Marks that collapse to zero or collide on
    /// very short runs are dropped.
    pub fn reference_scaled(total_steps: usize) -> LrSchedule {
        let mut milestones = vec![total_steps * 6 / 10, total_steps * 8 / 10];
        milestones.dedup();
        milestones.retain(|&m| m > 0);
        LrSchedule {
            base_lr: 0.0025,
            gamma: 0.1,
            milestones,
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= iteration).count();
        self.base_lr * self.gamma.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_lr > 0.0) {
            return Err("base_lr must be positive".into());
        }
        if !(self.gamma > 0.0) {
            return Err("gamma must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[1] <= w[0]) {
            return Err("milestones must be strictly increasing".into());
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers, aligned with the canonical tensor order.
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &[&Tensor]) -> SgdState {
        SgdState {
            velocity: params.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }
}

/// One update: `v = momentum * v + (g + weight_decay * w); w -= lr * v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.velocity.len());
    for ((w, g), v) in params.iter_mut().zip(grads.iter()).zip(state.velocity.iter_mut()) {
        debug_assert_eq!(w.shape, g.shape);
        for i in 0..w.data.len() {
            let grad = g.data[i] + weight_decay * w.data[i];
            v.data[i] = momentum * v.data[i] + grad;
            w.data[i] -= lr * v.data[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_single_param() {
        let mut w = Tensor::from_vec(&[1], vec![1.0]);
        let g = Tensor::from_vec(&[1], vec![1.0]);
        let mut state = SgdState::new(&[&w]);
        sgd_step(&mut [&mut w], &[g], &mut state, 0.1, 0.0, 0.0);
        assert!((w.data[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut w = Tensor::from_vec(&[2], vec![0.5, -0.25]);
        let g = Tensor::zeros(&[2]);
        let mut state = SgdState::new(&[&w]);
        sgd_step(&mut [&mut w], &[g], &mut state, 0.1, 0.9, 0.0);
        assert_eq!(w.data, vec![0.5, -0.25]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut w = Tensor::from_vec(&[1], vec![0.0]);
        let g = Tensor::from_vec(&[1], vec![1.0]);
        let mut state = SgdState::new(&[&w]);
        sgd_step(&mut [&mut w], &[g.clone()], &mut state, 1.0, 0.9, 0.0);
        assert!((w.data[0] + 1.0).abs() < 1e-15);
        sgd_step(&mut [&mut w], &[g], &mut state, 1.0, 0.9, 0.0);
        // v = 0.9 * 1 + 1 = 1.9; w = -1 - 1.9
        assert!((w.data[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_added_to_gradient() {
        let mut w = Tensor::from_vec(&[1], vec![2.0]);
        let g = Tensor::zeros(&[1]);
        let mut state = SgdState::new(&[&w]);
        sgd_step(&mut [&mut w], &[g], &mut state, 0.5, 0.0, 0.1);
        // grad = 0 + 0.1 * 2 = 0.2; w = 2 - 0.5 * 0.2
        assert!((w.data[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn reference_schedule_drops() {
        let s = LrSchedule::reference();
        assert!((s.lr_at(0) - 0.0025).abs() < 1e-18);
        assert!((s.lr_at(5999) - 0.0025).abs() < 1e-18);
        assert!((s.lr_at(6000) - 0.00025).abs() < 1e-18);
        assert!((s.lr_at(7999) - 0.00025).abs() < 1e-18);
        assert!((s.lr_at(8000) - 0.000025).abs() < 1e-18);
    }

    #[test]
    fn scaled_schedule_keeps_marks() {
        let s = LrSchedule::reference_scaled(500);
        assert_eq!(s.milestones, vec![300, 400]);
        assert!((s.lr_at(299) - 0.0025).abs() < 1e-18);
        assert!((s.lr_at(300) - 0.00025).abs() < 1e-18);
    }
}
