use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Adam optimizer state for one parameter tensor.
///
/// Uses the bias-corrected update with the usual defaults
/// (beta1 0.9, beta2 0.999, eps 1e-8). The update rejects non-finite
/// gradients before touching either the moments or the parameter, so a
/// failed step leaves the state exactly as it was.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(numel: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update in place. Errors without mutating anything when the
    /// gradient has a non-finite entry or the wrong length.
    pub fn update(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.numel() != self.m.len() || grad.numel() != self.m.len() {
            return Err(Error::dimension(
                "adam update",
                self.m.len(),
                format!("param {} / grad {}", param.numel(), grad.numel()),
            ));
        }
        if !grad.all_finite() {
            return Err(Error::NonFinite("gradient passed to adam".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..self.m.len() {
            let g = grad.data()[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            param.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_computation() {
        // With m = 0.1*g, v = 0.001*g^2 and bias correction at step 1,
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let mut adam = AdamState::new(2, 0.1);
        adam.update(&mut p, &g).unwrap();
        let expect0 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        let expect1 = -2.0 + 0.1 * 0.25 / (0.25 + 1e-8);
        assert!((p.data()[0] - expect0).abs() < 1e-12);
        assert!((p.data()[1] - expect1).abs() < 1e-12);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (p - 3)^2 from p = 0
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut adam = AdamState::new(1, 0.1);
        for _ in 0..200 {
            let g = Tensor::new(vec![1], vec![2.0 * (p.data()[0] - 3.0)]).unwrap();
            adam.update(&mut p, &g).unwrap();
        }
        assert!(
            (p.data()[0] - 3.0).abs() < 0.05,
            "ended at {}",
            p.data()[0]
        );
    }

    #[test]
    fn rejects_non_finite_gradients_without_mutation() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut adam = AdamState::new(2, 0.1);
        let bad = Tensor::new(vec![2], vec![0.1, f64::NAN]).unwrap();
        assert!(adam.update(&mut p, &bad).is_err());
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut adam = AdamState::new(1, 0.01);
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        for expected in 1..=5 {
            adam.update(&mut p, &g).unwrap();
            assert_eq!(adam.step_count(), expected);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
            let mut adam = AdamState::new(3, 0.05);
            for k in 0..50 {
                let g: Vec<f64> = p.data().iter().map(|v| v.sin() + k as f64 * 0.01).collect();
                let g = Tensor::new(vec![3], g).unwrap();
                adam.update(&mut p, &g).unwrap();
            }
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
