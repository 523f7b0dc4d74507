//! Adam with bias correction and a stepped learning-rate decay.

use super::nn::ParamSet;
use super::TensorError;

pub struct AdamState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate is multiplied by `decay_factor` once per
    /// `decay_period_steps` optimizer steps.
    pub decay_factor: f64,
    pub decay_period_steps: u64,
}

impl AdamState {
    pub fn new(learning_rate: f64, decay_factor: f64, decay_period_steps: u64) -> Self {
        AdamState {
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_factor,
            decay_period_steps,
        }
    }

    /// Learning rate in effect after `steps` completed steps.
    pub fn effective_lr(&self, steps: u64) -> f64 {
        if self.decay_period_steps == 0 {
            return self.learning_rate;
        }
        let decays = steps / self.decay_period_steps;
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }

    /// One optimizer step over every trainable parameter. Gradients must
    /// have been populated; a missing buffer is an error naming the
    /// parameter.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), TensorError> {
        if self.first_moment.is_empty() {
            self.first_moment = params
                .iter()
                .map(|p| vec![0.0; if p.trainable() { p.tensor.numel() } else { 0 }])
                .collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step_count += 1;
        let t = self.step_count;
        let lr = self.effective_lr(t);
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for idx in 0..params.len() {
            let id = super::nn::ParamId(idx);
            if !params.get(id).trainable() {
                continue;
            }
            let grad = match params.get(id).tensor.grad.clone() {
                Some(g) => g,
                None => {
                    return Err(TensorError::MissingGrad {
                        name: params.get(id).name.clone(),
                    })
                }
            };
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let data = params.data_mut(id);
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> (ParamSet, super::super::nn::ParamId) {
        let mut params = ParamSet::new();
        let id = params.register("p", vec![1], vec![value], true).unwrap();
        (params, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut params, id) = single_param(1.5);
        params.get_mut(id).tensor.grad = Some(vec![0.0]);
        let mut adam = AdamState::new(0.1, 1.0, 0);
        adam.step(&mut params).unwrap();
        assert_eq!(params.data(id)[0], 1.5);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // bias correction makes the very first step lr * g / (|g| + eps)
        let (mut params, id) = single_param(1.0);
        params.get_mut(id).tensor.grad = Some(vec![1.0]);
        let mut adam = AdamState::new(0.1, 1.0, 0);
        adam.step(&mut params).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params.data(id)[0] - expected).abs() < 1e-15);
        assert!((params.data(id)[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_schedule_arithmetic() {
        let adam = AdamState::new(0.1, 0.7, 10);
        assert_eq!(adam.effective_lr(0), 0.1);
        assert_eq!(adam.effective_lr(9), 0.1);
        let after_25 = 0.1 * 0.7 * 0.7;
        assert!((adam.effective_lr(25) - after_25).abs() < 1e-15);
        assert!((adam.effective_lr(25) - 0.049).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (mut params, _) = single_param(1.0);
        let mut adam = AdamState::new(0.1, 1.0, 0);
        match adam.step(&mut params) {
            Err(TensorError::MissingGrad { name }) => assert_eq!(name, "p"),
            other => panic!("expected missing grad, got {:?}", other),
        }
    }

    #[test]
    fn step_count_increments() {
        let (mut params, id) = single_param(0.0);
        params.get_mut(id).tensor.grad = Some(vec![0.5]);
        let mut adam = AdamState::new(0.01, 1.0, 0);
        for expected in 1..=3 {
            adam.step(&mut params).unwrap();
            assert_eq!(adam.step_count, expected);
        }
    }
}
