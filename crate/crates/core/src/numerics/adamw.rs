//! Adam with decoupled weight decay, plus global-norm gradient clipping.

use super::Tensor;

/// Adam optimizer with decoupled weight decay: the decay term multiplies the
/// weights by (1 - lr * weight_decay) each step, outside the moment-based
/// update, so decay strength does not depend on gradient scale.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Standard betas (0.9, 0.999) and eps 1e-8; moments sized per parameter.
    pub fn new(learning_rate: f64, weight_decay: f64, param_sizes: &[usize]) -> AdamW {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from the gradients currently stored on `params`. Gradients
    /// are left untouched (zero them before the next accumulation).
    pub fn step(&mut self, params: &mut [Tensor]) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for different parameters");
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (p, (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(p.numel(), m.len(), "parameter size changed under optimizer");
            let decay = 1.0 - self.learning_rate * self.weight_decay;
            // Copy the gradient out first: values_mut may reallocate the
            // value buffer (copy-on-write) but the grad buffer is separate.
            let grad = p.grad().to_vec();
            let w = p.values_mut();
            for i in 0..w.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] = w[i] * decay - self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut [Tensor], max_norm: f64) -> f64 {
    let norm_sq: f64 = params
        .iter()
        .map(|p| p.grad().iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            for g in p.grad_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With g=1 the bias-corrected moments are mhat=1, vhat=1, so the
        // update is lr/(1+eps) and w goes from 1.0 to ~0.9.
        let mut w = Tensor::new(&[1], vec![1.0]).unwrap();
        w.accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(0.1, 0.0, &[1]);
        opt.step(std::slice::from_mut(&mut w));
        assert!((w.values()[0] - 0.9).abs() < 1e-7, "w = {}", w.values()[0]);
    }

    #[test]
    fn decay_is_decoupled_from_gradients() {
        // Zero gradient: the only movement is the multiplicative decay
        // (1 - lr * wd) = 0.99, independent of the adaptive terms.
        let mut w = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.1, &[1]);
        opt.step(std::slice::from_mut(&mut w));
        assert_eq!(w.values()[0], 0.99);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut w = Tensor::new(&[1], vec![10.0]).unwrap();
        let mut opt = AdamW::new(0.05, 0.0, &[1]);
        for _ in 0..2000 {
            let grad = 2.0 * (w.values()[0] - 3.0);
            w.zero_grad();
            w.accumulate_grad(&[grad]);
            opt.step(std::slice::from_mut(&mut w));
        }
        assert!((w.values()[0] - 3.0).abs() < 1e-2, "w = {}", w.values()[0]);
    }

    #[test]
    fn steps_are_bitwise_deterministic() {
        let run = || {
            let mut w = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
            let mut opt = AdamW::new(0.01, 1e-4, &[2]);
            for k in 0..50 {
                w.zero_grad();
                let g: Vec<f64> = w.values().iter().map(|x| x.sin() + k as f64 * 0.01).collect();
                w.accumulate_grad(&g);
                opt.step(std::slice::from_mut(&mut w));
            }
            w.values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_rescales_to_unit_norm() {
        let mut w = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        w.accumulate_grad(&[3.0, 4.0]);
        let mut params = vec![w];
        let norm = clip_global_norm(&mut params, 1.0);
        assert_eq!(norm, 5.0);
        let g = params[0].grad();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        // A small gradient is left alone.
        params[0].zero_grad();
        params[0].accumulate_grad(&[0.1, 0.0]);
        let norm2 = clip_global_norm(&mut params, 1.0);
        assert_eq!(norm2, 0.1);
        assert_eq!(params[0].grad()[0], 0.1);
    }
}
