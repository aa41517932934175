use crate::error::{Result, TensorError};
use crate::params::Params;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first
/// step and indexed by parameter id.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> Option<&[f64]> {
        self.first.get(index).map(Vec::as_slice)
    }

    pub fn second_moment(&self, index: usize) -> Option<&[f64]> {
        self.second.get(index).map(Vec::as_slice)
    }

    /// Applies one update to every trainable group. All trainable groups must
    /// carry a gradient buffer; frozen groups are skipped.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        for (_, name, t) in params.iter() {
            if t.requires_grad && t.grad.is_none() {
                return Err(TensorError::MissingGradient(name.to_string()));
            }
        }
        while self.first.len() < params.len() {
            let t = params.get(params.ids().nth(self.first.len()).expect("in range"));
            self.first.push(vec![0.0; t.numel()]);
            self.second.push(vec![0.0; t.numel()]);
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let tensor = params.get_mut(id);
            if !tensor.requires_grad {
                continue;
            }
            let grad = tensor.grad.take().expect("checked above");
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (((p, g), m), v) in tensor
                .values_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Params::new();
        let id = p.add("w", Tensor::filled(&[1, 1], 0.5)).unwrap();
        p.get_mut(id).grad = Some(vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = 0.001 · 1 / (1 + 1e-8)
        let expected = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!((p.get(id).values()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Params::new();
        let id = p.add("w", Tensor::filled(&[1, 2], 0.5)).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        p.get_mut(id).grad = Some(vec![1.0, 1.0]);
        adam.step(&mut p).unwrap();
        let after_first = p.get(id).values().to_vec();
        let m1 = adam.first_moment(0).unwrap()[0];

        p.zero_grad();
        adam.step(&mut p).unwrap();
        // with g = 0 the update still uses the decayed moment; make a fresh
        // optimizer to check the pure zero-gradient case
        let m2 = adam.first_moment(0).unwrap()[0];
        assert!(m2.abs() < m1.abs());

        let mut q = Params::new();
        let qid = q.add("w", Tensor::filled(&[1, 2], 0.5)).unwrap();
        q.zero_grad();
        let mut fresh = Adam::new(AdamConfig::default());
        fresh.step(&mut q).unwrap();
        assert_eq!(q.get(qid).values(), &[0.5, 0.5]);
        assert_eq!(fresh.first_moment(0).unwrap(), &[0.0, 0.0]);
        assert!(after_first[0] < 0.5);
    }

    #[test]
    fn missing_gradient_names_group() {
        let mut p = Params::new();
        p.add("enc.basic.l0.fwd.wx", Tensor::zeros(&[1])).unwrap();
        let err = Adam::new(AdamConfig::default()).step(&mut p).unwrap_err();
        assert!(err.to_string().contains("enc.basic.l0.fwd.wx"));
    }

    #[test]
    fn frozen_groups_are_skipped() {
        let mut p = Params::new();
        let id = p.add("emb", Tensor::filled(&[1, 1], 1.0)).unwrap();
        p.set_trainable(id, false);
        Adam::new(AdamConfig::default()).step(&mut p).unwrap();
        assert_eq!(p.get(id).values(), &[1.0]);
    }
}
