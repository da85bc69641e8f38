//! Adam optimizer with bias correction.

use std::collections::HashMap;

use crate::tensor::{real, GradStore, Real, Tensor, TensorId};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment state per parameter. Parameters that received no
/// gradient in a step are skipped entirely (their moments do not decay).
pub struct Adam<T> {
    cfg: AdamConfig,
    step_count: u64,
    m: HashMap<TensorId, Vec<T>>,
    v: HashMap<TensorId, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step_count: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &[Tensor<T>], grads: &GradStore<T>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr: T = real(self.cfg.learning_rate);
        let b1: T = real(self.cfg.beta1);
        let b2: T = real(self.cfg.beta2);
        let eps: T = real(self.cfg.eps);
        let bc1: T = real(1.0 - self.cfg.beta1.powi(t));
        let bc2: T = real(1.0 - self.cfg.beta2.powi(t));
        let one = T::one();
        for p in params {
            let Some(g) = grads.get(p) else { continue };
            let m = self.m.entry(p.id()).or_insert_with(|| vec![T::zero(); p.numel()]);
            let v = self.v.entry(p.id()).or_insert_with(|| vec![T::zero(); p.numel()]);
            let mut new_values = p.to_vec();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                new_values[i] = new_values[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.assign(&new_values);
        }
    }

    /// Moment buffers keyed by parameter name, for checkpointing.
    pub fn export_state(&self, named_params: &[(String, Tensor<T>)]) -> Vec<(String, Vec<T>, Vec<T>)> {
        let mut out = Vec::new();
        for (name, p) in named_params {
            if let (Some(m), Some(v)) = (self.m.get(&p.id()), self.v.get(&p.id())) {
                out.push((name.clone(), m.clone(), v.clone()));
            }
        }
        out
    }

    /// Restore moment buffers saved by [`Adam::export_state`].
    pub fn import_state(
        &mut self,
        named_params: &[(String, Tensor<T>)],
        entries: &[(String, Vec<T>, Vec<T>)],
        step_count: u64,
    ) {
        let by_name: HashMap<&str, &Tensor<T>> = named_params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, m, v) in entries {
            if let Some(p) = by_name.get(name.as_str()) {
                assert_eq!(m.len(), p.numel(), "optimizer state length mismatch for {name}");
                self.m.insert(p.id(), m.clone());
                self.v.insert(p.id(), v.clone());
            }
        }
        self.step_count = step_count;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, sum_all};
    use crate::tensor::Tape;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the very first Adam step is lr * sign(g).
        let p = Tensor::from_vec(&[2], vec![1.0f64, -2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let w = Tensor::from_vec(&[2], vec![3.0, -5.0]).unwrap();
        let y = mul(&mut tape, &p, &w).unwrap();
        let loss = sum_all(&mut tape, &y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.01, ..AdamConfig::default() });
        adam.step(&[p.clone()], &grads);
        let got = p.to_vec();
        assert!((got[0] - (1.0 - 0.01)).abs() < 1e-9, "{got:?}");
        assert!((got[1] - (-2.0 + 0.01)).abs() < 1e-9, "{got:?}");
    }

    #[test]
    fn params_without_grad_are_untouched() {
        let p = Tensor::from_vec(&[1], vec![4.0f64]).unwrap().with_grad();
        let tape = Tape::new();
        let loss = Tensor::scalar(0.0);
        let grads = tape.backward(&loss).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&[p.clone()], &grads);
        assert_eq!(p.to_vec(), vec![4.0]);
    }

    #[test]
    fn export_import_round_trips() {
        let p = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap().with_grad();
        let named = vec![("w".to_string(), p.clone())];
        let mut tape = Tape::new();
        let loss = sum_all(&mut tape, &p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&[p.clone()], &grads);
        let state = adam.export_state(&named);
        assert_eq!(state.len(), 1);

        let mut fresh = Adam::new(AdamConfig::default());
        fresh.import_state(&named, &state, adam.step_count());
        assert_eq!(fresh.step_count(), 1);
        let restate = fresh.export_state(&named);
        assert_eq!(state[0].1, restate[0].1);
        assert_eq!(state[0].2, restate[0].2);
    }
}
