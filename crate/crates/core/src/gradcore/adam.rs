use crate::error::{Error, Result};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update from the gradients currently held in `params`.
    ///
    /// Gradients are left untouched. A non-finite gradient aborts the step
    /// before any value changes.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let (names, values, grads) = params.update_parts();
        for (t, g) in grads.iter().enumerate() {
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor: names[t].clone(),
                    index,
                });
            }
        }
        while self.m.len() < values.len() {
            let n = values[self.m.len()].len();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }

        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = params.step() as i32 + 1;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let (_, values, grads) = params.update_parts();
        for (((x, g), m), v) in values.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..x.len() {
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                x[k] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.advance_step();
        Ok(())
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64, g: f64) -> ParamStore {
        let mut p = ParamStore::new();
        let id = p.add("x", &[1], vec![x]).unwrap();
        p.grad_mut(id)[0] = g;
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = ParamStore::new();
        let id = p.add("w", &[3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p.value(id), &[0.5, -1.0, 2.0]);
        assert_eq!(p.step(), 5);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        // m = 0.1, v = 0.001; corrected both to 1 -> update lr / (1 + eps)
        let mut p = scalar(0.0, 1.0);
        Adam::new(AdamConfig::with_lr(0.001)).step(&mut p).unwrap();
        let expected = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p.value(crate::gradcore::TensorId(0))[0] - expected).abs() < 1e-18);
        // grads untouched
        assert_eq!(p.grad(crate::gradcore::TensorId(0))[0], 1.0);
    }

    #[test]
    fn memoryless_adam_is_normalized_sgd() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        for &g in &[3.0, -0.25, 1e-3] {
            let mut p = scalar(1.0, g);
            Adam::new(cfg).step(&mut p).unwrap();
            let expected = 1.0 - 0.1 * g / (g.abs() + 1e-8);
            assert!((p.value(crate::gradcore::TensorId(0))[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_tensor_name() {
        let mut p = ParamStore::new();
        p.add("ok", &[1], vec![1.0]).unwrap();
        let bad = p.add("bad", &[2], vec![1.0, 1.0]).unwrap();
        p.grad_mut(bad)[1] = f64::NAN;
        let err = Adam::new(AdamConfig::default()).step(&mut p).unwrap_err();
        match err {
            Error::NonFiniteGradient { tensor, index } => {
                assert_eq!(tensor, "bad");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.value(bad), &[1.0, 1.0]);
        assert_eq!(p.step(), 0);
    }

    #[test]
    fn deterministic_and_second_moment_nonnegative() {
        let run = || {
            let mut p = ParamStore::new();
            let id = p.add("w", &[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
            let mut adam = Adam::new(AdamConfig::with_lr(0.01));
            for s in 0..20 {
                for (k, g) in p.grad_mut(id).iter_mut().enumerate() {
                    *g = ((s * 7 + k * 3) as f64).sin();
                }
                adam.step(&mut p).unwrap();
                assert!(adam.second_moments().iter().flatten().all(|&v| v >= 0.0));
            }
            p.value(id).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
