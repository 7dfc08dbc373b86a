use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for an ordered list of parameters. The moments are
/// allocated on the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update over `(name, param, grad)` triples.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor, &Tensor)]) -> Result<()> {
        for (name, p, g) in params.iter() {
            if p.dims() != g.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has dims {:?} but gradient {:?}",
                    p.dims(),
                    g.dims()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, p, _)| Tensor::zeros(p.dims()))
                .collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, (_, p, _))| m.dims() != p.dims())
        {
            return Err(Error::Shape(
                "parameter list changed between Adam steps".into(),
            ));
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((m, v), (_, p, g)) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(params.iter_mut())
        {
            let iter = m
                .values_mut()
                .iter_mut()
                .zip(v.values_mut())
                .zip(p.values_mut())
                .zip(g.values());
            for (((mi, vi), pi), &gi) in iter {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec_t(&[1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut s = AdamState::new(AdamConfig::default());
        s.step(&mut [("p", &mut p, &g)]).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let g_val = 0.37;
        let mut p = vec_t(&[0.0; 3]);
        let g = vec_t(&[g_val; 3]);
        let mut s = AdamState::new(cfg);
        s.step(&mut [("p", &mut p, &g)]).unwrap();
        // m_hat = g and v_hat = g^2 after bias correction.
        let expected = -cfg.lr * g_val / (g_val + cfg.eps);
        for &x in p.values() {
            assert!((x - expected).abs() < 1e-15);
            assert!((x + 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn first_step_direction_is_minus_sign() {
        let g = vec_t(&[3.0, -1e-3, 2e-6, -50.0]);
        let mut p = Tensor::zeros(&[4]);
        AdamState::new(AdamConfig::default())
            .step(&mut [("p", &mut p, &g)])
            .unwrap();
        for (x, gi) in p.values().iter().zip(g.values()) {
            assert_eq!(x.signum(), -gi.signum());
        }
    }

    #[test]
    fn replay_matches_sequential_steps() {
        let grads = [vec_t(&[0.5, -1.0]), vec_t(&[0.1, 2.0])];
        let mut a = vec_t(&[1.0, 1.0]);
        let mut sa = AdamState::new(AdamConfig::default());
        for g in &grads {
            sa.step(&mut [("w", &mut a, g)]).unwrap();
        }
        let mut b = vec_t(&[1.0, 1.0]);
        let mut sb = AdamState::new(AdamConfig::default());
        sb.step(&mut [("w", &mut b, &grads[0])]).unwrap();
        sb.step(&mut [("w", &mut b, &grads[1])]).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(sa.v.iter().all(|v| v.values().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec_t(&[1.0]);
        let g = Tensor {
            dims: vec![1],
            values: vec![f64::INFINITY],
        };
        let mut s = AdamState::new(AdamConfig::default());
        match s.step(&mut [("conv3.kernel", &mut p, &g)]) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "conv3.kernel"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.t, 0);
        assert_eq!(p.values(), &[1.0]);
    }
}
