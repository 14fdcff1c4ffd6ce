use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{DcnError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            params
                .ids()
                .map(|id| Tensor::zeros(params.get(id).shape()))
                .collect()
        };
        Adam {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(DcnError::config(format!(
                "adam: {} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.first_moment.len(),
                params.len()
            )));
        }
        for (id, name, p) in params.iter() {
            let g = &grads[id.0];
            if g.shape() != p.shape() || self.first_moment[id.0].shape() != p.shape() {
                return Err(DcnError::config(format!(
                    "adam: gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(DcnError::NonFinite {
                    what: format!("gradient of parameter {name}"),
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bias1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bias2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);

        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(crate::autograd::ParamId(i));
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut params = one_param(0.0);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &params,
        );
        adam.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((params.get(crate::autograd::ParamId(0)).item() - expected).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = one_param(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            adam.step(&mut params, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(params.get(crate::autograd::ParamId(0)).item(), 0.7);
    }

    #[test]
    fn independent_parameters_update_independently() {
        let mut params = ParamStore::<f64>::new();
        let a = params.add("a", Tensor::scalar(1.0));
        let b = params.add("b", Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::scalar(2.0), Tensor::scalar(0.0)])
            .unwrap();
        assert!(params.get(a).item() < 1.0);
        assert_eq!(params.get(b).item(), 1.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(err.to_string().contains("parameter w"), "{err}");
        assert_eq!(adam.step, 0);
    }
}
