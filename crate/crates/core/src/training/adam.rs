use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments, indexed by parameter id.
#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar = f32> {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    first: Vec<Option<Tensor<F>>>,
    second: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        AdamState { config, lr, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<F>, &Tensor<F>)> {
        match (self.first.get(id.0)?, self.second.get(id.0)?) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    /// One bias-corrected update. Frozen parameters are skipped entirely;
    /// every trainable parameter must have a gradient. With `lr == 0` the
    /// moments advance but parameters are not written.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)]) -> Result<()> {
        let mut by_id: Vec<Option<&Tensor<F>>> = vec![None; params.len()];
        for (id, g) in grads {
            let slot = by_id
                .get_mut(id.0)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {}", id.0)))?;
            *slot = Some(g);
        }
        for (id, p) in params.iter() {
            if p.frozen {
                continue;
            }
            match by_id[id.0] {
                None => return Err(Error::Contract(format!("no gradient for trainable parameter {}", p.name))),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::Contract(format!(
                        "gradient {:?} for {} of shape {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    )))
                }
                _ => {}
            }
        }
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }

        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let one = F::one();
        let t = self.step as i32;
        let bc1 = F::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = F::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = F::from_f64_lossy(self.lr);
        let eps = F::from_f64_lossy(c.eps);
        let write = self.lr != 0.0;

        for (id, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let g = by_id[id.0].expect("checked above");
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let theta = p.value.data_mut();
            for (((th, &gi), mi), vi) in theta.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                if write {
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *th = *th - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// `base_lr * 0.5^floor(epoch / 2)`.
pub fn lr_at_epoch(base_lr: f64, epoch: usize) -> f64 {
    base_lr * 0.5f64.powi((epoch / 2) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[values.len()], values).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[1.0, -2.0, 0.5]);
        let g = Tensor::from_f64(&[3], &[0.3, -4.0, 1e-3]).unwrap();
        let mut adam = AdamState::new(1e-3, AdamConfig::default());
        adam.update(&mut p, &[(ParamId(0), g)]).unwrap();
        let d = p.get(ParamId(0)).value.data();
        for (now, (was, sign)) in d.iter().zip([(1.0, 1.0), (-2.0, -1.0), (0.5, 1.0)]) {
            assert!((now - (was - 1e-3 * sign)).abs() < 1e-8, "{now}");
        }
    }

    #[test]
    fn zero_grad_and_frozen() {
        let mut p = store(&[1.0, 2.0]);
        let mut adam = AdamState::new(1e-3, AdamConfig::default());
        adam.update(&mut p, &[(ParamId(0), Tensor::zeros(&[2]))]).unwrap();
        assert_eq!(p.get(ParamId(0)).value.data(), &[1.0, 2.0]);
        assert_eq!(adam.step, 1);

        p.get_mut(ParamId(0)).frozen = true;
        adam.update(&mut p, &[(ParamId(0), Tensor::full(&[2], 5.0))]).unwrap();
        assert_eq!(p.get(ParamId(0)).value.data(), &[1.0, 2.0]);
        assert_eq!(adam.step, 2);
    }

    #[test]
    fn contract_errors() {
        let mut p = store(&[1.0, 2.0]);
        let mut adam = AdamState::new(1e-3, AdamConfig::default());
        assert!(matches!(adam.update(&mut p, &[]), Err(Error::Contract(_))));
        assert!(matches!(adam.update(&mut p, &[(ParamId(0), Tensor::zeros(&[3]))]), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_halves_every_second_epoch() {
        let lrs: Vec<f64> = (0..10).map(|e| lr_at_epoch(1e-3, e)).collect();
        assert_eq!(lrs[0], 1e-3);
        assert_eq!(lrs[1], 1e-3);
        assert_eq!(lrs[2], 5e-4);
        assert_eq!(lrs[3], 5e-4);
        assert_eq!(lrs[8], 6.25e-5);
        assert_eq!(lrs[9], 6.25e-5);
    }
}
