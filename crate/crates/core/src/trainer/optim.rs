use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::models::Checkpoint;

/// SGD with Nesterov momentum and decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 2.5e-4, momentum: 0.9, weight_decay: 5e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

fn check_grads<T: Real>(params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {i} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    Ok(())
}

/// Momentum buffers of [`Sgd`], one per parameter, created on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    momentum: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd { config, momentum: Vec::new() }
    }

    /// One update at learning rate `lr`:
    ///
    /// ```text
    /// v <- mu v + g          (v <- g on the first step)
    /// p <- p (1 - lr wd) - lr (g + mu v)
    /// ```
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        let first = self.momentum.is_empty();
        if first {
            self.momentum = grads.to_vec();
        }
        let mu = T::lit(self.config.momentum);
        let lr_t = T::lit(lr);
        let shrink = T::lit(1.0 - lr * self.config.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.momentum) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                if !first {
                    *vv = mu * *vv + gv;
                }
                *pv = *pv * shrink - lr_t * (gv + mu * *vv);
            }
        }
        Ok(())
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        for (i, v) in self.momentum.iter().enumerate() {
            ck.insert(format!("{prefix}.momentum.{i}"), v);
        }
    }

    pub fn load(&mut self, ck: &Checkpoint, prefix: &str, params: usize) -> Result<()> {
        let key = format!("{prefix}.momentum.0");
        self.momentum = if ck.names().any(|n| n == key) {
            (0..params).map(|i| ck.get(&format!("{prefix}.momentum.{i}"))).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let (c1, c2, lr_t, eps_t) = (T::lit(c1), T::lit(c2), T::lit(lr), T::lit(eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pv, &gv), mv), vv) in it {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
        }
        Ok(())
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            ck.insert(format!("{prefix}.m.{i}"), m);
            ck.insert(format!("{prefix}.v.{i}"), v);
        }
        ck.insert(format!("{prefix}.steps"), &Tensor::<f64>::scalar(self.steps as f64));
    }

    pub fn load(&mut self, ck: &Checkpoint, prefix: &str, params: usize) -> Result<()> {
        self.steps = ck.get::<f64>(&format!("{prefix}.steps"))?.item() as u64;
        if self.steps == 0 {
            self.first.clear();
            self.second.clear();
            return Ok(());
        }
        self.first = (0..params).map(|i| ck.get(&format!("{prefix}.m.{i}"))).collect::<Result<_>>()?;
        self.second = (0..params).map(|i| ck.get(&format!("{prefix}.v.{i}"))).collect::<Result<_>>()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `f(x) = x^2` from `x = 1`; reference values computed in exact rational
    /// arithmetic from the same recurrence written out by hand.
    #[test]
    fn nesterov_matches_reference_sequence() {
        for (wd, want) in [
            (0.0, [0.62, 0.2224, -0.108352, -0.32482304, -0.4157175808]),
            (0.01, [0.619, 0.221161, -0.109179341, -0.324880294079, -0.414982302592901]),
        ] {
            let mut opt = Sgd::<f64>::new(SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: wd });
            let mut x = Tensor::scalar(1.0);
            for w in want {
                let g = Tensor::scalar(2.0 * x.item());
                opt.step(&mut [&mut x], &[g], 0.1).unwrap();
                assert!((x.item() - w).abs() < 1e-10, "{} vs {w}", x.item());
            }
        }
    }

    /// `f(x) = (x - 3)^2` from `x = 1`, reference from 40-digit arithmetic.
    #[test]
    fn adam_matches_reference_sequence() {
        let want = [
            1.0999999997500000006,
            1.1998450915131157948,
            1.2994196930483894509,
            1.3985983549023401534,
            1.4972452784852843024,
        ];
        let mut opt = Adam::<f64>::new(AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.99, eps: 1e-8 });
        let mut x = Tensor::scalar(1.0);
        for w in want {
            let g = Tensor::scalar(2.0 * (x.item() - 3.0));
            opt.step(&mut [&mut x], &[g], 0.1).unwrap();
            assert!((x.item() - w).abs() < 1e-10, "{} vs {w}", x.item());
        }
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let mut opt = Sgd::<f64>::new(SgdConfig { lr: 0.5, momentum: 0.9, weight_decay: 0.1 });
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::zeros(vec![3])], 0.5).unwrap();
        for (got, want) in p.data().iter().zip([0.95, -1.9, 3.8]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut opt = Adam::<f64>::new(AdamConfig::default());
        let mut p = Tensor::zeros(vec![2]);
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(vec![3])], 0.1).is_err());
        assert!(opt.step(&mut [&mut p], &[], 0.1).is_err());
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let mut sgd = Sgd::<f32>::new(SgdConfig::default());
        let mut adam = Adam::<f32>::new(AdamConfig::default());
        let mut p = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5f32, -0.25]).unwrap();
        sgd.step(&mut [&mut p], &[g.clone()], 0.1).unwrap();
        adam.step(&mut [&mut p], &[g], 0.1).unwrap();
        let mut ck = Checkpoint::new([0; 32]);
        sgd.save(&mut ck, "g");
        adam.save(&mut ck, "d");
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let mut sgd2 = Sgd::<f32>::new(SgdConfig::default());
        let mut adam2 = Adam::<f32>::new(AdamConfig::default());
        sgd2.load(&ck, "g", 1).unwrap();
        adam2.load(&ck, "d", 1).unwrap();
        assert_eq!(sgd2, sgd);
        assert_eq!(adam2, adam);
    }
}
