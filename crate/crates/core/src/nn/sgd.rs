use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdConfig {
    pub fn new(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // A zero rate is accepted: it freezes parameters, which the
        // training tests rely on.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_step(
    params: &mut Tensor,
    grads: &Tensor,
    velocity: &mut Tensor,
    cfg: &SgdConfig,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != velocity.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "params {:?}, grads {:?}, velocity {:?}",
                params.shape(),
                grads.shape(),
                velocity.shape()
            ),
        ));
    }
    for ((p, &g), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(velocity.data_mut())
    {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= cfg.learning_rate * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step() {
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        let g = Tensor::new(&[1], vec![0.5]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        sgd_step(&mut p, &g, &mut v, &SgdConfig::new(0.1)).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = Tensor::from_fn(&[4], |i| i as f32);
        let before = p.clone();
        let mut v = Tensor::zeros(&[4]);
        sgd_step(&mut p, &Tensor::zeros(&[4]), &mut v, &SgdConfig::new(0.3)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_accumulates() {
        // v1 = g, v2 = 0.9g + g = 1.9g: second displacement is 1.9x the first.
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = Tensor::new(&[1], vec![0.0]).unwrap();
        let g = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        sgd_step(&mut p, &g, &mut v, &cfg).unwrap();
        let first = -p.data()[0];
        sgd_step(&mut p, &g, &mut v, &cfg).unwrap();
        let second = -p.data()[0] - first;
        assert!(second > first);
        assert!((second - 1.9 * first).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        assert!(sgd_step(&mut p, &Tensor::zeros(&[3]), &mut v, &SgdConfig::new(0.1)).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SgdConfig::new(-1.0).validate().is_err());
        let cfg = SgdConfig {
            momentum: 1.0,
            ..SgdConfig::new(0.1)
        };
        assert!(cfg.validate().is_err());
    }
}
