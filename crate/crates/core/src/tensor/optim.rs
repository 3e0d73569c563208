use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Momentum SGD hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "sgd learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "sgd momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "sgd weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T = f32> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn zeros_like(params: &[&Tensor<T>]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One momentum step:
/// `v <- momentum*v + grad + wd*param`, `param <- param - lr*v`.
///
/// `decay[i]` selects whether weight decay applies to parameter `i`; a missing
/// gradient counts as zero. The learning rate is not validated here so that
/// `lr = 0` can be used as an identity step.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    decay: &[bool],
    state: &mut SgdState<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != decay.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} params, {} grads, {} decay flags, {} velocities",
                params.len(),
                grads.len(),
                decay.len(),
                state.velocity.len()
            ),
        ));
    }
    let lr = T::lit(cfg.learning_rate);
    let mom = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let v = &mut state.velocity[i];
        if v.shape() != p.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("velocity {:?} vs param {:?} at index {i}", v.shape(), p.shape()),
            ));
        }
        if let Some(g) = grads[i] {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("grad {:?} vs param {:?} at index {i}", g.shape(), p.shape()),
                ));
            }
        }
        let wd_i = if decay[i] { wd } else { T::zero() };
        let vd = v.data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = grads[i].map_or(T::zero(), |g| g.data()[j]);
            vd[j] = mom * vd[j] + gj + wd_i * pd[j];
            pd[j] -= lr * vd[j];
        }
    }
    Ok(())
}

/// Owns the velocity buffers and configuration for a fixed parameter list.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub config: SgdConfig,
    pub state: SgdState<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, params: &[&Tensor<T>]) -> Self {
        Sgd {
            config,
            state: SgdState::zeros_like(params),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&Tensor<T>>],
        decay: &[bool],
    ) -> Result<()> {
        sgd_step(params, grads, decay, &mut self.state, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Tensor::<f32>::from_fn(&[3], |i| i as f32);
        let before = p.clone();
        let cfg = SgdConfig { weight_decay: 0.0, ..SgdConfig::default() };
        let mut st = SgdState::zeros_like(&[&p]);
        sgd_step(&mut [&mut p], &[Some(&Tensor::zeros(&[3]))], &[true], &mut st, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_update() {
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.01 };
        let mut p = scalar_param(2.0);
        let g = scalar_param(0.5);
        let mut st = SgdState::zeros_like(&[&p]);
        sgd_step(&mut [&mut p], &[Some(&g)], &[true], &mut st, &cfg).unwrap();
        // 2 - 0.1*(0.5 + 0.01*2)
        assert!((p.item() - 1.948).abs() < 1e-12);
    }

    #[test]
    fn two_steps_follow_scalar_recurrence() {
        let cfg = SgdConfig { learning_rate: 0.05, momentum: 0.9, weight_decay: 3e-4 };
        let mut p = scalar_param(1.0);
        let mut st = SgdState::zeros_like(&[&p]);
        let (mut rp, mut rv) = (1.0f64, 0.0f64);
        for g in [0.3, -0.7] {
            sgd_step(&mut [&mut p], &[Some(&scalar_param(g))], &[true], &mut st, &cfg).unwrap();
            rv = 0.9 * rv + g + 3e-4 * rp;
            rp -= 0.05 * rv;
        }
        assert!((p.item() - rp).abs() < 1e-14);
        assert!((st.velocity[0].item() - rv).abs() < 1e-14);
    }

    #[test]
    fn decay_flag_excludes_affine_params() {
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.5 };
        let mut a = scalar_param(1.0);
        let mut b = scalar_param(1.0);
        let mut st = SgdState::zeros_like(&[&a, &b]);
        sgd_step(&mut [&mut a, &mut b], &[None, None], &[true, false], &mut st, &cfg).unwrap();
        assert!((a.item() - 0.95).abs() < 1e-12);
        assert_eq!(b.item(), 1.0);
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let cfg = SgdConfig { learning_rate: 0.0, ..SgdConfig::default() };
        let mut p = Tensor::<f32>::from_fn(&[4], |i| i as f32 - 1.5);
        let before = p.clone();
        let mut st = SgdState::zeros_like(&[&p]);
        for _ in 0..3 {
            sgd_step(&mut [&mut p], &[Some(&Tensor::ones(&[4]))], &[true], &mut st, &cfg).unwrap();
        }
        assert_eq!(p, before);
        assert!(cfg.validate().is_err());
    }
}
