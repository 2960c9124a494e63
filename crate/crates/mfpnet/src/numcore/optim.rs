//! RMSProp parameter updates.

use crate::error::{Error, Result};
use crate::numcore::params::ParamSet;

/// RMSProp: per-element squared-gradient average `s` with decay `rho`,
/// update `theta -= lr * g / (sqrt(s) + eps)`.
///
/// The epsilon sits outside the square root. State is kept per parameter
/// index, so one optimizer instance must stay with one parameter set.
#[derive(Debug, Clone)]
pub struct RmsProp {
    lr: f64,
    rho: f64,
    eps: f64,
    cache: Vec<Vec<f64>>,
}

impl RmsProp {
    /// Learning rate `lr` with the stock decay 0.9 and epsilon 1e-8.
    pub fn new(lr: f64) -> Result<Self> {
        RmsProp::with_hyper(lr, 0.9, 1e-8)
    }

    pub fn with_hyper(lr: f64, rho: f64, eps: f64) -> Result<Self> {
        // A zero rate is allowed: it freezes the parameters while still
        // accumulating squared-gradient state.
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must not be negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Config(format!("rmsprop decay must be in [0, 1), got {rho}")));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("rmsprop epsilon must be positive, got {eps}")));
        }
        Ok(RmsProp { lr, rho, eps, cache: Vec::new() })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update from the gradients currently held in `set`.
    pub fn step(&mut self, set: &mut ParamSet) -> Result<()> {
        while self.cache.len() < set.len() {
            let i = self.cache.len();
            self.cache.push(vec![0.0; set.by_index(i).value.len()]);
        }
        for i in 0..set.len() {
            let p = set.by_index_mut(i);
            let s = &mut self.cache[i];
            if s.len() != p.value.len() {
                return Err(Error::Config(format!(
                    "optimizer state for {:?} has {} elements, parameter has {}",
                    p.name,
                    s.len(),
                    p.value.len()
                )));
            }
            let grads = p.grad.data();
            for (sj, &g) in s.iter_mut().zip(grads) {
                *sj = self.rho * *sj + (1.0 - self.rho) * g * g;
            }
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for ((v, &g), &sj) in values.iter_mut().zip(grads).zip(s.iter()) {
                *v -= self.lr * g / (sj.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;

    fn set_with_grad(values: &[f64], grads: &[f64]) -> ParamSet {
        let mut set = ParamSet::new();
        set.add("p", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap()).unwrap();
        set.get_mut("p").unwrap().grad.data_mut().copy_from_slice(grads);
        set
    }

    #[test]
    fn first_step_matches_closed_form() {
        // s1 = 0.1 * g^2, delta = lr * g / (sqrt(s1) + eps).
        let mut set = set_with_grad(&[1.0], &[1.0]);
        let mut opt = RmsProp::new(1e-3).unwrap();
        opt.step(&mut set).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / ((0.1f64).sqrt() + 1e-8);
        let got = set.get("p").unwrap().value.item().unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((1.0 - got - 3.1623e-3).abs() < 1e-6);
    }

    #[test]
    fn five_steps_match_independent_recurrence() {
        let grads = [0.5, -1.0, 0.25, 2.0, -0.75];
        let (lr, rho, eps) = (0.01, 0.9, 1e-8);
        let mut opt = RmsProp::with_hyper(lr, rho, eps).unwrap();
        let mut set = set_with_grad(&[0.3], &[0.0]);

        let mut theta = 0.3;
        let mut s = 0.0;
        for &g in &grads {
            set.get_mut("p").unwrap().grad.data_mut()[0] = g;
            opt.step(&mut set).unwrap();
            s = rho * s + (1.0 - rho) * g * g;
            theta -= lr * g / (s.sqrt() + eps);
            let got = set.get("p").unwrap().value.item().unwrap();
            assert!((got - theta).abs() < 1e-15, "{got} vs {theta}");
        }
    }

    #[test]
    fn state_is_per_element() {
        let mut set = set_with_grad(&[0.0, 0.0], &[1.0, 0.0]);
        let mut opt = RmsProp::new(0.1).unwrap();
        opt.step(&mut set).unwrap();
        let v = set.get("p").unwrap().value.data().to_vec();
        assert!(v[0] < 0.0, "updated element moved");
        assert_eq!(v[1], 0.0, "zero-gradient element fixed");
    }

    #[test]
    fn hyper_parameters_are_validated() {
        assert!(RmsProp::new(0.0).is_ok());
        assert!(RmsProp::new(-0.1).is_err());
        assert!(RmsProp::new(f64::NAN).is_err());
        assert!(RmsProp::with_hyper(0.1, 1.0, 1e-8).is_err());
        assert!(RmsProp::with_hyper(0.1, 0.9, 0.0).is_err());
        assert!(RmsProp::with_hyper(0.1, 0.0, 1e-8).is_ok());
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::from_vec(&[2], vec![1.5, -2.5]).unwrap()).unwrap();
        set.get_mut("w").unwrap().grad = Tensor::from_vec(&[2], vec![3.0, -4.0]).unwrap();
        let mut opt = RmsProp::new(0.0).unwrap();
        opt.step(&mut set).unwrap();
        assert_eq!(set.get("w").unwrap().value.data(), &[1.5, -2.5]);
    }

    #[test]
    fn params_added_after_first_step_get_state() {
        let mut set = set_with_grad(&[1.0], &[1.0]);
        let mut opt = RmsProp::new(1e-2).unwrap();
        opt.step(&mut set).unwrap();
        set.add("q", Tensor::scalar(2.0)).unwrap();
        set.get_mut("q").unwrap().grad.data_mut()[0] = 1.0;
        opt.step(&mut set).unwrap();
        assert!(set.get("q").unwrap().value.item().unwrap() < 2.0);
    }
}
