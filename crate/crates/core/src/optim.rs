//! Momentum SGD with L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Grads, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 5e-5,
        }
    }
}

/// Per-parameter velocity. `v = momentum * v + grad + weight_decay * p`,
/// then `p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, store: &ParamStore<T>) -> Self {
        Sgd {
            config,
            velocity: store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Update every parameter. A parameter without a gradient is treated as
    /// having a zero gradient (momentum and decay still apply).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        let grads: Vec<_> = store.ids().map(|id| grads.param(id)).collect();
        self.step_with(store, &grads)
    }

    pub fn step_with(&mut self, store: &mut ParamStore<T>, grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.velocity.len(),
                store.len(),
                grads.len()
            )));
        }
        let (lr, mu, wd) = (
            T::of(self.config.lr),
            T::of(self.config.momentum),
            T::of(self.config.weight_decay),
        );
        for ((id, v), g) in store.ids().collect::<Vec<_>>().into_iter().zip(&mut self.velocity).zip(grads) {
            let p = store.value_mut(id);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape(format!(
                        "gradient shape {:?} does not match parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            let gd = g.map(|g| g.data());
            for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let gi = gd.map_or(T::zero(), |g| g[i]);
                *vv = mu * *vv + gi + wd * *pv;
                *pv = *pv - lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("p", Tensor::full([1], v));
        s
    }

    #[test]
    fn single_step_arithmetic() {
        let mut s = store(1.0);
        let cfg = SgdConfig {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = Sgd::new(cfg, &s);
        let g = Tensor::full([1], 1.0);
        opt.step_with(&mut s, &[Some(&g)]).unwrap();
        assert!((s.value(s.find("p").unwrap()).item() - 0.995).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_keeps_params_and_decays_velocity() {
        let mut s = store(2.0);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = Sgd::new(cfg, &s);
        opt.step_with(&mut s, &[Some(&Tensor::full([1], 1.0))]).unwrap();
        let p1 = s.value(s.find("p").unwrap()).item();
        let v1 = opt.velocity()[0].item();
        let cfg0 = SgdConfig { lr: 0.0, ..cfg };
        opt.config = cfg0;
        opt.step_with(&mut s, &[Some(&Tensor::full([1], 0.0))]).unwrap();
        assert_eq!(s.value(s.find("p").unwrap()).item(), p1);
        assert_eq!(opt.velocity()[0].item(), 0.9 * v1);
    }

    #[test]
    fn weight_decay_enters_the_velocity() {
        let mut s = store(2.0);
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.25,
        };
        let mut opt = Sgd::new(cfg, &s);
        opt.step_with(&mut s, &[None]).unwrap();
        assert_eq!(s.value(s.find("p").unwrap()).item(), 2.0 - 0.5 * 0.5);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut s = store(1.0);
        let mut opt = Sgd::new(SgdConfig::default(), &s);
        assert!(opt.step_with(&mut s, &[]).is_err());
        let g = Tensor::full([2], 1.0);
        assert!(opt.step_with(&mut s, &[Some(&g)]).is_err());
    }
}
