use std::collections::BTreeMap;

use super::tensor::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |(n, p): (&str, &super::tensor::Param<T>)| {
            (n.to_string(), Tensor::zeros(p.value.shape()))
        };
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// Applies one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let (Some(m), Some(v)) = (self.m.get(name), self.v.get(name)) else {
                return Err(Error::State(format!("no moments for parameter {name:?}")));
            };
            if m.shape() != p.grad.shape() || v.shape() != p.grad.shape() {
                return Err(Error::State(format!(
                    "moment shape {:?} does not match gradient shape {:?} for {name:?}",
                    m.shape(),
                    p.grad.shape()
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powf(self.t as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.t as f64));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
