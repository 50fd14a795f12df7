// Copyright 2026 The mimkd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! SGD with momentum and decoupled-from-norm weight decay.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
        }
    }

    /// One update over every parameter of every store, then zeroes the grads.
    ///
    /// `g = grad + wd * w` (decayed params only), `v = momentum * v + g`, `w -= lr * v`.
    /// Fails before touching anything if some parameter lacks a gradient.
    pub fn step<F: Real>(&self, stores: &mut [&mut ParamStore<F>]) -> Result<()> {
        for store in stores.iter() {
            if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
                let name = if store.prefix().is_empty() {
                    p.name.clone()
                } else {
                    format!("{}.{}", store.prefix(), p.name)
                };
                return Err(Error::MissingGrad(name));
            }
        }
        let lr = F::lit(self.lr);
        let mom = F::lit(self.momentum);
        let wd = F::lit(self.weight_decay);
        for store in stores.iter_mut() {
            for p in store.params_mut() {
                let grad = p.grad.take().expect("checked above");
                let decay = p.decay && self.weight_decay != 0.0;
                let w = p.value.data_mut();
                let v = p.momentum_buffer.data_mut();
                for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                    let g = if decay { g + wd * *w } else { g };
                    *v = mom * *v + g;
                    *w -= lr * *v;
                }
            }
        }
        Ok(())
    }

    /// Count of parameter tensors an update over `stores` touches.
    pub fn coverage<F: Real>(stores: &[&ParamStore<F>]) -> usize {
        stores.iter().map(|s| s.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new("");
        s.add("w", Tensor::scalar(w), decay);
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        s.params_mut()[0].grad = Some(Tensor::scalar(g));
    }

    fn value(s: &ParamStore<f64>) -> f64 {
        s.params()[0].value.data()[0]
    }

    #[test]
    fn plain_step() {
        let mut s = single(1.0, true);
        set_grad(&mut s, 0.5);
        Sgd::new(0.1, 0.0, 0.0).step(&mut [&mut s]).unwrap();
        assert!((value(&s) - 0.95).abs() < 1e-15);
        assert!(s.params()[0].grad.is_none());
    }

    #[test]
    fn weight_decay_only() {
        let mut s = single(1.0, true);
        set_grad(&mut s, 0.0);
        Sgd::new(0.1, 0.0, 5e-4).step(&mut [&mut s]).unwrap();
        assert!((value(&s) - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_norm_and_bias_terms() {
        let mut s = single(1.0, false);
        set_grad(&mut s, 0.0);
        Sgd::new(0.1, 0.0, 5e-4).step(&mut [&mut s]).unwrap();
        assert_eq!(value(&s), 1.0);
    }

    #[test]
    fn momentum_two_steps() {
        let mut s = single(0.0, true);
        let opt = Sgd::new(1.0, 0.9, 0.0);
        set_grad(&mut s, 1.0);
        opt.step(&mut [&mut s]).unwrap();
        assert!((value(&s) + 1.0).abs() < 1e-15);
        set_grad(&mut s, 1.0);
        opt.step(&mut [&mut s]).unwrap();
        assert!((value(&s) + 2.9).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = single(1.0, true);
        let err = Sgd::new(0.1, 0.9, 0.0).step(&mut [&mut s]).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
        assert_eq!(value(&s), 1.0);
    }
}
