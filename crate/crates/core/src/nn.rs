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

//! Parameter storage and the layers built on top of the tape.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// A trainable tensor together with its optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub momentum_buffer: Tensor<F>,
    /// Whether weight decay applies (off for biases and norm affine terms).
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Named parameters and non-trainable buffers of one component.
#[derive(Debug)]
pub struct ParamStore<F> {
    id: u64,
    prefix: String,
    params: Vec<Parameter<F>>,
    buffers: Vec<(String, Tensor<F>)>,
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

impl<F: Real> ParamStore<F> {
    /// `prefix` is prepended (with a dot) to every name on export.
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            prefix: prefix.into(),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) -> ParamId {
        let momentum_buffer = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: None,
            momentum_buffer,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<F> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<F> {
        &mut self.buffers[id.0].1
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places a parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<F>, id: ParamId) -> Var {
        let var = tape.leaf(self.params[id.0].value.clone());
        if tape.requires_grad(var) {
            tape.bindings.push(crate::tensor::tape_binding(self.id, id.0, var));
        }
        var
    }

    /// Accumulates (+=) the tape gradients of every bound parameter into `grad`.
    pub fn collect_grads(&mut self, tape: &Tape<F>) {
        for b in tape.bindings.iter().filter(|b| b.store == self.id) {
            let Some(g) = tape.grad(b.var) else { continue };
            let p = &mut self.params[b.param];
            match &mut p.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &v)| *a += v),
                slot @ None => {
                    *slot = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec()).expect("shape"))
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Appends every parameter and buffer, in registration order, as `f32`.
    pub fn export_into(&self, ckpt: &mut Checkpoint) {
        for p in &self.params {
            ckpt.push(self.full_name(&p.name), p.value.cast());
        }
        for (name, t) in &self.buffers {
            ckpt.push(self.full_name(name), t.cast());
        }
    }

    /// Overwrites values from a checkpoint; names and shapes must all match.
    pub fn import_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let prefix = self.prefix.clone();
        let full = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{}.{}", prefix, name)
            }
        };
        let fetch = |name: String, want: &[usize]| -> Result<Tensor<F>> {
            let t = ckpt
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", name)))?;
            if t.shape() != want {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    want
                )));
            }
            Ok(t.cast())
        };
        for p in &mut self.params {
            p.value = fetch(full(&p.name), p.value.shape())?;
        }
        for (name, t) in &mut self.buffers {
            *t = fetch(full(name), t.shape())?;
        }
        Ok(())
    }
}

/// Kaiming-uniform (fan-in, ReLU gain) initialisation.
pub fn kaiming_uniform<F: Real, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<F> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{}.weight", name),
            kaiming_uniform([out_features, in_features], in_features, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{}.bias", name), Tensor::zeros([out_features]), false));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = self.bias.map(|b| store.bind(tape, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{}.weight", name),
            kaiming_uniform([out_channels, in_channels, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{}.bias", name), Tensor::zeros([out_channels]), false));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = self.bias.map(|b| store.bind(tape, b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{}.weight", name), Tensor::ones([channels]), false),
            beta: store.add(format!("{}.bias", name), Tensor::zeros([channels]), false),
            running_mean: store.add_buffer(format!("{}.running_mean", name), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{}.running_var", name), Tensor::ones([channels])),
        }
    }

    /// Train mode normalises with batch statistics and updates the running ones.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &mut ParamStore<F>,
        x: Var,
        train: bool,
    ) -> Result<Var> {
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        let eps = F::lit(BN_EPS);
        if train {
            let (y, stats) = tape.batch_norm2d_train(x, g, b, eps)?;
            let mom = F::lit(BN_MOMENTUM);
            for (r, &m) in store.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = (F::one() - mom) * *r + mom * m;
            }
            for (r, &v) in store
                .buffer_mut(self.running_var)
                .data_mut()
                .iter_mut()
                .zip(&stats.var_unbiased)
            {
                *r = (F::one() - mom) * *r + mom * v;
            }
            Ok(y)
        } else {
            let mean = store.buffer(self.running_mean).data().to_vec();
            let var = store.buffer(self.running_var).data().to_vec();
            tape.batch_norm2d_eval(x, g, b, &mean, &var, eps)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{}.weight", name), Tensor::ones([dim]), false),
            beta: store.add(format!("{}.bias", name), Tensor::zeros([dim]), false),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        tape.layer_norm(x, g, b, F::lit(LN_EPS))
    }
}
