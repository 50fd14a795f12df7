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

//! Wengert tape: every op appends a node, `backward` sweeps the nodes in
//! reverse insertion order (which is a reverse topological order, since a
//! node can only reference nodes created before it).

use super::kernels::{col2im_add, gemm, ConvGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    GatherCols {
        input: Var,
        index: Vec<usize>,
        per_row: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<F>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    IndexRows {
        input: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    ReplicateSpatial {
        input: Var,
        m: usize,
    },
    ChannelsLast(Var),
    ChannelsFirst(Var),
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Binding of a stored parameter to a leaf on this tape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Binding {
    pub store: u64,
    pub param: usize,
    pub var: Var,
}

/// Reverse-mode autodiff tape.
///
/// A tape built with [`Tape::no_grad`] records values only: no node requires
/// a gradient and no backward state is kept.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    grad_enabled: bool,
    pub(crate) bindings: Vec<Binding>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            bindings: Vec::new(),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry backward state.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    /// A leaf that participates in differentiation (unless the tape is `no_grad`).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let requires_grad = self.grad_enabled;
        self.insert(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.insert(value, false, Op::Leaf)
    }

    /// Copies the value of `v` into a fresh constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// The value of a one-element node.
    pub fn item(&self, v: Var) -> Option<F> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grad(v)?;
        Tensor::new(self.shape(v).to_vec(), g.to_vec()).ok()
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    fn insert(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op result; backward state is dropped when nothing upstream needs a gradient.
    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.requires_grad(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.insert(value, requires_grad, op)
    }

    /// Backpropagates from a scalar root, accumulating (+=) into the stored grads.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        let mut local: Vec<Option<Vec<F>>> = Vec::new();
        local.resize_with(root.0 + 1, || None);
        if self.requires_grad(root) {
            local[root.0] = Some(vec![F::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            local[i] = Some(g);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        for (i, g) in local.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient buffer of `v`, created zeroed on first use; `None` for constants.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<F>>]) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(*a, grads) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += *c * s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    add_into(ga, g);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(*a, grads) {
                    for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > F::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(*a, grads) {
                    for ((d, &s), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *d += s * sigmoid(xv);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    let s = g[0] / F::lit(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumLast(a) => {
                let d_last = *self.shape(*a).last().unwrap_or(&1);
                if let Some(ga) = self.slot(*a, grads) {
                    for (row, &s) in ga.chunks_mut(d_last).zip(g) {
                        row.iter_mut().for_each(|d| *d += s);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let d_last = *self.shape(*a).last().unwrap_or(&1);
                if let Some(ga) = self.slot(*a, grads) {
                    for ((row, grow), yrow) in ga
                        .chunks_mut(d_last)
                        .zip(g.chunks(d_last))
                        .zip(out.chunks(d_last))
                    {
                        let total: F = grow.iter().copied().sum();
                        for ((d, &s), &y) in row.iter_mut().zip(grow).zip(yrow) {
                            *d += s - y.exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let d_last = *self.shape(*a).last().unwrap_or(&1);
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(*a, grads) {
                    for (((row, &s), xrow), &lse) in
                        ga.chunks_mut(d_last).zip(g).zip(x.chunks(d_last)).zip(out)
                    {
                        for (d, &xv) in row.iter_mut().zip(xrow) {
                            *d += s * (xv - lse).exp();
                        }
                    }
                }
            }
            Op::GatherCols {
                input,
                index,
                per_row,
            } => {
                let cols = *self.shape(*input).last().unwrap_or(&1);
                if let Some(ga) = self.slot(*input, grads) {
                    for (o, (&j, &s)) in index.iter().zip(g).enumerate() {
                        let r = o / per_row;
                        ga[r * cols + j] += s;
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = if *trans_b { bv.shape()[0] } else { bv.shape()[1] };
                if let Some(ga) = self.slot(*a, grads) {
                    // dA = dC * op(B)^T
                    gemm(m, n, k, g, false, bv.data(), !*trans_b, ga, true);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    if *trans_b {
                        gemm(n, m, k, g, true, av.data(), false, gb, true);
                    } else {
                        gemm(k, m, n, av.data(), true, g, false, gb, true);
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (rows, din) = (x.shape()[0], x.shape()[1]);
                let dout = w.shape()[0];
                if let Some(gx) = self.slot(*input, grads) {
                    gemm(rows, dout, din, g, false, w.data(), false, gx, true);
                }
                if let Some(gw) = self.slot(*weight, grads) {
                    gemm(dout, rows, din, g, true, x.data(), false, gw, true);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(*b, grads) {
                        for row in g.chunks(dout) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let w = self.value(*weight);
                let cout = w.shape()[0];
                let krows = geom.col_rows();
                let ncols = geom.col_cols();
                let ohw = geom.out_h * geom.out_w;
                // [N, Cout, OHW] -> [Cout, N*OHW]
                let mut dmat = vec![F::zero(); cout * ncols];
                for n in 0..geom.batch {
                    for co in 0..cout {
                        let src = &g[(n * cout + co) * ohw..][..ohw];
                        dmat[co * ncols + n * ohw..][..ohw].copy_from_slice(src);
                    }
                }
                if let Some(gw) = self.slot(*weight, grads) {
                    gemm(cout, ncols, krows, &dmat, false, cols, true, gw, true);
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(*b, grads) {
                        for (co, d) in gb.iter_mut().enumerate() {
                            *d += dmat[co * ncols..(co + 1) * ncols].iter().copied().sum();
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![F::zero(); krows * ncols];
                    gemm(krows, cout, ncols, w.data(), true, &dmat, false, &mut dcols, false);
                    if let Some(gx) = self.slot(*input, grads) {
                        col2im_add(&dcols, geom, gx);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*input);
                let (n, c) = (shape[0], shape[1]);
                let hw: usize = shape[2..].iter().product();
                let gam = self.value(*gamma).data();
                let count = F::lit((n * hw) as f64);
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for p in 0..hw {
                            sum_g[ch] += g[off + p];
                            sum_gx[ch] += g[off + p] * xhat[off + p];
                        }
                    }
                }
                if let Some(gg) = self.slot(*gamma, grads) {
                    add_into(gg, &sum_gx);
                }
                if let Some(gb) = self.slot(*beta, grads) {
                    add_into(gb, &sum_g);
                }
                if let Some(gx) = self.slot(*input, grads) {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            for p in 0..hw {
                                let d = if *train {
                                    scale
                                        * (g[off + p]
                                            - sum_g[ch] / count
                                            - xhat[off + p] * sum_gx[ch] / count)
                                } else {
                                    scale * g[off + p]
                                };
                                gx[off + p] += d;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d_last = *self.shape(*input).last().unwrap_or(&1);
                let gam = self.value(*gamma).data();
                let dn = F::lit(d_last as f64);
                if let Some(gg) = self.slot(*gamma, grads) {
                    for (grow, xrow) in g.chunks(d_last).zip(xhat.chunks(d_last)) {
                        for ((d, &s), &xh) in gg.iter_mut().zip(grow).zip(xrow) {
                            *d += s * xh;
                        }
                    }
                }
                if let Some(gb) = self.slot(*beta, grads) {
                    for grow in g.chunks(d_last) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = self.slot(*input, grads) {
                    for (((drow, grow), xrow), &istd) in gx
                        .chunks_mut(d_last)
                        .zip(g.chunks(d_last))
                        .zip(xhat.chunks(d_last))
                        .zip(inv_std)
                    {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for ((&s, &gm), &xh) in grow.iter().zip(gam).zip(xrow) {
                            s1 += s * gm;
                            s2 += s * gm * xh;
                        }
                        for (((d, &s), &gm), &xh) in
                            drow.iter_mut().zip(grow).zip(gam).zip(xrow)
                        {
                            *d += istd * (s * gm - s1 / dn - xh * s2 / dn);
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(gx) = self.slot(*input, grads) {
                    for (&src, &s) in argmax.iter().zip(g) {
                        gx[src] += s;
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.shape(*a);
                let hw: usize = shape[2..].iter().product();
                let inv = F::one() / F::lit(hw as f64);
                if let Some(gx) = self.slot(*a, grads) {
                    for (plane, &s) in gx.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|d| *d += s * inv);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let out_inner: usize = out_shape[*axis..].iter().product();
                let mut offset = 0;
                for v in inputs {
                    let inner: usize = self.shape(*v)[*axis..].iter().product();
                    if let Some(gv) = self.slot(*v, grads) {
                        for o in 0..outer {
                            add_into(
                                &mut gv[o * inner..(o + 1) * inner],
                                &g[o * out_inner + offset..][..inner],
                            );
                        }
                    }
                    offset += inner;
                }
            }
            Op::IndexRows { input, index } => {
                let rows = self.shape(*input)[0];
                let row_len = self.value(*input).numel() / rows.max(1);
                if let Some(gx) = self.slot(*input, grads) {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(
                            &mut gx[src * row_len..(src + 1) * row_len],
                            &g[r * row_len..(r + 1) * row_len],
                        );
                    }
                }
            }
            Op::ReplicateSpatial { input, m } => {
                let plane = m * m;
                if let Some(gx) = self.slot(*input, grads) {
                    for (d, chunk) in gx.iter_mut().zip(g.chunks(plane)) {
                        *d += chunk.iter().copied().sum();
                    }
                }
            }
            Op::ChannelsLast(a) => {
                let shape = self.shape(*a);
                let (n, c) = (shape[0], shape[1]);
                let hw: usize = shape[2..].iter().product();
                if let Some(gx) = self.slot(*a, grads) {
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                gx[(b * c + ch) * hw + p] += g[(b * hw + p) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::ChannelsFirst(a) => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let hw: usize = shape[2..].iter().product();
                if let Some(gx) = self.slot(*a, grads) {
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                gx[(b * hw + p) * c + ch] += g[(b * c + ch) * hw + p];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
