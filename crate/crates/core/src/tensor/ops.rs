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

//! Forward constructors for every differentiable op.

use super::kernels::{gemm, im2col, ConvGeometry};
use super::tape::{sigmoid, Op};
use super::{window_out, Real, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn logistic<F: Real>(x: F) -> F {
    sigmoid(x)
}

/// Per-channel normalisation statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance, as used for running-stat updates.
    pub var_unbiased: Vec<F>,
}

impl<F: Real> Tape<F> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let x = self.value(a);
        let y = self.value(b);
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |u, v| u + v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |u, v| u - v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |u, v| u * v))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.map(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.map(a, Op::AddScalar(a), |v| v + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |v| v.max(F::zero()))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s: F = x.data().iter().copied().sum();
        let m = s / F::lit(x.numel() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape(a);
        match shape.split_last() {
            Some((&d, rest)) if d > 0 => Ok((rest.to_vec(), d)),
            _ => Err(shape_err(op, format!("needs a non-empty last dim, got {:?}", shape))),
        }
    }

    /// Sums over the last axis: `[..., D] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (rest, d) = self.last_dim("sum_last", a)?;
        let data = self
            .value(a)
            .data()
            .chunks(d)
            .map(|row| row.iter().copied().sum())
            .collect();
        Ok(self.push(Tensor::new(rest, data)?, Op::SumLast(a), &[a]))
    }

    /// Shift-stabilised log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.last_dim("log_softmax", a)?;
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let lse = logsumexp(row);
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(a), &[a]))
    }

    /// `log(sum(exp(x)))` over the last axis: `[..., D] -> [...]`.
    pub fn logsumexp_last(&mut self, a: Var) -> Result<Var> {
        let (rest, d) = self.last_dim("logsumexp_last", a)?;
        let data = self.value(a).data().chunks(d).map(logsumexp).collect();
        Ok(self.push(Tensor::new(rest, data)?, Op::LogSumExp(a), &[a]))
    }

    /// Picks `per_row` columns from each row of a `[N, C]` matrix: `index` is `[N * per_row]`.
    pub fn gather_cols(&mut self, a: Var, index: Vec<usize>, per_row: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("gather_cols", format!("expects [N, C], got {:?}", shape)));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if per_row == 0 || index.len() != rows * per_row {
            return Err(shape_err(
                "gather_cols",
                format!("{} indices for {} rows x {} per row", index.len(), rows, per_row),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= cols) {
            return Err(shape_err("gather_cols", format!("column {} >= {}", bad, cols)));
        }
        let x = self.value(a).data();
        let data = index
            .iter()
            .enumerate()
            .map(|(o, &j)| x[(o / per_row) * cols + j])
            .collect();
        let value = Tensor::new(vec![rows, per_row], data)?;
        Ok(self.push(
            value,
            Op::GatherCols {
                input: a,
                index,
                per_row,
            },
            &[a],
        ))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[M, K] x [N, K]^T -> [M, N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {:?} x {:?} (trans_b={})", sa, sb, trans_b),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Affine map `x W^T + b` with `x: [N, Din]`, `W: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err(
                "linear",
                format!("input {:?} incompatible with weight {:?}", sx, sw),
            ));
        }
        let (rows, din, dout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {} outputs", self.shape(b), dout),
                ));
            }
        }
        let mut out = vec![F::zero(); rows * dout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            bias.is_some(),
        );
        let value = Tensor::new(vec![rows, dout], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
            &inputs,
        ))
    }

    /// 2-D cross-correlation over an NCHW batch.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expects 4-D input and weight, got {:?} and {:?}", sx, sw),
            ));
        }
        if sx[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input has {} channels but weight {:?} expects {}",
                    sx[1], sw, sw[1]
                ),
            ));
        }
        let (out_h, out_w) = match (
            window_out(sx[2], sw[2], stride, padding),
            window_out(sx[3], sw[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!(
                        "kernel {}x{} (stride {}, padding {}) does not fit input {}x{}",
                        sw[2], sw[3], stride, padding, sx[2], sx[3]
                    ),
                ))
            }
        };
        let cout = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {} filters", self.shape(b), cout),
                ));
            }
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
            out_h,
            out_w,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let ncols = geom.col_cols();
        let mut mat = vec![F::zero(); cout * ncols];
        gemm(
            cout,
            geom.col_rows(),
            ncols,
            self.value(weight).data(),
            false,
            &cols,
            false,
            &mut mat,
            false,
        );
        let ohw = out_h * out_w;
        let mut out = vec![F::zero(); geom.batch * cout * ohw];
        let bv = bias.map(|b| self.value(b).data().to_vec());
        for n in 0..geom.batch {
            for co in 0..cout {
                let dst = &mut out[(n * cout + co) * ohw..][..ohw];
                dst.copy_from_slice(&mat[co * ncols + n * ohw..][..ohw]);
                if let Some(bv) = &bv {
                    dst.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let value = Tensor::new(vec![geom.batch, cout, out_h, out_w], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let keep = self.grad_enabled() && inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            value,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                geom,
                cols: if keep { cols } else { Vec::new() },
            },
            &inputs,
        ))
    }

    /// Train-mode batch normalisation over `N, H, W` per channel.
    ///
    /// Returns the output and the batch statistics for running-stat updates.
    pub fn batch_norm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<(Var, BatchStats<F>)> {
        let (n, c, hw) = self.bn_dims(x, gamma, beta)?;
        let count = n * hw;
        if count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let xv = self.value(x).data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for b in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += xv[(b * c + ch) * hw..][..hw].iter().copied().sum();
            }
        }
        let cnt = F::lit(count as f64);
        mean.iter_mut().for_each(|m| *m /= cnt);
        for b in 0..n {
            for ch in 0..c {
                for &v in &xv[(b * c + ch) * hw..][..hw] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let var_unbiased: Vec<F> = var.iter().map(|&s| s / F::lit((count - 1) as f64)).collect();
        let inv_std: Vec<F> = var.iter().map(|&s| F::one() / (s / cnt + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, hw);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let y = self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            &[x, gamma, beta],
        );
        Ok((y, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch normalisation with fixed statistics.
    pub fn batch_norm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<Var> {
        let (n, c, hw) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm2d", "running statistics length"));
        }
        let inv_std: Vec<F> = running_var
            .iter()
            .map(|&v| F::one() / (v + eps).sqrt())
            .collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, n, c, hw);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            &[x, gamma, beta],
        ))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(shape_err("batch_norm2d", format!("expects NCHW, got {:?}", s)));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm2d",
                format!("affine params must be [{}]", c),
            ));
        }
        Ok((s[0], c, s[2] * s[3]))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        inv_std: &[F],
        n: usize,
        c: usize,
        hw: usize,
    ) -> (Vec<F>, Vec<F>) {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![F::zero(); xv.len()];
        let mut xhat = vec![F::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for p in 0..hw {
                    let h = (xv[off + p] - mean[ch]) * inv_std[ch];
                    xhat[off + p] = h;
                    out[off + p] = g[ch] * h + b[ch];
                }
            }
        }
        (out, xhat)
    }

    /// Layer normalisation over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (_, d) = self.last_dim("layer_norm", x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("affine params must be [{}]", d)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = F::lit(d as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.len() / d);
        for row in xv.chunks(d) {
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let istd = F::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * istd;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Max pooling with a square window and no padding.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("maxpool2d", format!("expects NCHW, got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = match (window_out(h, kernel, stride, 0), window_out(w, kernel, stride, 0)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err(
                    "maxpool2d",
                    format!("pool {}x{} stride {} larger than input {}x{}", kernel, kernel, stride, h, w),
                ))
            }
        };
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (i * stride + ki) * w + j * stride + kj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input: x, argmax }, &[x]))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(shape_err("global_avg_pool", format!("expects NCHW, got {:?}", s)));
        }
        let hw = s[2] * s[3];
        let inv = F::one() / F::lit(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {} for rank {}", axis, base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?} along axis {}", s, base, axis),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let inner: usize = self.shape(v)[axis..].iter().product();
                out.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Row `i` of the output is row `index[i]` of the input (axis 0).
    pub fn index_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let rows = *s
            .first()
            .ok_or_else(|| shape_err("index_rows", "scalar input"))?;
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return Err(shape_err("index_rows", format!("row {} >= {}", bad, rows)));
        }
        let row_len: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row_len);
        for &r in &index {
            out.extend_from_slice(&xv[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = s;
        shape[0] = index.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::IndexRows { input: x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[N, d] -> [N, d, m, m]` with every location holding the input vector.
    pub fn replicate_spatial(&mut self, x: Var, m: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || m == 0 {
            return Err(shape_err(
                "replicate_spatial",
                format!("expects [N, d] and m >= 1, got {:?}, m={}", s, m),
            ));
        }
        let plane = m * m;
        let mut out = Vec::with_capacity(s[0] * s[1] * plane);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, plane));
        }
        let value = Tensor::new(vec![s[0], s[1], m, m], out)?;
        Ok(self.push(value, Op::ReplicateSpatial { input: x, m }, &[x]))
    }

    /// `[N, C, H, W] -> [N*H*W, C]`: one row per spatial location.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("channels_last", format!("expects NCHW, got {:?}", s)));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * hw + p) * c + ch] = xv[(b * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::new(vec![n * hw, c], out)?;
        Ok(self.push(value, Op::ChannelsLast(x), &[x]))
    }

    /// Inverse of [`Tape::channels_last`]: `[N*H*W, C] -> [N, C, H, W]`.
    pub fn channels_first(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != n * h * w {
            return Err(shape_err(
                "channels_first",
                format!("{:?} is not [{}*{}*{}, C]", s, n, h, w),
            ));
        }
        let (c, hw) = (s[1], h * w);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * c + ch) * hw + p] = xv[(b * hw + p) * c + ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelsFirst(x), &[x]))
    }

    /// Mean cross-entropy between `[N, C]` logits and integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} labels", s, labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: s[1],
            });
        }
        let logp = self.log_softmax(logits)?;
        let picked = self.gather_cols(logp, labels.to_vec(), 1)?;
        let m = self.mean(picked)?;
        Ok(self.neg(m))
    }
}

pub(crate) fn logsumexp<F: Real>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}
