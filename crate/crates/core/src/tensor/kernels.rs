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

//! Dense kernels behind the tape ops: GEMM dispatch and im2col.

use std::sync::OnceLock;

use super::Real;

/// Kernel worker count, read once from `MIMKD_THREADS` (default 1).
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("MIMKD_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&t| t >= 1)
            .unwrap_or(1)
    })
}

// Work below this many multiply-adds is never split across threads.
const PARALLEL_MIN_WORK: usize = 1 << 20;

#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

/// `C = op(A) * op(B) (+ C when accumulate)` with row-major storage.
///
/// `op(A)` is `[m, k]`: `a` is stored `[m, k]`, or `[k, m]` when `trans_a`.
/// `op(B)` is `[k, n]`: `b` is stored `[k, n]`, or `[n, k]` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };

    let threads = kernel_threads();
    if threads <= 1 || m * n * k < PARALLEL_MIN_WORK {
        // SAFETY: slice lengths were checked against the strides above.
        unsafe {
            F::gemm_raw(
                m,
                k,
                n,
                F::one(),
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }

    // Split the larger output dimension into fixed contiguous ranges so the
    // partition, and therefore every rounding, depends only on `threads`.
    let split_rows = m >= n;
    let extent = if split_rows { m } else { n };
    let chunk = extent.div_ceil(threads);
    let cptr = SendPtr(c.as_mut_ptr());
    std::thread::scope(|scope| {
        for start in (0..extent).step_by(chunk) {
            let len = chunk.min(extent - start);
            let cptr = cptr;
            scope.spawn(move || {
                let cp = cptr;
                // SAFETY: each worker writes a disjoint row or column range of C.
                unsafe {
                    if split_rows {
                        F::gemm_raw(
                            len,
                            k,
                            n,
                            F::one(),
                            a.as_ptr().offset(start as isize * rsa),
                            rsa,
                            csa,
                            b.as_ptr(),
                            rsb,
                            csb,
                            beta,
                            cp.0.add(start * n),
                            n as isize,
                            1,
                        );
                    } else {
                        F::gemm_raw(
                            m,
                            k,
                            len,
                            F::one(),
                            a.as_ptr(),
                            rsa,
                            csa,
                            b.as_ptr().offset(start as isize * csb),
                            rsb,
                            csb,
                            beta,
                            cp.0.add(start),
                            n as isize,
                            1,
                        );
                    }
                }
            });
        }
    });
}

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `x` into `[C*kh*kw, N*OH*OW]` patch columns.
pub(crate) fn im2col<F: Real>(x: &[F], g: &ConvGeometry) -> Vec<F> {
    let cols_n = g.col_cols();
    let mut cols = vec![F::zero(); g.col_rows() * cols_n];
    let ohw = g.out_h * g.out_w;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let plane = &x[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[n * ohw..(n + 1) * ohw];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                        let out = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                        for (ow, o) in out.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                *o = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds patch-column gradients back onto the input, summing overlaps.
pub(crate) fn col2im_add<F: Real>(cols: &[F], g: &ConvGeometry, dx: &mut [F]) {
    let cols_n = g.col_cols();
    let ohw = g.out_h * g.out_w;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let plane =
                        &mut dx[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[n * ohw..(n + 1) * ohw];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst[iw as usize] += src[oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            gemm(m, k, n, aa, ta, bb, tb, &mut c, true);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - 2.0 * y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_identity_kernel() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 1,
            height: 2,
            width: 2,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            out_h: 2,
            out_w: 2,
        };
        let x: Vec<f32> = (0..8).map(|v| v as f32).collect();
        assert_eq!(im2col(&x, &g), x);
        let mut dx = vec![0.0f32; 8];
        col2im_add(&x, &g, &mut dx);
        assert_eq!(dx, x);
    }
}
