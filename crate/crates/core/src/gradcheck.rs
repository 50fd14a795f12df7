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

//! Central finite-difference oracle for gradient checks.
//!
//! The oracle only ever evaluates forward passes, in `f64`, so it is
//! independent of every backward rule it is used to check.

use crate::tensor::{Real, Tape, Tensor, Var};
use crate::Result;

/// Relative discrepancy `max|a - n| / max(max|n|, floor)` between two gradients.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Numeric gradient of a scalar function of several tensors, w.r.t. each of them.
pub fn numeric_grads(
    inputs: &[Tensor<f64>],
    eps: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = f(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let down = f(&work)?;
            work[t].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Builds `build` on a tape in scalar type `F`, returning the root value and
/// the analytic gradient of every input.
pub fn analytic_grads<F: Real>(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::<F>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast())).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let value = tape.item(root).expect("scalar root").as_f64();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.iter().map(|x| x.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    Ok((value, grads))
}

/// Forward-only evaluation in `f64` without recording.
pub fn eval_f64(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::<f64>::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    Ok(tape.item(root).expect("scalar root"))
}

/// Worst relative error over all inputs of `F`-precision analytic gradients
/// against the `f64` central-difference oracle.
pub fn check<F: Real>(
    inputs: &[Tensor<f64>],
    eps: f64,
    floor: f64,
    build: &dyn Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
    build64: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let (_, analytic) = analytic_grads::<F>(inputs, build)?;
    let numeric = numeric_grads(inputs, eps, |ts| eval_f64(ts, build64))?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_error(a, n, floor))
        .fold(0.0, f64::max))
}

/// Fixed, input-independent projection `sum(out * w)` with `w_i = cos(1.7 i + 0.3)`,
/// so every output entry reaches the root with a distinct weight.
fn project<F: Real>(tape: &mut Tape<F>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<F> = (0..n).map(|i| F::lit((1.7 * i as f64 + 0.3).cos())).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Every differentiable primitive, plus composites the models rely on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Add,
    Sub,
    Mul,
    ScaleShift,
    Relu,
    Softplus,
    Sum,
    Mean,
    SumLast,
    LogSoftmax,
    LogSumExp,
    GatherCols,
    CrossEntropy,
    MatMul,
    MatMulNt,
    Linear,
    Conv2d,
    Conv2dStrided,
    BatchNormTrain,
    BatchNormEval,
    LayerNorm,
    MaxPool,
    GlobalAvgPool,
    Concat,
    IndexRows,
    Reshape,
    ReplicateSpatial,
    ChannelsLast,
    ChannelsFirst,
    ConvReluMean,
    JsdBound,
    InfoNceBound,
}

impl Case {
    pub const ALL: &'static [Case] = &[
        Case::Add,
        Case::Sub,
        Case::Mul,
        Case::ScaleShift,
        Case::Relu,
        Case::Softplus,
        Case::Sum,
        Case::Mean,
        Case::SumLast,
        Case::LogSoftmax,
        Case::LogSumExp,
        Case::GatherCols,
        Case::CrossEntropy,
        Case::MatMul,
        Case::MatMulNt,
        Case::Linear,
        Case::Conv2d,
        Case::Conv2dStrided,
        Case::BatchNormTrain,
        Case::BatchNormEval,
        Case::LayerNorm,
        Case::MaxPool,
        Case::GlobalAvgPool,
        Case::Concat,
        Case::IndexRows,
        Case::Reshape,
        Case::ReplicateSpatial,
        Case::ChannelsLast,
        Case::ChannelsFirst,
        Case::ConvReluMean,
        Case::JsdBound,
        Case::InfoNceBound,
    ];

    fn shapes(self) -> Vec<Vec<usize>> {
        use Case::*;
        let s: &[&[usize]] = match self {
            Add | Sub | Mul => &[&[3, 4], &[3, 4]],
            ScaleShift | Sum | Mean | Reshape => &[&[3, 4]],
            Relu | Softplus => &[&[4, 5]],
            SumLast => &[&[3, 4, 5]],
            LogSoftmax | LogSumExp | GatherCols => &[&[4, 6]],
            CrossEntropy => &[&[5, 4]],
            MatMul => &[&[3, 4], &[4, 5]],
            MatMulNt => &[&[3, 4], &[5, 4]],
            Linear => &[&[4, 3], &[5, 3], &[5]],
            Conv2d => &[&[2, 3, 8, 8], &[4, 3, 3, 3], &[4]],
            Conv2dStrided | ConvReluMean => &[&[2, 3, 8, 8], &[4, 3, 3, 3]],
            BatchNormTrain => &[&[4, 2, 3, 3], &[2], &[2]],
            BatchNormEval => &[&[2, 2, 3, 3], &[2], &[2]],
            LayerNorm => &[&[3, 5], &[5], &[5]],
            MaxPool => &[&[2, 2, 4, 4]],
            GlobalAvgPool => &[&[2, 3, 4, 4]],
            Concat => &[&[2, 2, 3, 3], &[2, 1, 3, 3]],
            IndexRows => &[&[4, 3]],
            ReplicateSpatial => &[&[2, 3]],
            ChannelsLast => &[&[2, 3, 2, 2]],
            ChannelsFirst => &[&[8, 3]],
            JsdBound => &[&[6], &[6, 3]],
            InfoNceBound => &[&[5], &[5, 7]],
        };
        s.iter().map(|d| d.to_vec()).collect()
    }

    /// Standard normal inputs of the right shapes, drawn from `rng`.
    pub fn inputs<R: rand::Rng + ?Sized>(self, rng: &mut R) -> Vec<Tensor<f64>> {
        self.shapes().into_iter().map(|s| Tensor::randn(s, rng)).collect()
    }

    /// Scalar function of the inputs exercising this case.
    pub fn build<F: Real>(self, tape: &mut Tape<F>, v: &[Var]) -> Result<Var> {
        use crate::mi;
        let out = match self {
            Case::Add => tape.add(v[0], v[1])?,
            Case::Sub => tape.sub(v[0], v[1])?,
            Case::Mul => tape.mul(v[0], v[1])?,
            Case::ScaleShift => {
                let s = tape.scale(v[0], F::lit(1.7));
                let n = tape.neg(s);
                tape.add_scalar(n, F::lit(-0.4))
            }
            Case::Relu => tape.relu(v[0]),
            Case::Softplus => {
                let s = tape.scale(v[0], F::lit(3.0));
                tape.softplus(s)
            }
            Case::Sum => tape.sum(v[0]),
            Case::Mean => tape.mean(v[0])?,
            Case::SumLast => tape.sum_last(v[0])?,
            Case::LogSoftmax => tape.log_softmax(v[0])?,
            Case::LogSumExp => tape.logsumexp_last(v[0])?,
            Case::GatherCols => tape.gather_cols(v[0], vec![5, 0, 1, 1, 3, 2, 4, 0], 2)?,
            Case::CrossEntropy => return tape.cross_entropy(v[0], &[0, 3, 1, 1, 2]),
            Case::MatMul => tape.matmul(v[0], v[1])?,
            Case::MatMulNt => tape.matmul_nt(v[0], v[1])?,
            Case::Linear => tape.linear(v[0], v[1], Some(v[2]))?,
            Case::Conv2d => tape.conv2d(v[0], v[1], Some(v[2]), 1, 1)?,
            Case::Conv2dStrided => tape.conv2d(v[0], v[1], None, 2, 1)?,
            Case::BatchNormTrain => tape.batch_norm2d_train(v[0], v[1], v[2], F::lit(1e-5))?.0,
            Case::BatchNormEval => {
                let mean = [F::lit(0.1), F::lit(-0.2)];
                let var = [F::lit(0.8), F::lit(1.3)];
                tape.batch_norm2d_eval(v[0], v[1], v[2], &mean, &var, F::lit(1e-5))?
            }
            Case::LayerNorm => tape.layer_norm(v[0], v[1], v[2], F::lit(1e-5))?,
            Case::MaxPool => tape.maxpool2d(v[0], 2, 2)?,
            Case::GlobalAvgPool => tape.global_avg_pool(v[0])?,
            Case::Concat => tape.concat(&[v[0], v[1]], 1)?,
            Case::IndexRows => tape.index_rows(v[0], vec![2, 0, 3, 1, 2])?,
            Case::Reshape => tape.reshape(v[0], [2, 6])?,
            Case::ReplicateSpatial => tape.replicate_spatial(v[0], 3)?,
            Case::ChannelsLast => tape.channels_last(v[0])?,
            Case::ChannelsFirst => tape.channels_first(v[0], 2, 2, 2)?,
            Case::ConvReluMean => {
                let c = tape.conv2d(v[0], v[1], None, 1, 1)?;
                let r = tape.relu(c);
                return tape.mean(r);
            }
            Case::JsdBound => {
                let scores = mi::ScoreSet {
                    positive: v[0],
                    negative: v[1],
                };
                return Ok(mi::jsd_lower_bound(tape, &scores)?.value);
            }
            Case::InfoNceBound => return Ok(mi::infonce_lower_bound(tape, v[0], v[1])?.value),
        };
        project(tape, out)
    }
}

/// Worst relative errors of one case over a run of seeds.
#[derive(Clone, Copy, Debug)]
pub struct CaseReport {
    pub case: Case,
    pub seeds: usize,
    pub worst_f32: f64,
    pub worst_f64: f64,
}

/// Step for central differences in the `f64` oracle.
pub const FD_EPS: f64 = 1e-5;
/// Relative errors are taken against `max(max|numeric|, FD_FLOOR)`.
pub const FD_FLOOR: f64 = 1e-6;

/// Checks `case` on `seeds` independent random inputs in both precisions.
pub fn run_case(case: Case, seeds: usize) -> Result<CaseReport> {
    use rand::SeedableRng;
    let mut worst_f32 = 0.0f64;
    let mut worst_f64 = 0.0f64;
    let tag = Case::ALL.iter().position(|&c| c == case).expect("listed") as u64;
    for seed in 0..seeds as u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed * 1000 + tag);
        let inputs = case.inputs(&mut rng);
        let numeric = numeric_grads(&inputs, FD_EPS, |ts| eval_f64(ts, &|t, v| case.build(t, v)))?;
        let (_, a32) = analytic_grads::<f32>(&inputs, &|t, v| case.build(t, v))?;
        let (_, a64) = analytic_grads::<f64>(&inputs, &|t, v| case.build(t, v))?;
        for ((g32, g64), n) in a32.iter().zip(&a64).zip(&numeric) {
            worst_f32 = worst_f32.max(max_rel_error(g32, n, FD_FLOOR));
            worst_f64 = worst_f64.max(max_rel_error(g64, n, FD_FLOOR));
        }
    }
    Ok(CaseReport {
        case,
        seeds,
        worst_f32,
        worst_f64,
    })
}

pub fn run_suite(seeds: usize) -> Result<Vec<CaseReport>> {
    Case::ALL.iter().map(|&c| run_case(c, seeds)).collect()
}
