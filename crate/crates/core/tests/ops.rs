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

use mimkd::mi::{infonce_lower_bound, jsd_lower_bound, ScoreSet};
use mimkd::tensor::{softplus, window_out, Tape, Tensor, Var};
use mimkd::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn constant_convolution() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([1, 1, 3, 3]));
    let w = tape.leaf(Tensor::ones([1, 1, 2, 2]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[4.0; 4]);
}

#[test]
fn strided_conv_halves() {
    let mut tape = Tape::<f32>::no_grad();
    let x = tape.constant(Tensor::zeros([1, 3, 32, 32]));
    let w = tape.constant(Tensor::zeros([16, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 16, 16, 16]);
}

#[test]
fn conv_channel_mismatch_is_described() {
    let mut tape = Tape::<f32>::no_grad();
    let x = tape.constant(Tensor::zeros([1, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros([4, 2, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains('3') && err.to_string().contains('2'), "{}", err);
}

#[test]
fn linear_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.leaf(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
    let b = tape.leaf(Tensor::zeros([2]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 2.0]);

    let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.linear(x, eye, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

    let bad = tape.leaf(Tensor::zeros([2, 3]));
    assert!(tape.linear(x, bad, None).is_err());
}

#[test]
fn batch_norm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::randn([4, 3, 5, 5], &mut rng));
    let g = tape.leaf(Tensor::ones([3]));
    let b = tape.leaf(Tensor::zeros([3]));
    let (y, stats) = tape.batch_norm2d_train(x, g, b, 1e-5).unwrap();
    let yv = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| yv[(n * 3 + c) * 25..][..25].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 100.0;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 100.0;
        assert!(m.abs() < 1e-10);
        assert!((v - 1.0).abs() < 1e-3);
    }
    assert_eq!(stats.mean.len(), 3);

    let x = tape.leaf(t(&[2, 2, 1, 1], &[5.0, -1.0, 5.0, -1.0]));
    let g = tape.leaf(Tensor::ones([2]));
    let b = tape.leaf(Tensor::zeros([2]));
    let (y, _) = tape.batch_norm2d_train(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);

    let one = tape.leaf(Tensor::zeros([1, 2, 1, 1]));
    assert!(matches!(
        tape.batch_norm2d_train(one, g, b, 1e-5),
        Err(Error::DegenerateBatch(1))
    ));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.leaf(Tensor::ones([2]));
    let b = tape.leaf(Tensor::zeros([2]));
    let x = tape.leaf(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(close(tape.value(y).data(), &[-1.0, 1.0], 1e-5));

    let g4 = tape.leaf(Tensor::ones([4]));
    let b4 = tape.leaf(Tensor::zeros([4]));
    let c = tape.leaf(Tensor::full([2, 4], 7.5));
    let y = tape.layer_norm(c, g4, b4, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 8]);
}

#[test]
fn activation_examples() {
    assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
    let y = tape.log_softmax(x).unwrap();
    let v = tape.value(y).data().to_vec();
    assert!(close(&v, &[-std::f64::consts::LN_2; 2], 1e-15));
    assert!((v.iter().map(|a| a.exp()).sum::<f64>() - 1.0).abs() < 1e-15);

    let p = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.maxpool2d(p, 2, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[4.0]);
    assert!(tape.maxpool2d(p, 3, 1).is_err());

    let q = tape.leaf(t(&[1, 2, 1, 2], &[1.0, 3.0, -2.0, 0.0]));
    let y = tape.global_avg_pool(q).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, -1.0]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let f = tape.sum(sq);
    tape.backward(f).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

    let mut tape = Tape::<f64>::new();
    let s = tape.leaf(Tensor::scalar(0.0));
    let f = tape.softplus(s);
    tape.backward(f).unwrap();
    assert_eq!(tape.grad(s).unwrap(), &[0.5]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([2]));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::NonScalarRoot(_))));
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, -1.0]));
    let f = tape.sum(x);
    tape.backward(f).unwrap();
    tape.backward(f).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    tape.zero_grads();
    assert!(tape.grad(x).is_none() || tape.grad(x).unwrap() == [0.0, 0.0]);
}

#[test]
fn replicate_spatial_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(Tensor::randn([2, 128], &mut rng));
    let r = tape.replicate_spatial(v, 8).unwrap();
    assert_eq!(tape.shape(r), &[2, 128, 8, 8]);
    let rv = tape.value(r).data();
    let vv = tape.value(v).data();
    for n in 0..2 {
        for c in 0..128 {
            let plane = &rv[(n * 128 + c) * 64..][..64];
            assert!(plane.iter().all(|&a| a == vv[n * 128 + c]));
        }
    }
    let f = tape.sum(r);
    tape.backward(f).unwrap();
    assert!(tape.grad(v).unwrap().iter().all(|&g| g == 64.0));

    let one = tape.replicate_spatial(v, 1).unwrap();
    assert_eq!(tape.shape(one), &[2, 128, 1, 1]);
    assert_eq!(tape.value(one).data(), tape.value(v).data());
}

fn grads_of(build: impl Fn(&mut Tape<f64>, Var) -> Var, x: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let root = build(&mut tape, v);
    tape.backward(root).unwrap();
    tape.grad(v).unwrap().to_vec()
}

fn fa(tape: &mut Tape<f64>, x: Var) -> Var {
    let s = tape.softplus(x);
    let sq = tape.mul(s, x).unwrap();
    tape.sum(sq)
}

fn fb(tape: &mut Tape<f64>, x: Var) -> Var {
    let l = tape.log_softmax(x).unwrap();
    let r = tape.relu(l);
    tape.sum(r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn([3, 4], &mut rng);
        let ga = grads_of(fa, &x);
        let gb = grads_of(fb, &x);
        let combined = grads_of(
            |tape, v| {
                let p = fa(tape, v);
                let q = fb(tape, v);
                let p = tape.scale(p, a);
                let q = tape.scale(q, b);
                tape.add(p, q).unwrap()
            },
            &x,
        );
        for i in 0..ga.len() {
            prop_assert!((combined[i] - (a * ga[i] + b * gb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_law(
        h in 1usize..12, w in 1usize..12, k in 1usize..5, stride in 1usize..4, pad in 0usize..3,
    ) {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::zeros([1, 2, h, w]));
        let wt = tape.constant(Tensor::zeros([3, 2, k, k]));
        let out = tape.conv2d(x, wt, None, stride, pad);
        match (window_out(h, k, stride, pad), window_out(w, k, stride, pad)) {
            (Some(oh), Some(ow)) => {
                prop_assert_eq!(tape.shape(out.unwrap()), &[1, 3, oh, ow]);
                prop_assert_eq!(oh, (h + 2 * pad - k) / stride + 1);
            }
            _ => prop_assert!(out.is_err()),
        }
    }

    #[test]
    fn softplus_is_positive(x in -700.0f64..700.0) {
        prop_assert!(softplus(x) > 0.0);
        prop_assert!(softplus(x) >= x);
    }

    #[test]
    fn bounds_are_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, m) = (6usize, 4usize);
        let pos = Tensor::<f64>::randn([p], &mut rng);
        let neg = Tensor::<f64>::randn([p, m], &mut rng);
        let eval = |pos: &Tensor<f64>, neg: &Tensor<f64>| {
            let mut tape = Tape::<f64>::no_grad();
            let a = tape.constant(pos.clone());
            let b = tape.constant(neg.clone());
            let j = jsd_lower_bound(&mut tape, &ScoreSet { positive: a, negative: b }).unwrap();
            let n = infonce_lower_bound(&mut tape, a, b).unwrap();
            (j.estimate.raw, n.estimate.raw)
        };
        let base = eval(&pos, &neg);
        // rotate samples by 1 and reverse each negatives row
        let rp: Vec<f64> = (0..p).map(|i| pos.data()[(i + 1) % p]).collect();
        let rn: Vec<f64> = (0..p)
            .flat_map(|i| (0..m).rev().map(move |j| ((i + 1) % p, j)))
            .map(|(i, j)| neg.data()[i * m + j])
            .collect();
        let moved = eval(&t(&[p], &rp), &t(&[p, m], &rn));
        prop_assert!((base.0 - moved.0).abs() < 1e-12);
        prop_assert!((base.1 - moved.1).abs() < 1e-12);
    }
}

#[test]
fn softplus_tail() {
    assert!((softplus(50.0f64) - 50.0).abs() < 1e-12);
}

#[test]
fn infonce_never_exceeds_log_m_plus_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for case in 0..1000 {
        let p = 1 + case % 9;
        let m = 1 + (case / 9) % 16;
        let scale = [0.1, 1.0, 10.0, 100.0][case % 4];
        let pos = Tensor::<f64>::randn([p], &mut rng).data().iter().map(|v| v * scale).collect::<Vec<_>>();
        let neg = Tensor::<f64>::randn([p, m], &mut rng).data().iter().map(|v| v * scale).collect::<Vec<_>>();
        let mut tape = Tape::<f64>::no_grad();
        let a = tape.constant(t(&[p], &pos));
        let b = tape.constant(t(&[p, m], &neg));
        let raw = infonce_lower_bound(&mut tape, a, b).unwrap().estimate.raw;
        assert!(raw <= ((m + 1) as f64).ln() + 1e-6, "case {}: {} > ln({})", case, raw, m + 1);
    }
}
