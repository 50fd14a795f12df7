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

//! Four-block convolutional networks with exposed intermediate taps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamStore};
use crate::tensor::{window_out, Real, Tape, Tensor, Var};

pub const BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockStyle {
    /// conv3×3 s2 p1, BN, ReLU
    Stride2,
    /// conv3×3 s1 p1, BN, ReLU, maxpool 2×2 s2
    MaxPool,
}

impl fmt::Display for BlockStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockStyle::Stride2 => "stride2",
            BlockStyle::MaxPool => "maxpool",
        })
    }
}

impl FromStr for BlockStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stride2" => Ok(BlockStyle::Stride2),
            "maxpool" => Ok(BlockStyle::MaxPool),
            other => Err(Error::InvalidArgument(format!(
                "unknown block style `{}` (expected stride2 or maxpool)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvNetSpec {
    pub style: BlockStyle,
    pub widths: [usize; BLOCKS],
    pub num_classes: usize,
    /// `[channels, height, width]`
    pub input: [usize; 3],
}

impl ConvNetSpec {
    pub fn student(num_classes: usize) -> Self {
        Self {
            style: BlockStyle::Stride2,
            widths: [8, 16, 32, 64],
            num_classes,
            input: [3, 32, 32],
        }
    }

    pub fn teacher(num_classes: usize) -> Self {
        Self {
            widths: [32, 64, 128, 256],
            ..Self::student(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.num_classes == 0 || self.input[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "widths, classes and channels must be >= 1 in {:?}",
                self
            )));
        }
        self.spatial_sizes().map(|_| ())
    }

    /// Output side length of every block, for square or rectangular inputs.
    pub fn spatial_sizes(&self) -> Result<[(usize, usize); BLOCKS]> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let mut out = [(0, 0); BLOCKS];
        let halve = |s: usize| match self.style {
            BlockStyle::Stride2 => window_out(s, 3, 2, 1),
            BlockStyle::MaxPool => window_out(s, 2, 2, 0),
        };
        for slot in out.iter_mut() {
            match (halve(h), halve(w)) {
                (Some(nh), Some(nw)) if h >= 2 && w >= 2 => {
                    h = nh;
                    w = nw;
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "input {}x{} is too small for {} halvings",
                        self.input[1], self.input[2], BLOCKS
                    )))
                }
            }
            *slot = (h, w);
        }
        Ok(out)
    }
}

/// 1-based block indices whose post-activation outputs are exposed, shallow to deep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapSchedule {
    pub blocks: Vec<usize>,
}

impl Default for TapSchedule {
    fn default() -> Self {
        Self { blocks: vec![2, 3, 4] }
    }
}

impl TapSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.blocks.is_empty()
            && self.blocks.windows(2).all(|w| w[0] < w[1])
            && self.blocks.iter().all(|&b| (1..=BLOCKS).contains(&b));
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "taps must be strictly increasing block numbers in 1..={}, got {:?}",
                BLOCKS, self.blocks
            )));
        }
        Ok(())
    }
}

/// One network's forward products.
#[derive(Clone, Debug)]
pub struct Taps {
    pub logits: Var,
    /// Globally pooled pre-classifier vector, `[N, c4]`.
    pub pooled: Var,
    pub maps: Vec<Var>,
}

/// Concrete outputs of a gradient-free forward pass.
#[derive(Clone, Debug)]
pub struct TapValues<F> {
    pub logits: Tensor<F>,
    pub pooled: Tensor<F>,
    pub maps: Vec<Tensor<F>>,
}

struct Block {
    conv: Conv2d,
    norm: BatchNorm2d,
}

pub struct ConvNet<F> {
    spec: ConvNetSpec,
    taps: TapSchedule,
    pub store: ParamStore<F>,
    blocks: Vec<Block>,
    classifier: Linear,
}

/// Parameters are registered under `model.<role>.`.
pub fn build_convnet<F: Real, R: Rng + ?Sized>(
    spec: &ConvNetSpec,
    taps: &TapSchedule,
    role: &str,
    rng: &mut R,
) -> Result<ConvNet<F>> {
    spec.validate()?;
    taps.validate()?;
    let mut store = ParamStore::new(format!("model.{}", role));
    let stride = match spec.style {
        BlockStyle::Stride2 => 2,
        BlockStyle::MaxPool => 1,
    };
    let mut inp = spec.input[0];
    let mut blocks = Vec::with_capacity(BLOCKS);
    for (i, &out) in spec.widths.iter().enumerate() {
        let name = format!("block{}", i + 1);
        blocks.push(Block {
            conv: Conv2d::new(&mut store, &format!("{}.conv", name), inp, out, 3, stride, 1, false, rng),
            norm: BatchNorm2d::new(&mut store, &format!("{}.bn", name), out),
        });
        inp = out;
    }
    let classifier = Linear::new(&mut store, "fc", inp, spec.num_classes, true, rng);
    Ok(ConvNet {
        spec: spec.clone(),
        taps: taps.clone(),
        store,
        blocks,
        classifier,
    })
}

impl<F: Real> ConvNet<F> {
    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn tap_schedule(&self) -> &TapSchedule {
        &self.taps
    }

    /// `(channels, side)` of each tapped map, shallow to deep.
    pub fn tap_shapes(&self) -> Vec<(usize, usize)> {
        let sizes = self.spec.spatial_sizes().expect("validated at build");
        self.taps
            .blocks
            .iter()
            .map(|&b| (self.spec.widths[b - 1], sizes[b - 1].0))
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.widths[BLOCKS - 1]
    }

    /// Records the forward pass on `tape`. Train mode updates BN running statistics.
    pub fn forward_with_taps(&mut self, tape: &mut Tape<F>, images: Var, train: bool) -> Result<Taps> {
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(shape_err(
                "forward_with_taps",
                format!("images {:?} do not match input {:?}", shape, self.spec.input),
            ));
        }
        let mut h = images;
        let mut maps = Vec::with_capacity(self.taps.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.conv.forward(tape, &self.store, h)?;
            h = block.norm.forward(tape, &mut self.store, h, train)?;
            h = tape.relu(h);
            if self.spec.style == BlockStyle::MaxPool {
                h = tape.maxpool2d(h, 2, 2)?;
            }
            if self.taps.blocks.contains(&(i + 1)) {
                maps.push(h);
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = self.classifier.forward(tape, &self.store, pooled)?;
        Ok(Taps { logits, pooled, maps })
    }

    /// Eval-mode forward on a private gradient-free tape.
    pub fn infer(&mut self, images: &Tensor<F>) -> Result<TapValues<F>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(images.clone());
        let out = self.forward_with_taps(&mut tape, x, false)?;
        Ok(TapValues {
            logits: tape.value(out.logits).clone(),
            pooled: tape.value(out.pooled).clone(),
            maps: out.maps.iter().map(|&m| tape.value(m).clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Closed-form parameter count: 3×3 convs without bias, BN affine pairs, classifier.
    fn expected_params(spec: &ConvNetSpec) -> usize {
        let mut inp = spec.input[0];
        let mut total = 0;
        for &w in &spec.widths {
            total += 9 * inp * w + 2 * w;
            inp = w;
        }
        total + inp * spec.num_classes + spec.num_classes
    }

    #[test]
    fn block_sizes_and_pooled_dim() {
        for style in [BlockStyle::Stride2, BlockStyle::MaxPool] {
            let spec = ConvNetSpec {
                style,
                ..ConvNetSpec::student(10)
            };
            let sizes: Vec<usize> = spec.spatial_sizes().unwrap().iter().map(|s| s.0).collect();
            assert_eq!(sizes, vec![16, 8, 4, 2]);
            let taps = TapSchedule { blocks: vec![1, 2, 3, 4] };
            let mut net = build_convnet::<f32, _>(&spec, &taps, "student", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let out = net.infer(&Tensor::zeros([2, 3, 32, 32])).unwrap();
            assert_eq!(out.logits.shape(), &[2, 10]);
            assert_eq!(out.pooled.shape(), &[2, 64]);
            let map_sizes: Vec<usize> = out.maps.iter().map(|m| m.shape()[2]).collect();
            assert_eq!(map_sizes, vec![16, 8, 4, 2]);
        }
    }

    #[test]
    fn too_small_input_is_rejected() {
        let spec = ConvNetSpec {
            input: [3, 8, 8],
            style: BlockStyle::MaxPool,
            ..ConvNetSpec::student(10)
        };
        assert!(spec.validate().is_err());
        let ok = ConvNetSpec {
            input: [3, 16, 16],
            ..spec
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn teacher_student_capacity_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let taps = TapSchedule::default();
        let s = build_convnet::<f32, _>(&ConvNetSpec::student(8), &taps, "student", &mut rng).unwrap();
        let t = build_convnet::<f32, _>(&ConvNetSpec::teacher(8), &taps, "teacher", &mut rng).unwrap();
        assert_eq!(s.store.numel(), expected_params(&ConvNetSpec::student(8)));
        assert_eq!(t.store.numel(), expected_params(&ConvNetSpec::teacher(8)));
        assert_eq!(s.store.numel(), 25_168);
        assert_eq!(t.store.numel(), 390_952);
        let ratio = t.store.numel() as f64 / s.store.numel() as f64;
        assert!((15.0..16.5).contains(&ratio), "ratio {}", ratio);
    }

    #[test]
    fn default_taps_shapes_and_eval_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = build_convnet::<f32, _>(&ConvNetSpec::student(8), &TapSchedule::default(), "s", &mut rng).unwrap();
        assert_eq!(net.tap_shapes(), vec![(16, 8), (32, 4), (64, 2)]);
        let x = Tensor::randn([3, 3, 32, 32], &mut rng);
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        for (m, (c, s)) in a.maps.iter().zip(net.tap_shapes()) {
            assert_eq!(m.shape(), &[3, c, s, s]);
        }
        let wrong = Tensor::zeros([1, 3, 16, 16]);
        assert!(net.infer(&wrong).is_err());
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = build_convnet::<f32, _>(&ConvNetSpec::teacher(8), &TapSchedule::default(), "t", &mut rng).unwrap();
        let out = net.infer(&Tensor::randn([4, 3, 32, 32], &mut rng)).unwrap();
        for row in out.logits.data().chunks(8) {
            let mx = row.iter().cloned().fold(f32::MIN, f32::max);
            let z: f64 = row.iter().map(|&v| ((v - mx) as f64).exp()).sum();
            let p: f64 = row.iter().map(|&v| ((v - mx) as f64).exp() / z).sum();
            assert!((p - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn inference_records_no_gradient_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = build_convnet::<f32, _>(&ConvNetSpec::student(8), &TapSchedule::default(), "s", &mut rng).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros([1, 3, 32, 32]));
        net.forward_with_taps(&mut tape, x, false).unwrap();
        assert_eq!(tape.recorded_ops(), 0);
        assert!(tape.bindings.is_empty());
    }

    #[test]
    fn taps_must_be_ordered() {
        assert!(TapSchedule { blocks: vec![3, 2] }.validate().is_err());
        assert!(TapSchedule { blocks: vec![0] }.validate().is_err());
        assert!(TapSchedule { blocks: vec![] }.validate().is_err());
    }
}
