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

//! Image datasets: the CIFAR binary record format, a procedural shapes
//! dataset, per-channel standardisation, flip/crop augmentation, and seeded
//! epoch orders.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const CROP_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    /// Label bytes preceding the pixels of each record.
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

impl fmt::Display for CifarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
        })
    }
}

impl FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset variant `{}` (expected cifar10 or cifar100)",
                other
            ))),
        }
    }
}

/// 32×32 RGB images stored as planar bytes (R plane, G plane, B plane, each row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    /// CIFAR-100 coarse labels, kept for byte-exact re-export.
    coarse: Option<Vec<u8>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(Error::Format(format!(
                "{} pixel bytes for {} images of {} bytes",
                pixels.len(),
                labels.len(),
                PIXELS
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Format(format!(
                "image {} has label {} but only {} classes",
                i, l, num_classes
            )));
        }
        Ok(Self {
            pixels,
            labels,
            coarse: None,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    /// Images `indices`, scaled to `[0, 1]` and standardised, as `[B, 3, 32, 32]`.
    pub fn batch<F: Real>(&self, indices: &[usize], norm: &Normalizer) -> ImageBatch<F> {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            let img = self.image(i);
            for c in 0..3 {
                let (m, s) = (norm.mean[c], norm.std[c]);
                data.extend(
                    img[c * SIDE * SIDE..(c + 1) * SIDE * SIDE]
                        .iter()
                        .map(|&p| F::lit((p as f64 / 255.0 - m) / s)),
                );
            }
        }
        ImageBatch {
            images: Tensor::new([indices.len(), 3, SIDE, SIDE], data).expect("batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_cifar_bytes(&self, variant: CifarVariant) -> Result<Vec<u8>> {
        if self.num_classes > variant.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "{} classes do not fit the {} format",
                self.num_classes, variant
            )));
        }
        let mut out = Vec::with_capacity(self.len() * variant.record_len());
        for i in 0..self.len() {
            if variant == CifarVariant::Cifar100 {
                out.push(self.coarse.as_ref().map_or(0, |c| c[i]));
            }
            out.push(self.labels[i] as u8);
            out.extend_from_slice(self.image(i));
        }
        Ok(out)
    }

    pub fn write_cifar_binary(&self, path: impl AsRef<Path>, variant: CifarVariant) -> Result<()> {
        std::fs::write(path, self.to_cifar_bytes(variant)?)?;
        Ok(())
    }
}

/// Parses concatenated records; the fine label is the last label byte.
pub fn parse_cifar_bytes(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        let index = bytes.len() / rec;
        return Err(Error::Format(format!(
            "truncated {} record {} at byte offset {}: {} of {} bytes present",
            variant,
            index,
            index * rec,
            bytes.len() % rec,
            rec
        )));
    }
    let n = bytes.len() / rec;
    let lb = variant.label_bytes();
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = (variant == CifarVariant::Cifar100).then(|| Vec::with_capacity(n));
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[lb - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Format(format!(
                "record {} at byte offset {} has label {} (max {})",
                i,
                i * rec,
                label,
                variant.num_classes() - 1
            )));
        }
        if let Some(c) = coarse.as_mut() {
            c.push(r[0]);
        }
        labels.push(label);
        pixels.extend_from_slice(&r[lb..]);
    }
    let mut ds = Dataset::new(pixels, labels, variant.num_classes())?;
    ds.coarse = coarse;
    Ok(ds)
}

pub fn load_cifar_binary(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e))))?;
    parse_cifar_bytes(&bytes, variant)
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InvalidArgument("cannot fit statistics on an empty dataset".into()));
        }
        let plane = SIDE * SIDE;
        let mut sum = [0u64; 3];
        let mut sq = [0u64; 3];
        for i in 0..ds.len() {
            let img = ds.image(i);
            for c in 0..3 {
                for &p in &img[c * plane..(c + 1) * plane] {
                    sum[c] += p as u64;
                    sq[c] += (p as u64) * (p as u64);
                }
            }
        }
        let count = (ds.len() * plane) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let m = sum[c] as f64 / count;
            let var = sq[c] as f64 / count - m * m;
            mean[c] = m / 255.0;
            std[c] = (var.max(0.0).sqrt() / 255.0).max(1e-6);
        }
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<F> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
}

/// Per-image crop offset into the zero-padded image and flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub dy: usize,
    pub dx: usize,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        dy: CROP_PAD,
        dx: CROP_PAD,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip: rng.random::<bool>(),
            dy: rng.random_range(0..=2 * CROP_PAD),
            dx: rng.random_range(0..=2 * CROP_PAD),
        }
    }
}

/// Mirrors every plane of one `[C, H, W]` image left to right.
pub fn flip_horizontal<F: Copy>(img: &mut [F], width: usize) {
    for row in img.chunks_mut(width) {
        row.reverse();
    }
}

/// Crop of `[C, H, W]` at `(dy, dx)` in the image zero-padded by `pad` on every side.
pub fn crop_padded<F: Real>(img: &[F], channels: usize, side: usize, pad: usize, dy: usize, dx: usize) -> Vec<F> {
    let mut out = vec![F::zero(); channels * side * side];
    for c in 0..channels {
        for y in 0..side {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= side as isize {
                continue;
            }
            for x in 0..side {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= side as isize {
                    continue;
                }
                out[(c * side + y) * side + x] = img[(c * side + sy as usize) * side + sx as usize];
            }
        }
    }
    out
}

/// Applies one draw per image. Padding is zero in the standardised space.
pub fn augment_with<F: Real>(batch: &ImageBatch<F>, draws: &[AugmentDraw]) -> ImageBatch<F> {
    let shape = batch.images.shape().to_vec();
    let (c, side) = (shape[1], shape[2]);
    let per = c * side * side;
    let mut data = Vec::with_capacity(batch.images.numel());
    for (img, d) in batch.images.data().chunks(per).zip(draws) {
        let mut cropped = crop_padded(img, c, side, CROP_PAD, d.dy, d.dx);
        if d.flip {
            flip_horizontal(&mut cropped, side);
        }
        data.extend(cropped);
    }
    ImageBatch {
        images: Tensor::new(shape, data).expect("same shape"),
        labels: batch.labels.clone(),
    }
}

/// Random flip (p = 0.5) and random crop from the 4-pixel zero-padded image, per image.
pub fn augment<F: Real, R: Rng + ?Sized>(batch: &ImageBatch<F>, rng: &mut R) -> ImageBatch<F> {
    let draws: Vec<AugmentDraw> = (0..batch.labels.len()).map(|_| AugmentDraw::sample(rng)).collect();
    augment_with(batch, &draws)
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

const SHAPES: usize = 4;

/// Membership test for a unit-scale shape at normalised coordinates `(u, v)`.
fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        // disc
        0 => u * u + v * v <= 1.0,
        // square
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        // triangle, apex up (v grows downward)
        2 => v <= 0.8 && u.abs() <= 0.6 * (v + 1.0),
        // plus sign
        _ => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rendering knobs for [`synth_shapes_dataset`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthStyle {
    /// Per-pixel Gaussian noise, in `[0, 1]` intensity units.
    pub noise: f64,
    /// Hue half-width of each palette.
    pub hue_jitter: f64,
    /// Radius range in pixels.
    pub radius: (f64, f64),
    /// Probability of a low-contrast distractor shape behind the object.
    pub distractor: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            noise: 0.18,
            hue_jitter: 0.1,
            radius: (5.0, 11.0),
            distractor: 0.7,
        }
    }
}

/// Balanced procedural dataset: class `c` is shape `c mod 4` in palette `c / 4`.
pub fn synth_shapes_dataset(num_classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    synth_shapes_with(num_classes, per_class, seed, &SynthStyle::default())
}

pub fn synth_shapes_with(num_classes: usize, per_class: usize, seed: u64, style: &SynthStyle) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", num_classes)));
    }
    if num_classes > 256 {
        return Err(Error::InvalidArgument("at most 256 classes".into()));
    }
    let palettes = num_classes.div_ceil(SHAPES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, style.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = num_classes * per_class;
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut canvas = vec![0.0f64; PIXELS];
    let plane = SIDE * SIDE;
    for &label in &labels {
        let shape = label % SHAPES;
        let palette = label / SHAPES;
        let bg_level = rng.random_range(0.2..0.6);
        let bg_tint = hsv_to_rgb(rng.random::<f64>(), rng.random_range(0.0..0.3), bg_level);
        for c in 0..3 {
            canvas[c * plane..(c + 1) * plane].iter_mut().for_each(|p| *p = bg_tint[c]);
        }

        let mut draw = |shape: usize, color: [f64; 3], cx: f64, cy: f64, r: f64, angle: f64, alpha: f64| {
            let (sa, ca) = angle.sin_cos();
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let (dx, dy) = ((x as f64 + 0.5 - cx) / r, (y as f64 + 0.5 - cy) / r);
                    let (u, v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
                    if inside(shape, u, v) {
                        for c in 0..3 {
                            let p = &mut canvas[c * plane + y * SIDE + x];
                            *p = (1.0 - alpha) * *p + alpha * color[c];
                        }
                    }
                }
            }
        };

        if rng.random::<f64>() < style.distractor {
            let ds = rng.random_range(0..SHAPES);
            let col = hsv_to_rgb(rng.random::<f64>(), rng.random_range(0.2..0.8), rng.random_range(0.3..0.9));
            let (cx, cy) = (rng.random_range(4.0..28.0), rng.random_range(4.0..28.0));
            let r = rng.random_range(3.0..6.0);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            draw(ds, col, cx, cy, r, a, 0.45);
        }

        let hue = palette as f64 / palettes as f64 + rng.random_range(-style.hue_jitter..=style.hue_jitter);
        let color = hsv_to_rgb(hue, rng.random_range(0.55..1.0), rng.random_range(0.65..1.0));
        let r = rng.random_range(style.radius.0..style.radius.1);
        let margin = r * 0.8;
        let cx = rng.random_range(margin..SIDE as f64 - margin);
        let cy = rng.random_range(margin..SIDE as f64 - margin);
        let angle = rng.random_range(-0.35..0.35);
        draw(shape, color, cx, cy, r, angle, 1.0);

        for p in canvas.iter_mut() {
            let v = *p + noise.sample(&mut rng);
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Dataset::new(pixels, labels, num_classes)
}

/// Disjoint train and test sets drawn from independent streams of `seed`.
pub fn synth_shapes_split(num_classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = synth_shapes_dataset(num_classes, train_per_class, seed)?;
    let test = synth_shapes_dataset(num_classes, test_per_class, seed ^ 0x7e57_7e57_7e57_7e57)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize, variant: CifarVariant, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..n {
            if variant == CifarVariant::Cifar100 {
                out.push(rng.random_range(0..20u8));
            }
            out.push(rng.random_range(0..variant.num_classes() as u8));
            out.extend((0..PIXELS).map(|_| rng.random::<u8>()));
        }
        out
    }

    #[test]
    fn record_arithmetic() {
        let bytes = fixture(7, CifarVariant::Cifar10, 0);
        assert_eq!(bytes.len(), 7 * 3073);
        let ds = parse_cifar_bytes(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.len(), 7);
        assert_eq!(ds.labels()[3], bytes[3 * 3073] as usize);
        assert_eq!(ds.image(3)[0], bytes[3 * 3073 + 1]);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let bytes = fixture(3, CifarVariant::Cifar100, 1);
        let ds = parse_cifar_bytes(&bytes, CifarVariant::Cifar100).unwrap();
        for i in 0..3 {
            assert_eq!(ds.labels()[i], bytes[i * 3074 + 1] as usize);
        }
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = fixture(4, CifarVariant::Cifar10, 2);
        let err = parse_cifar_bytes(&bytes[..bytes.len() - 10], CifarVariant::Cifar10).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 3") && msg.contains("offset 9219"), "{}", msg);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut bytes = fixture(2, CifarVariant::Cifar10, 3);
        bytes[3073] = 10;
        assert!(parse_cifar_bytes(&bytes, CifarVariant::Cifar10).is_err());
    }

    #[test]
    fn byte_round_trip() {
        for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
            let bytes = fixture(5, variant, 4);
            let ds = parse_cifar_bytes(&bytes, variant).unwrap();
            assert_eq!(ds.to_cifar_bytes(variant).unwrap(), bytes);
        }
    }

    #[test]
    fn flips_and_crops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::<f32>::randn([2, 3, SIDE, SIDE], &mut rng);
        let batch = ImageBatch {
            images: img.clone(),
            labels: vec![0, 1],
        };
        let same = augment_with(&batch, &[AugmentDraw::IDENTITY; 2]);
        assert_eq!(same, batch);

        let flip = AugmentDraw {
            flip: true,
            ..AugmentDraw::IDENTITY
        };
        let twice = augment_with(&augment_with(&batch, &[flip; 2]), &[flip; 2]);
        assert_eq!(twice, batch);

        let shifted = augment_with(&batch, &[AugmentDraw { flip: false, dy: 0, dx: 8 }; 2]);
        let d = shifted.images.data();
        // first 4 rows are zero padding; column x maps to source x + 4
        assert!(d[..4 * SIDE].iter().all(|&v| v == 0.0));
        assert_eq!(d[4 * SIDE], img.data()[4]);
        assert_eq!(d[5 * SIDE + 28], 0.0);
        assert_ne!(d[5 * SIDE + 27], 0.0);

        for _ in 0..5 {
            let out = augment(&batch, &mut rng);
            assert_eq!(out.images.shape(), batch.images.shape());
            assert_eq!(out.labels, batch.labels);
        }
    }

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let a = synth_shapes_dataset(8, 25, 9).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.class_counts(), vec![25; 8]);
        let b = synth_shapes_dataset(8, 25, 9).unwrap();
        assert_eq!(a.to_cifar_bytes(CifarVariant::Cifar10).unwrap(), b.to_cifar_bytes(CifarVariant::Cifar10).unwrap());
        let c = synth_shapes_dataset(8, 25, 10).unwrap();
        assert_ne!(a, c);
        assert!(synth_shapes_dataset(1, 10, 0).is_err());
    }

    #[test]
    fn standardisation_centres_training_set() {
        let ds = synth_shapes_dataset(4, 20, 11).unwrap();
        let norm = Normalizer::fit(&ds).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let b = ds.batch::<f64>(&idx, &norm);
        let plane = SIDE * SIDE;
        for c in 0..3 {
            let vals: Vec<f64> = b
                .images
                .data()
                .chunks(PIXELS)
                .flat_map(|img| img[c * plane..(c + 1) * plane].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "channel {} mean {}", c, m);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(100, 3, 0);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(100, 3, 0));
        assert_ne!(a, epoch_order(100, 3, 1));
    }
}
