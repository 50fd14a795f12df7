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

//! Pairing of intermediate maps, negative construction, the teacher-side
//! memory bank, and the weighted distillation loss.
//!
//! MI terms are bounds to maximise; the total subtracts them, so minimising
//! the total ascends every bound.

use std::collections::VecDeque;

use rand::Rng;

use crate::critics::{rowwise_dot, CriticConfig, MapCritic, ProjectDotCritic};
use crate::error::{shape_err, Error, Result};
use crate::mi::{infonce_lower_bound, jsd_lower_bound, ScoreSet};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_BANK_CAPACITY: usize = 4096;
pub const KD_ALPHA: f64 = 0.9;
pub const KD_TEMPERATURE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub lambda_f: f64,
}

impl Default for LossWeights {
    /// CIFAR-scale defaults.
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_g: 1.0,
            lambda_l: 0.75,
            lambda_f: 1.0,
        }
    }
}

impl LossWeights {
    /// ImageNet-scale preset.
    pub fn imagenet() -> Self {
        Self {
            alpha: 0.9,
            lambda_g: 0.2,
            lambda_l: 0.8,
            lambda_f: 0.8,
        }
    }

    pub fn cross_entropy_only() -> Self {
        Self {
            alpha: 1.0,
            lambda_g: 0.0,
            lambda_l: 0.0,
            lambda_f: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda_g", self.lambda_g),
            ("lambda_l", self.lambda_l),
            ("lambda_f", self.lambda_f),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        Ok(())
    }
}

/// Greedy in-order matching of equal spatial sizes, both lists shallow to deep.
///
/// Returns `(teacher_index, student_index)` pairs; channel counts are free to differ.
pub fn build_pairing_set(teacher_sizes: &[usize], student_sizes: &[usize]) -> Result<Vec<(usize, usize)>> {
    let (mut i, mut j) = (0, 0);
    let mut pairs = Vec::new();
    while i < teacher_sizes.len() && j < student_sizes.len() {
        let (t, s) = (teacher_sizes[i], student_sizes[j]);
        if t == s {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if t > s {
            i += 1;
        } else {
            j += 1;
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoPairs {
            teacher: teacher_sizes.to_vec(),
            student: student_sizes.to_vec(),
        });
    }
    Ok(pairs)
}

/// Row `i` becomes row `(i + 1) mod N`.
pub fn shift_negatives<F: Real>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let n = tape.shape(x).first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need a batch of at least 2 to form negatives, got {}",
            n
        )));
    }
    tape.index_rows(x, (0..n).map(|i| (i + 1) % n).collect())
}

/// FIFO of detached `[dim]` rows.
#[derive(Clone, Debug)]
pub struct MemoryBank<F> {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<F>>,
}

impl<F: Real> MemoryBank<F> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends every row of a `[B, dim]` tensor, evicting the oldest beyond capacity.
    pub fn push(&mut self, entries: &Tensor<F>) -> Result<()> {
        if entries.rank() != 2 || entries.shape()[1] != self.dim {
            return Err(shape_err(
                "MemoryBank::push",
                format!("entries {:?} vs bank dim {}", entries.shape(), self.dim),
            ));
        }
        for row in entries.data().chunks(self.dim) {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            if self.capacity > 0 {
                self.rows.push_back(row.to_vec());
            }
        }
        Ok(())
    }

    /// The newest `min(want, len)` rows, oldest first, as `[k, dim]`.
    pub fn newest(&self, want: usize) -> Tensor<F> {
        let k = want.min(self.rows.len());
        let data: Vec<F> = self.rows.iter().skip(self.rows.len() - k).flatten().copied().collect();
        Tensor::new([k, self.dim], data).expect("rows have bank dim")
    }

    pub fn snapshot(&self) -> Tensor<F> {
        self.newest(self.rows.len())
    }
}

/// Pushes `new_entries`, then returns up to `want` of the newest rows.
pub fn bank_update_and_sample<F: Real>(bank: &mut MemoryBank<F>, new_entries: &Tensor<F>, want: usize) -> Result<Tensor<F>> {
    bank.push(new_entries)?;
    Ok(bank.newest(want))
}

/// Both networks' outputs for one batch, on a shared tape.
///
/// Teacher entries are constants; student entries carry gradients.
#[derive(Clone, Debug)]
pub struct RepresentationBundle {
    pub teacher_final: Var,
    pub student_final: Var,
    pub student_logits: Var,
    pub teacher_logits: Var,
    /// `(teacher_map, student_map)`, shallow to deep, equal spatial sizes.
    pub pairs: Vec<(Var, Var)>,
}

/// Critics of the active MI terms; inactive terms carry none.
pub struct Critics<F> {
    pub global: Option<ProjectDotCritic<F>>,
    pub local: Option<MapCritic<F>>,
    pub feature: Vec<MapCritic<F>>,
}

/// Channel counts needed to size the critics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CriticDims {
    pub teacher_final: usize,
    pub student_final: usize,
    /// `(teacher_channels, student_channels)` per pair.
    pub pairs: Vec<(usize, usize)>,
}

impl<F: Real> Critics<F> {
    /// Builds critics only for terms with nonzero weight, in the order global, local, feature.
    pub fn new<R: Rng + ?Sized>(dims: &CriticDims, weights: &LossWeights, cfg: &CriticConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let global = (weights.lambda_g > 0.0).then(|| {
            ProjectDotCritic::new(
                "critic.global",
                dims.teacher_final,
                dims.student_final,
                cfg.hidden,
                cfg.proj_dim,
                rng,
            )
        });
        let local = if weights.lambda_l > 0.0 {
            let &(_, cs) = dims
                .pairs
                .last()
                .ok_or_else(|| Error::InvalidArgument("local objective needs at least one pair".into()))?;
            Some(MapCritic::new("critic.local", dims.teacher_final, cs, cfg, rng))
        } else {
            None
        };
        let feature = if weights.lambda_f > 0.0 {
            dims.pairs
                .iter()
                .enumerate()
                .map(|(k, &(ct, cs))| MapCritic::new(format!("critic.feat.k{}", k + 1), ct, cs, cfg, rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self { global, local, feature })
    }

    pub fn stores(&self) -> Vec<&ParamStore<F>> {
        let mut out = Vec::new();
        if let Some(g) = &self.global {
            out.push(&g.store);
        }
        if let Some(l) = &self.local {
            out.push(l.store());
        }
        out.extend(self.feature.iter().map(|c| c.store()));
        out
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore<F>> {
        let mut out = Vec::new();
        if let Some(g) = &mut self.global {
            out.push(&mut g.store);
        }
        if let Some(l) = &mut self.local {
            out.push(l.store_mut());
        }
        out.extend(self.feature.iter_mut().map(|c| c.store_mut()));
        out
    }
}

/// A bound on the tape and its value.
#[derive(Clone, Copy, Debug)]
pub struct Term {
    pub value: Var,
    pub raw: f64,
}

/// InfoNCE between student and teacher final vectors, negatives from the bank
/// (or the other in-batch teacher rows while the bank is empty). The bank holds
/// raw teacher final vectors, re-projected with the current head every step;
/// the current batch is pushed afterwards.
pub fn global_objective<F: Real>(
    tape: &mut Tape<F>,
    bundle: &RepresentationBundle,
    critic: &ProjectDotCritic<F>,
    bank: &mut MemoryBank<F>,
) -> Result<Term> {
    let s = critic.project_student(tape, bundle.student_final)?;
    let t = critic.project_teacher(tape, bundle.teacher_final)?;
    let pos = rowwise_dot(tape, s, t)?;
    let n = tape.shape(s)[0];
    let neg = if bank.is_empty() {
        if n < 2 {
            return Err(Error::InvalidArgument("in-batch negatives need a batch of at least 2".into()));
        }
        let all = tape.matmul_nt(s, t)?;
        let off_diag: Vec<usize> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i)).collect();
        tape.gather_cols(all, off_diag, n - 1)?
    } else {
        let stored = tape.constant(bank.snapshot());
        let keys = critic.project_teacher(tape, stored)?;
        tape.matmul_nt(s, keys)?
    };
    let bound = infonce_lower_bound(tape, pos, neg)?;
    bank.push(&tape.value(bundle.teacher_final).clone())?;
    Ok(Term {
        value: bound.value,
        raw: bound.estimate.raw,
    })
}

/// JSD between the replicated teacher final vector and every location of the deepest student map.
pub fn local_objective<F: Real>(tape: &mut Tape<F>, bundle: &RepresentationBundle, critic: &MapCritic<F>) -> Result<Term> {
    let &(_, student_map) = bundle
        .pairs
        .last()
        .ok_or_else(|| Error::InvalidArgument("local objective needs at least one pair".into()))?;
    let m = tape.shape(student_map)[2];
    let shifted = shift_negatives(tape, bundle.teacher_final)?;
    let t_pos = tape.replicate_spatial(bundle.teacher_final, m)?;
    let t_neg = tape.replicate_spatial(shifted, m)?;
    let positive = critic.scores(tape, t_pos, student_map)?;
    let negative = critic.scores(tape, t_neg, student_map)?;
    let bound = jsd_lower_bound(tape, &ScoreSet { positive, negative })?;
    Ok(Term {
        value: bound.value,
        raw: bound.estimate.raw,
    })
}

/// Mean over pairs of the JSD between region-consistent teacher and student locations.
pub fn feature_objective<F: Real>(tape: &mut Tape<F>, bundle: &RepresentationBundle, critics: &[MapCritic<F>]) -> Result<Term> {
    if bundle.pairs.is_empty() || critics.len() != bundle.pairs.len() {
        return Err(Error::InvalidArgument(format!(
            "feature objective needs one critic per pair, got {} critics for {} pairs",
            critics.len(),
            bundle.pairs.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (critic, &(t_map, s_map)) in critics.iter().zip(&bundle.pairs) {
        let t_neg = shift_negatives(tape, t_map)?;
        let positive = critic.scores(tape, t_map, s_map)?;
        let negative = critic.scores(tape, t_neg, s_map)?;
        let b = jsd_lower_bound(tape, &ScoreSet { positive, negative })?;
        total = Some(match total {
            None => b.value,
            Some(acc) => tape.add(acc, b.value)?,
        });
    }
    let value = tape.scale(total.expect("nonempty"), F::lit(1.0 / critics.len() as f64));
    let raw = tape.item(value).expect("scalar").as_f64();
    Ok(Term { value, raw })
}

/// Per-term scalars for one step. MI entries are raw bound values and are
/// `None` for terms with zero weight.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub global_mi: Option<f64>,
    pub local_mi: Option<f64>,
    pub feature_mi: Option<f64>,
}

impl LossReport {
    /// `alpha ce - lambda_g g - lambda_l l - lambda_f f`, absent terms counting as 0.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.alpha * self.ce
            - w.lambda_g * self.global_mi.unwrap_or(0.0)
            - w.lambda_l * self.local_mi.unwrap_or(0.0)
            - w.lambda_f * self.feature_mi.unwrap_or(0.0)
    }
}

fn weighted_sum<F: Real>(tape: &mut Tape<F>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let scaled = if w == 1.0 { v } else { tape.scale(v, F::lit(w)) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("empty loss".into()))
}

/// The weighted objective; terms with zero weight are not computed at all.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    bundle: &RepresentationBundle,
    weights: &LossWeights,
    labels: &[usize],
    critics: &Critics<F>,
    bank: &mut MemoryBank<F>,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let ce = tape.cross_entropy(bundle.student_logits, labels)?;
    let mut report = LossReport {
        ce: tape.item(ce).expect("scalar").as_f64(),
        ..Default::default()
    };
    let mut terms = vec![(weights.alpha, ce)];
    if weights.lambda_g > 0.0 {
        let critic = critics
            .global
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("global weight set but no global critic".into()))?;
        let t = global_objective(tape, bundle, critic, bank)?;
        report.global_mi = Some(t.raw);
        terms.push((-weights.lambda_g, t.value));
    }
    if weights.lambda_l > 0.0 {
        let critic = critics
            .local
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("local weight set but no local critic".into()))?;
        let t = local_objective(tape, bundle, critic)?;
        report.local_mi = Some(t.raw);
        terms.push((-weights.lambda_l, t.value));
    }
    if weights.lambda_f > 0.0 {
        let t = feature_objective(tape, bundle, &critics.feature)?;
        report.feature_mi = Some(t.raw);
        terms.push((-weights.lambda_f, t.value));
    }
    let total = weighted_sum(tape, &terms)?;
    report.total = tape.item(total).expect("scalar").as_f64();
    Ok((total, report))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KdReport {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
}

/// `alpha CE + (1 - alpha) tau^2 KL(softmax(t / tau) || softmax(s / tau))`, KL averaged over the batch.
pub fn kd_baseline_loss<F: Real>(
    tape: &mut Tape<F>,
    student_logits: Var,
    teacher_logits: &Tensor<F>,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<(Var, KdReport)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", temperature)));
    }
    if tape.shape(student_logits) != teacher_logits.shape() {
        return Err(shape_err(
            "kd_baseline_loss",
            format!("student {:?} vs teacher {:?}", tape.shape(student_logits), teacher_logits.shape()),
        ));
    }
    let ce = tape.cross_entropy(student_logits, labels)?;
    let n = teacher_logits.shape()[0] as f64;
    let inv_t = F::lit(1.0 / temperature);

    // teacher side is a constant: precompute p_t and sum p_t log p_t
    let mut probe = Tape::<F>::no_grad();
    let tl = probe.constant(teacher_logits.clone());
    let tl = probe.scale(tl, inv_t);
    let log_pt = probe.log_softmax(tl)?;
    let log_pt = probe.value(log_pt).clone();
    let pt: Vec<F> = log_pt.data().iter().map(|v| v.exp()).collect();
    let neg_entropy: f64 = pt.iter().zip(log_pt.data()).map(|(&p, &l)| (p * l).as_f64()).sum();

    let scaled = tape.scale(student_logits, inv_t);
    let log_ps = tape.log_softmax(scaled)?;
    let pt = tape.constant(Tensor::new(teacher_logits.shape().to_vec(), pt)?);
    let cross = tape.mul(pt, log_ps)?;
    let cross = tape.sum(cross);
    // KL = (sum p_t log p_t - sum p_t log p_s) / N
    let kl = tape.scale(cross, F::lit(-1.0 / n));
    let kl = tape.add_scalar(kl, F::lit(neg_entropy / n));
    let kl_w = (1.0 - alpha) * temperature * temperature;
    let total = weighted_sum(tape, &[(alpha, ce), (kl_w, kl)])?;
    Ok((
        total,
        KdReport {
            total: tape.item(total).expect("scalar").as_f64(),
            ce: tape.item(ce).expect("scalar").as_f64(),
            kl: tape.item(kl).expect("scalar").as_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critics::{ConvolveCritic, LocalStyle};
    use crate::mi::LN_2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairing_examples() {
        assert_eq!(
            build_pairing_set(&[32, 32, 16, 8], &[32, 32, 16, 8]).unwrap(),
            vec![(0, 0), (1, 1), (2, 2), (3, 3)]
        );
        assert_eq!(
            build_pairing_set(&[32, 16, 8, 4], &[16, 8, 4]).unwrap(),
            vec![(1, 0), (2, 1), (3, 2)]
        );
        let err = build_pairing_set(&[8], &[7]).unwrap_err();
        assert!(matches!(err, Error::NoPairs { .. }));
        assert!(err.to_string().contains("reconfigure"));
    }

    fn rows(tape: &mut Tape<f64>, n: usize) -> Var {
        tape.leaf(Tensor::from_f64([n, 1], &(0..n).map(|i| i as f64).collect::<Vec<_>>()).unwrap())
    }

    #[test]
    fn shift_examples() {
        let mut tape = Tape::new();
        let x = rows(&mut tape, 4);
        let y = shift_negatives(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 0.0]);
        let x = rows(&mut tape, 2);
        let y = shift_negatives(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
        let x = rows(&mut tape, 1);
        assert!(shift_negatives(&mut tape, x).is_err());
    }

    #[test]
    fn bank_fifo() {
        let mut bank = MemoryBank::<f32>::new(4096, 2);
        let data: Vec<f32> = (0..5000).flat_map(|i| [i as f32, 0.0]).collect();
        let all = bank_update_and_sample(&mut bank, &Tensor::new([5000, 2], data).unwrap(), 4096).unwrap();
        assert_eq!(bank.len(), 4096);
        assert_eq!(all.shape(), &[4096, 2]);
        assert_eq!(all.data()[0], 904.0);
        assert_eq!(all.data()[2 * 4095], 4999.0);

        let mut empty = MemoryBank::<f32>::new(16, 3);
        let got = bank_update_and_sample(&mut empty, &Tensor::zeros([0, 3]), 10).unwrap();
        assert_eq!(got.shape(), &[0, 3]);
    }

    #[test]
    fn kd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::<f64>::randn([4, 5], &mut rng);
        let labels = [0, 1, 2, 3];
        let mut tape = Tape::new();
        let s = tape.leaf(logits.clone());
        let (_, r) = kd_baseline_loss(&mut tape, s, &logits, &labels, 0.9, 4.0).unwrap();
        assert!(r.kl.abs() < 1e-12);
        assert!((r.total - 0.9 * r.ce).abs() < 1e-12);

        let other = Tensor::<f64>::randn([4, 5], &mut rng);
        let (_, r) = kd_baseline_loss(&mut tape, s, &other, &labels, 1.0, 4.0).unwrap();
        assert!((r.total - r.ce).abs() < 1e-12);
        assert!(r.kl > 0.0);
        assert!(kd_baseline_loss(&mut tape, s, &other, &labels, 0.9, 0.0).is_err());
    }

    /// Direct KL on probabilities.
    #[test]
    fn kd_kl_matches_direct_formula() {
        let s = [[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]];
        let t = [[0.3, 1.5, 2.0], [1.0, 1.0, -2.0]];
        let tau = 2.0;
        let softmax = |row: &[f64; 3]| {
            let e: Vec<f64> = row.iter().map(|v| (v / tau).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect::<Vec<_>>()
        };
        let mut kl = 0.0;
        for i in 0..2 {
            let (p, q) = (softmax(&t[i]), softmax(&s[i]));
            kl += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
        }
        kl /= 2.0;
        let mut tape = Tape::<f64>::new();
        let sv = tape.leaf(Tensor::from_f64([2, 3], &s.concat()).unwrap());
        let tv = Tensor::from_f64([2, 3], &t.concat()).unwrap();
        let (_, r) = kd_baseline_loss(&mut tape, sv, &tv, &[0, 2], 0.5, tau).unwrap();
        assert!((r.kl - kl).abs() < 1e-12);
        assert!((r.total - (0.5 * r.ce + 0.5 * tau * tau * kl)).abs() < 1e-12);
    }

    fn bundle(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, n: usize, sizes: &[usize]) -> RepresentationBundle {
        let teacher_final = tape.constant(Tensor::randn([n, 6], rng));
        let student_final = tape.leaf(Tensor::randn([n, 4], rng));
        let student_logits = tape.leaf(Tensor::randn([n, 3], rng));
        let teacher_logits = tape.constant(Tensor::randn([n, 3], rng));
        let pairs = sizes
            .iter()
            .map(|&m| {
                let t = tape.constant(Tensor::randn([n, 5, m, m], rng));
                let s = tape.leaf(Tensor::randn([n, 2, m, m], rng));
                (t, s)
            })
            .collect();
        RepresentationBundle {
            teacher_final,
            student_final,
            student_logits,
            teacher_logits,
            pairs,
        }
    }

    fn dims(sizes: &[usize]) -> CriticDims {
        CriticDims {
            teacher_final: 6,
            student_final: 4,
            pairs: sizes.iter().map(|_| (5, 2)).collect(),
        }
    }

    fn cfg() -> CriticConfig {
        CriticConfig {
            hidden: 8,
            proj_dim: 4,
            local_style: LocalStyle::Convolve,
        }
    }

    #[test]
    fn zero_critics_give_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sizes = [4, 2, 1];
        let mut tape = Tape::new();
        let b = bundle(&mut tape, &mut rng, 4, &sizes);
        let mut critics = Critics::<f64>::new(&dims(&sizes), &LossWeights::default(), &cfg(), &mut rng).unwrap();
        critics.global.as_mut().unwrap().zero_output();
        critics.local.as_mut().unwrap().zero_output();
        critics.feature.iter_mut().for_each(|c| c.zero_output());
        let mut bank = MemoryBank::new(64, 6);
        let g = global_objective(&mut tape, &b, critics.global.as_ref().unwrap(), &mut bank).unwrap();
        assert!(g.raw.abs() < 1e-12);
        assert_eq!(bank.len(), 4);
        let l = local_objective(&mut tape, &b, critics.local.as_ref().unwrap()).unwrap();
        assert!((l.raw + 2.0 * LN_2).abs() < 1e-12);
        let f = feature_objective(&mut tape, &b, &critics.feature).unwrap();
        assert!((f.raw + 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn global_uses_whole_bank_once_filled() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let b = bundle(&mut tape, &mut rng, 64, &[2]);
        let critic = ProjectDotCritic::<f64>::new("g", 6, 4, 8, 4, &mut rng);
        let mut bank = MemoryBank::new(4096, 6);
        bank.push(&Tensor::randn([4096, 6], &mut rng)).unwrap();
        let before = tape.len();
        global_objective(&mut tape, &b, &critic, &mut bank).unwrap();
        let saw_full = (before..tape.len()).any(|i| {
            let v = crate::tensor::Var(i);
            tape.shape(v) == [64, 4096]
        });
        assert!(saw_full);
        assert_eq!(bank.len(), 4096);
    }

    #[test]
    fn global_approaches_cap_for_aligned_projections() {
        // scores as the global objective forms them: aligned positives, orthogonal bank
        let m = 15usize;
        let n = 4usize;
        let mut prev = f64::NEG_INFINITY;
        for scale in [1.0, 4.0, 16.0] {
            let mut tape = Tape::<f64>::new();
            let mut s = vec![0.0; n * 16];
            for i in 0..n {
                s[i * 16 + i] = scale;
            }
            let s = tape.leaf(Tensor::from_f64([n, 16], &s).unwrap());
            let mut keys = vec![0.0; m * 16];
            for j in 0..m {
                keys[j * 16 + (n + j) % 16] = 1.0;
            }
            let keys = tape.constant(Tensor::from_f64([m, 16], &keys).unwrap());
            let pos = rowwise_dot(&mut tape, s, s).unwrap();
            let neg = tape.matmul_nt(s, keys).unwrap();
            let raw = infonce_lower_bound(&mut tape, pos, neg).unwrap().estimate.raw;
            assert!(raw > prev);
            prev = raw;
        }
        assert!(((m + 1) as f64).ln() - prev < 1e-6);
    }

    /// Recomputes the local bound from explicitly built score maps.
    fn local_by_hand(tape: &mut Tape<f64>, b: &RepresentationBundle, critic: &MapCritic<f64>) -> (Vec<usize>, f64) {
        let (_, s_map) = *b.pairs.last().unwrap();
        let m = tape.shape(s_map)[2];
        let n = tape.shape(s_map)[0];
        let t = tape.value(b.teacher_final).clone();
        let d = t.shape()[1];
        let shifted: Vec<f64> = (0..n).flat_map(|i| t.data()[((i + 1) % n) * d..][..d].to_vec()).collect();
        let pos_in = tape.replicate_spatial(b.teacher_final, m).unwrap();
        let neg_t = tape.constant(Tensor::new([n, d], shifted).unwrap());
        let neg_in = tape.replicate_spatial(neg_t, m).unwrap();
        let positive = critic.scores(tape, pos_in, s_map).unwrap();
        let negative = critic.scores(tape, neg_in, s_map).unwrap();
        let shape = tape.shape(positive).to_vec();
        let raw = jsd_lower_bound(tape, &ScoreSet { positive, negative }).unwrap().estimate.raw;
        (shape, raw)
    }

    #[test]
    fn local_score_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let b = bundle(&mut tape, &mut rng, 4, &[8]);
        let critic = MapCritic::Convolve(ConvolveCritic::<f64>::new("l", 6, 2, 8, &mut rng));
        let got = local_objective(&mut tape, &b, &critic).unwrap().raw;
        let (shape, want) = local_by_hand(&mut tape, &b, &critic);
        assert_eq!(shape, vec![4, 1, 8, 8]);
        assert_eq!(shape.iter().product::<usize>(), 256);
        assert_eq!(got, want);

        let mut tape = Tape::new();
        let one = bundle(&mut tape, &mut rng, 1, &[8]);
        assert!(local_objective(&mut tape, &one, &critic).is_err());
    }

    #[test]
    fn unit_maps_reduce_to_vector_jsd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let b = bundle(&mut tape, &mut rng, 3, &[1]);
        let critic = MapCritic::Convolve(ConvolveCritic::<f64>::new("l", 6, 2, 8, &mut rng));
        let got = local_objective(&mut tape, &b, &critic).unwrap().raw;
        let (shape, want) = local_by_hand(&mut tape, &b, &critic);
        assert_eq!(shape, vec![3, 1, 1, 1]);
        assert_eq!(got, want);
    }

    #[test]
    fn feature_value_ignores_pair_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sizes = [4, 2, 1];
        let mut tape = Tape::new();
        let b = bundle(&mut tape, &mut rng, 3, &sizes);
        let critics = Critics::<f64>::new(&dims(&sizes), &LossWeights::default(), &cfg(), &mut rng).unwrap();
        let f = feature_objective(&mut tape, &b, &critics.feature).unwrap().raw;
        let mut rb = b.clone();
        rb.pairs.reverse();
        let mut rc = critics.feature;
        rc.reverse();
        let r = feature_objective(&mut tape, &rb, &rc).unwrap().raw;
        assert!((f - r).abs() < 1e-12);
    }

    #[test]
    fn report_identity_and_frozen_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sizes = [4, 2];
        let mut tape = Tape::new();
        let b = bundle(&mut tape, &mut rng, 4, &sizes);
        let w = LossWeights::default();
        let critics = Critics::<f64>::new(&dims(&sizes), &w, &cfg(), &mut rng).unwrap();
        let mut bank = MemoryBank::new(32, 6);
        let (total, report) = total_loss(&mut tape, &b, &w, &[0, 1, 2, 0], &critics, &mut bank).unwrap();
        assert!((report.total - report.recompose(&w)).abs() < 1e-6);
        assert!(report.global_mi.is_some() && report.local_mi.is_some() && report.feature_mi.is_some());
        tape.backward(total).unwrap();
        assert!(tape.grad(b.teacher_final).is_none());
        for &(t, s) in &b.pairs {
            assert!(tape.grad(t).is_none());
            assert!(tape.grad(s).is_some());
        }
        assert!(tape.grad(b.student_final).is_some());

        let mut tape2 = Tape::new();
        let b2 = bundle(&mut tape2, &mut rng, 4, &sizes);
        assert!(matches!(
            total_loss(&mut tape2, &b2, &w, &[0, 1, 3, 0], &critics, &mut bank),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn cross_entropy_corner_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let b = bundle(&mut tape, &mut rng, 4, &[2]);
        let w = LossWeights::cross_entropy_only();
        let critics = Critics::<f64>::new(&dims(&[2]), &w, &cfg(), &mut rng).unwrap();
        assert!(critics.stores().is_empty());
        let mut bank = MemoryBank::new(8, 6);
        let (total, report) = total_loss(&mut tape, &b, &w, &[0, 1, 2, 0], &critics, &mut bank).unwrap();
        let ce = tape.cross_entropy(b.student_logits, &[0, 1, 2, 0]).unwrap();
        assert_eq!(tape.value(total).data(), tape.value(ce).data());
        assert_eq!(report.total, report.ce);
        assert!(bank.is_empty());
    }

    #[test]
    fn every_critic_parameter_gets_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for style in [LocalStyle::Convolve, LocalStyle::Project2d] {
            let sizes = [4, 2];
            let mut tape = Tape::new();
            let b = bundle(&mut tape, &mut rng, 6, &sizes);
            let w = LossWeights::default();
            let c = CriticConfig { local_style: style, ..cfg() };
            let mut critics = Critics::<f64>::new(&dims(&sizes), &w, &c, &mut rng).unwrap();
            let mut bank = MemoryBank::new(32, 6);
            let (total, _) = total_loss(&mut tape, &b, &w, &[0, 1, 2, 0, 1, 2], &critics, &mut bank).unwrap();
            tape.backward(total).unwrap();
            for store in critics.stores_mut() {
                store.collect_grads(&tape);
                for p in store.params() {
                    let g = p.grad.as_ref().unwrap_or_else(|| panic!("{}.{} has no grad", store.prefix(), p.name));
                    assert!(g.data().iter().any(|&v| v != 0.0), "{}.{} all zero", store.prefix(), p.name);
                }
            }
        }
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert_eq!(LossWeights::imagenet().lambda_l, 0.8);
        let bad = LossWeights {
            lambda_f: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
