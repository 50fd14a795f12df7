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

//! Mutual-information lower bounds over critic scores, and a correlated
//! Gaussian benchmark whose MI is known in closed form.
//!
//! Both bounds are returned as values to maximise. The JSD bound sits at
//! `-2 ln 2` for an uninformative critic, so it is also reported shifted by
//! `2 ln 2` ("centered"), which reads as zero under independence.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::optim::Sgd;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Jsd,
    InfoNce,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Jsd => "jsd",
            EstimatorKind::InfoNce => "infonce",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsd" => Ok(EstimatorKind::Jsd),
            "infonce" => Ok(EstimatorKind::InfoNce),
            other => Err(Error::InvalidArgument(format!(
                "unknown estimator `{}` (expected jsd or infonce)",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    pub kind: EstimatorKind,
    pub raw: f64,
    /// `raw + 2 ln 2` for JSD, `raw` for InfoNCE.
    pub centered: f64,
}

impl MiEstimate {
    pub fn from_raw(kind: EstimatorKind, raw: f64) -> Self {
        let centered = match kind {
            EstimatorKind::Jsd => raw + 2.0 * LN_2,
            EstimatorKind::InfoNce => raw,
        };
        Self {
            kind,
            raw,
            centered,
        }
    }
}

/// Critic outputs on joint samples (`positive`) and on product-of-marginals
/// samples (`negative`).
#[derive(Clone, Copy, Debug)]
pub struct ScoreSet {
    pub positive: Var,
    pub negative: Var,
}

/// A differentiable bound on the tape together with its reported value.
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    pub value: Var,
    pub estimate: MiEstimate,
}

fn check_scores<F: Real>(tape: &Tape<F>, v: Var, what: &str) -> Result<()> {
    let t = tape.value(v);
    if t.numel() == 0 {
        return Err(Error::InvalidArgument(format!("empty {} score set", what)));
    }
    if !t.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite {} score", what)));
    }
    Ok(())
}

/// `E_pos[-softplus(-T)] - E_neg[softplus(T)]`.
///
/// Scores may have any shape; each side is averaged over all its entries.
pub fn jsd_lower_bound<F: Real>(tape: &mut Tape<F>, scores: &ScoreSet) -> Result<Bound> {
    check_scores(tape, scores.positive, "positive")?;
    check_scores(tape, scores.negative, "negative")?;
    let flipped = tape.neg(scores.positive);
    let pos_sp = tape.softplus(flipped);
    let pos_term = tape.mean(pos_sp)?;
    let neg_sp = tape.softplus(scores.negative);
    let neg_term = tape.mean(neg_sp)?;
    let both = tape.add(pos_term, neg_term)?;
    let value = tape.neg(both);
    let raw = tape.item(value).expect("scalar").as_f64();
    Ok(Bound {
        value,
        estimate: MiEstimate::from_raw(EstimatorKind::Jsd, raw),
    })
}

/// `mean_i [T+_i - logsumexp(T+_i, T-_i1..T-_iM)] + ln(M + 1)`, never above `ln(M + 1)`.
pub fn infonce_lower_bound<F: Real>(tape: &mut Tape<F>, positive: Var, negatives: Var) -> Result<Bound> {
    let ps = tape.shape(positive).to_vec();
    let ns = tape.shape(negatives).to_vec();
    if ns.len() != 2 || ns[1] == 0 {
        return Err(Error::InvalidArgument(format!(
            "InfoNCE needs negatives shaped [P, M] with M >= 1, got {:?}",
            ns
        )));
    }
    if ps != [ns[0]] {
        return Err(Error::Shape {
            op: "infonce_lower_bound",
            detail: format!("positives {:?} vs negatives {:?}", ps, ns),
        });
    }
    check_scores(tape, positive, "positive")?;
    check_scores(tape, negatives, "negative")?;
    let (p, m) = (ns[0], ns[1]);
    let col = tape.reshape(positive, [p, 1])?;
    let all = tape.concat(&[col, negatives], 1)?;
    let lse = tape.logsumexp_last(all)?;
    let diff = tape.sub(positive, lse)?;
    let avg = tape.mean(diff)?;
    let value = tape.add_scalar(avg, F::lit(((m + 1) as f64).ln()));
    let raw = tape.item(value).expect("scalar").as_f64();
    Ok(Bound {
        value,
        estimate: MiEstimate::from_raw(EstimatorKind::InfoNce, raw),
    })
}

/// Pairs `(X, Z)` with `Z = rho X + sqrt(1 - rho^2) eps`, independently per dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPairSpec {
    pub dim: usize,
    pub rho: f64,
    pub seed: u64,
}

impl GaussianPairSpec {
    pub fn new(dim: usize, rho: f64, seed: u64) -> Result<Self> {
        let spec = Self { dim, rho, seed };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "correlation must satisfy |rho| < 1, got {}",
                self.rho
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// `-(dim / 2) ln(1 - rho^2)` nats.
pub fn analytic_gaussian_mi(spec: &GaussianPairSpec) -> Result<f64> {
    spec.validate()?;
    Ok(-(spec.dim as f64) / 2.0 * (1.0 - spec.rho * spec.rho).ln())
}

/// Stateful sampler; successive batches are fresh draws from the same stream.
pub struct GaussianSampler {
    spec: GaussianPairSpec,
    rng: ChaCha8Rng,
}

impl GaussianSampler {
    pub fn new(spec: GaussianPairSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    pub fn next_batch<F: Real>(&mut self, batch: usize) -> Result<(Tensor<F>, Tensor<F>)> {
        if batch < 2 {
            return Err(Error::InvalidArgument(format!("batch must be >= 2, got {}", batch)));
        }
        let d = self.spec.dim;
        let x: Tensor<f64> = Tensor::randn([batch, d], &mut self.rng);
        let noise: Tensor<f64> = Tensor::randn([batch, d], &mut self.rng);
        let rho = self.spec.rho;
        let s = (1.0 - rho * rho).sqrt();
        let z: Vec<f64> = x
            .data()
            .iter()
            .zip(noise.data())
            .map(|(&a, &e)| rho * a + s * e)
            .collect();
        Ok((x.cast(), Tensor::<f64>::new([batch, d], z)?.cast()))
    }
}

/// One seeded batch; identical across calls for the same spec.
pub fn sample_gaussian_pair<F: Real>(spec: &GaussianPairSpec, batch: usize) -> Result<(Tensor<F>, Tensor<F>)> {
    GaussianSampler::new(*spec)?.next_batch(batch)
}

/// Training budget and critic shape for [`estimate_mi_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub kind: EstimatorKind,
    pub width: usize,
    pub steps: usize,
    /// Negatives per positive, taken as in-batch row shifts `1..=M`.
    pub negatives: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl SyntheticConfig {
    pub fn new(kind: EstimatorKind, negatives: usize, steps: usize) -> Self {
        Self {
            kind,
            width: 64,
            steps,
            negatives,
            batch: (negatives + 1).max(128),
            lr: 0.02,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub raw: f64,
    pub centered: f64,
}

#[derive(Clone, Debug)]
pub struct MiTrace {
    pub rows: Vec<TraceRow>,
    /// Average over the final 10% of steps.
    pub estimate: MiEstimate,
    pub analytic: f64,
}

/// Concatenation critic `[x, z] -> W -> W -> 1` with ReLU hidden layers.
struct MlpCritic {
    store: ParamStore<f32>,
    layers: [Linear; 3],
}

impl MlpCritic {
    fn new(dim: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new("critic");
        let layers = [
            Linear::new(&mut store, "fc1", 2 * dim, width, true, rng),
            Linear::new(&mut store, "fc2", width, width, true, rng),
            Linear::new(&mut store, "fc3", width, 1, true, rng),
        ];
        Self { store, layers }
    }

    fn scores(&self, tape: &mut Tape<f32>, pairs: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, &self.store, pairs)?;
        let h = tape.relu(h);
        let h = self.layers[1].forward(tape, &self.store, h)?;
        let h = tape.relu(h);
        self.layers[2].forward(tape, &self.store, h)
    }
}

/// Rows ordered sample-major: for each `i`, `[x_i, z_i]` then `[x_i, z_{i+s}]` for `s = 1..=M`.
fn pair_rows(x: &Tensor<f32>, z: &Tensor<f32>, negatives: usize) -> Result<Tensor<f32>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(n * (negatives + 1) * 2 * d);
    for i in 0..n {
        for s in 0..=negatives {
            let j = (i + s) % n;
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
            data.extend_from_slice(&z.data()[j * d..(j + 1) * d]);
        }
    }
    Tensor::new([n * (negatives + 1), 2 * d], data)
}

/// Trains a fresh critic by ascending the chosen bound on fresh Gaussian
/// batches; negatives pair `x_i` with `z_{(i+s) mod N}`.
pub fn estimate_mi_synthetic(spec: &GaussianPairSpec, cfg: &SyntheticConfig) -> Result<MiTrace> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    if cfg.negatives == 0 || cfg.negatives >= cfg.batch {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= negatives < batch, got M={} with batch {}",
            cfg.negatives, cfg.batch
        )));
    }
    let analytic = analytic_gaussian_mi(spec)?;
    let mut sampler = GaussianSampler::new(*spec)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    init_rng.set_stream(1);
    let mut critic = MlpCritic::new(spec.dim, cfg.width, &mut init_rng);
    let opt = Sgd::new(cfg.lr, cfg.momentum, 0.0);
    let m = cfg.negatives;
    let n = cfg.batch;

    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, z) = sampler.next_batch::<f32>(n)?;
        let mut tape = Tape::new();
        let pairs = tape.constant(pair_rows(&x, &z, m)?);
        let scores = critic.scores(&mut tape, pairs)?;
        let grid = tape.reshape(scores, [n, m + 1])?;
        let pos_idx = vec![0; n];
        let neg_idx: Vec<usize> = (0..n).flat_map(|_| 1..=m).collect();
        let pos = tape.gather_cols(grid, pos_idx, 1)?;
        let pos = tape.reshape(pos, [n])?;
        let neg = tape.gather_cols(grid, neg_idx, m)?;
        let bound = match cfg.kind {
            EstimatorKind::Jsd => jsd_lower_bound(
                &mut tape,
                &ScoreSet {
                    positive: pos,
                    negative: neg,
                },
            ),
            EstimatorKind::InfoNce => infonce_lower_bound(&mut tape, pos, neg),
        }
        .map_err(|e| match e {
            Error::InvalidArgument(_) => Error::NonFinite {
                step,
                value: f64::NAN,
            },
            other => other,
        })?;
        if !bound.estimate.raw.is_finite() {
            return Err(Error::NonFinite {
                step,
                value: bound.estimate.raw,
            });
        }
        rows.push(TraceRow {
            step,
            raw: bound.estimate.raw,
            centered: bound.estimate.centered,
        });
        let loss = tape.neg(bound.value);
        tape.backward(loss)?;
        critic.store.collect_grads(&tape);
        opt.step(&mut [&mut critic.store])?;
    }

    let tail = cfg.steps.div_ceil(10);
    let raw = rows[rows.len() - tail..].iter().map(|r| r.raw).sum::<f64>() / tail as f64;
    Ok(MiTrace {
        rows,
        estimate: MiEstimate::from_raw(cfg.kind, raw),
        analytic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pos: &[f64], neg: &[f64], m: usize) -> (Tape<f64>, Var, Var) {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_f64([pos.len()], pos).unwrap());
        let n = tape.leaf(Tensor::from_f64([pos.len(), m], neg).unwrap());
        (tape, p, n)
    }

    #[test]
    fn jsd_zero_critic() {
        let (mut tape, p, n) = scores(&[0.0; 4], &[0.0; 8], 2);
        let b = jsd_lower_bound(&mut tape, &ScoreSet { positive: p, negative: n }).unwrap();
        assert!((b.estimate.raw + 2.0 * LN_2).abs() < 1e-12);
        assert!(b.estimate.centered.abs() < 1e-12);
    }

    #[test]
    fn jsd_hand_values() {
        let (mut tape, p, n) = scores(&[2.0], &[-2.0], 1);
        let b = jsd_lower_bound(&mut tape, &ScoreSet { positive: p, negative: n }).unwrap();
        // -softplus(-2) - softplus(-2)
        let sp = (1.0f64 + (-2.0f64).exp()).ln();
        assert!((b.estimate.raw + 2.0 * sp).abs() < 1e-12);
        assert!((b.estimate.raw + 0.253856).abs() < 1e-6);

        let (mut tape, p, n) = scores(&[50.0], &[-50.0], 1);
        let b = jsd_lower_bound(&mut tape, &ScoreSet { positive: p, negative: n }).unwrap();
        assert!(b.estimate.raw.abs() < 1e-12);
    }

    #[test]
    fn jsd_rejects_empty() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::zeros([0]));
        let n = tape.leaf(Tensor::zeros([1, 1]));
        assert!(jsd_lower_bound(&mut tape, &ScoreSet { positive: p, negative: n }).is_err());
        assert!(jsd_lower_bound(&mut tape, &ScoreSet { positive: n, negative: p }).is_err());
    }

    #[test]
    fn infonce_values() {
        let (mut tape, p, n) = scores(&[3.0, 3.0], &[3.0; 6], 3);
        let b = infonce_lower_bound(&mut tape, p, n).unwrap();
        assert!(b.estimate.raw.abs() < 1e-12);

        let (mut tape, p, n) = scores(&[10.0], &[-10.0; 3], 3);
        let b = infonce_lower_bound(&mut tape, p, n).unwrap();
        assert!((b.estimate.raw - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn infonce_rejects_empty_negatives() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::zeros([2]));
        let n = tape.leaf(Tensor::zeros([2, 0]));
        assert!(infonce_lower_bound(&mut tape, p, n).is_err());
    }

    #[test]
    fn analytic_values() {
        let mi = |d, r| analytic_gaussian_mi(&GaussianPairSpec { dim: d, rho: r, seed: 0 }).unwrap();
        assert_eq!(mi(5, 0.0), 0.0);
        assert!((mi(1, 0.9) - 0.830366).abs() < 1e-6);
        assert!((mi(8, 0.5) - 1.150728).abs() < 1e-6);
        assert!(GaussianPairSpec::new(1, 1.0, 0).is_err());
        assert!(analytic_gaussian_mi(&GaussianPairSpec { dim: 1, rho: -1.5, seed: 0 }).is_err());
    }

    fn corr(x: &Tensor<f64>, z: &Tensor<f64>) -> f64 {
        let n = x.numel() as f64;
        let (mx, mz) = (x.data().iter().sum::<f64>() / n, z.data().iter().sum::<f64>() / n);
        let mut sxz = 0.0;
        let mut sxx = 0.0;
        let mut szz = 0.0;
        for (&a, &b) in x.data().iter().zip(z.data()) {
            sxz += (a - mx) * (b - mz);
            sxx += (a - mx) * (a - mx);
            szz += (b - mz) * (b - mz);
        }
        sxz / (sxx * szz).sqrt()
    }

    #[test]
    fn sampler_statistics_and_determinism() {
        let spec = GaussianPairSpec::new(1, 1.0 - 1e-9, 3).unwrap();
        let (x, z) = sample_gaussian_pair::<f64>(&spec, 512).unwrap();
        assert!(corr(&x, &z) > 0.9999);

        let spec = GaussianPairSpec::new(1, 0.0, 4).unwrap();
        let (x, z) = sample_gaussian_pair::<f64>(&spec, 1024).unwrap();
        assert!(corr(&x, &z).abs() < 0.1);

        let again = sample_gaussian_pair::<f64>(&spec, 1024).unwrap();
        assert_eq!(again.0, x);
        assert_eq!(again.1, z);
        assert!(sample_gaussian_pair::<f64>(&spec, 1).is_err());
    }

    #[test]
    fn synthetic_rejects_bad_budget() {
        let spec = GaussianPairSpec::new(1, 0.5, 0).unwrap();
        let cfg = SyntheticConfig::new(EstimatorKind::Jsd, 1, 0);
        assert!(estimate_mi_synthetic(&spec, &cfg).is_err());
    }

    #[test]
    fn synthetic_divergence_names_the_step() {
        let spec = GaussianPairSpec::new(1, 0.9, 0).unwrap();
        let mut cfg = SyntheticConfig::new(EstimatorKind::Jsd, 1, 200);
        cfg.lr = 1e6;
        match estimate_mi_synthetic(&spec, &cfg) {
            Err(Error::NonFinite { step, .. }) => assert!(step < 200),
            other => panic!("expected divergence, got {:?}", other.map(|t| t.estimate)),
        }
    }
}
