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

//! Teacher pretraining, distillation (MI objectives, logit KD, or plain CE),
//! evaluation and the step learning-rate schedule.
//!
//! All randomness derives from `TrainConfig::seed` through separate ChaCha
//! streams (student init, critic init, augmentation, epoch order), so turning
//! an objective off never perturbs the draws seen by the others.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::critics::CriticConfig;
use crate::data::{augment, epoch_order, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::models::{build_convnet, ConvNet, ConvNetSpec, TapSchedule};
use crate::nn::ParamStore;
use crate::objectives::{
    build_pairing_set, kd_baseline_loss, total_loss, CriticDims, Critics, KdReport, LossReport, LossWeights,
    MemoryBank, RepresentationBundle, DEFAULT_BANK_CAPACITY, KD_ALPHA, KD_TEMPERATURE,
};
use crate::optim::Sgd;
use crate::tensor::{Tape, Tensor};

const STREAM_INIT_MODEL: u64 = 1 << 40;
const STREAM_INIT_CRITIC: u64 = (1 << 40) + 1;
const STREAM_AUGMENT: u64 = (1 << 40) + 2;
const EVAL_BATCH: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Teacher,
    Mimkd,
    Kd,
    Ce,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Teacher => "teacher",
            Mode::Mimkd => "mimkd",
            Mode::Kd => "kd",
            Mode::Ce => "ce",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Mode::Teacher),
            "mimkd" => Ok(Mode::Mimkd),
            "kd" => Ok(Mode::Kd),
            "ce" => Ok(Mode::Ce),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{}` (expected teacher, mimkd, kd or ce)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub augment: bool,
    pub weights: LossWeights,
    pub critic: CriticConfig,
    pub bank_capacity: usize,
    pub kd_alpha: f64,
    pub kd_temperature: f64,
    pub teacher: ConvNetSpec,
    pub student: ConvNetSpec,
    pub teacher_taps: TapSchedule,
    pub student_taps: TapSchedule,
}

impl TrainConfig {
    /// Full-length schedule: 240 epochs, decays at 150/180/210.
    pub fn cifar(num_classes: usize) -> Self {
        Self {
            mode: Mode::Mimkd,
            epochs: 240,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epochs: vec![150, 180, 210],
            decay_factor: 0.1,
            seed: 0,
            augment: true,
            weights: LossWeights::default(),
            critic: CriticConfig::default(),
            bank_capacity: DEFAULT_BANK_CAPACITY,
            kd_alpha: KD_ALPHA,
            kd_temperature: KD_TEMPERATURE,
            teacher: ConvNetSpec::teacher(num_classes),
            student: ConvNetSpec::student(num_classes),
            teacher_taps: TapSchedule::default(),
            student_taps: TapSchedule::default(),
        }
    }

    /// The same schedule shape compressed to 30 epochs, with narrower critics
    /// and MI weights at a tenth of the CIFAR ratios (picked on a held-out split).
    pub fn desk(num_classes: usize) -> Self {
        Self {
            epochs: 30,
            decay_epochs: vec![15, 22, 27],
            weights: LossWeights {
                alpha: 1.0,
                lambda_g: 0.1,
                lambda_l: 0.075,
                lambda_f: 0.1,
            },
            critic: CriticConfig {
                hidden: 64,
                ..CriticConfig::default()
            },
            ..Self::cifar(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) || self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return bad(format!(
                "decay_epochs {:?} must be strictly increasing and below epochs ({})",
                self.decay_epochs, self.epochs
            ));
        }
        if !(self.decay_factor > 0.0) {
            return bad("decay_factor must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.kd_alpha) || !(self.kd_temperature > 0.0) {
            return bad("kd_alpha must be in [0, 1] and kd_temperature > 0".into());
        }
        if self.teacher.num_classes != self.student.num_classes {
            return bad(format!(
                "teacher has {} classes, student {}",
                self.teacher.num_classes, self.student.num_classes
            ));
        }
        self.weights.validate()?;
        self.critic.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.teacher_taps.validate()?;
        self.student_taps.validate()
    }
}

/// `lr * decay_factor^(number of decay epochs <= epoch)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr * cfg.decay_factor.powi(passed as i32)
}

/// Loss components of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepLosses {
    Ce { total: f64 },
    Kd(KdReport),
    Mimkd(LossReport),
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        match self {
            StepLosses::Ce { total } => *total,
            StepLosses::Kd(r) => r.total,
            StepLosses::Mimkd(r) => r.total,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub losses: StepLosses,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub mode: Mode,
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    pub final_acc: f64,
    pub best_acc: f64,
    pub wall_secs: f64,
    /// Parameter tensors the optimiser updated each step.
    pub optimized_tensors: usize,
    pub checkpoint: Option<PathBuf>,
}

/// Trained networks and critics, exportable as one checkpoint.
pub struct Trained {
    pub model: ConvNet<f32>,
    pub critics: Option<Critics<f32>>,
}

impl Trained {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.store.export_into(&mut ck);
        if let Some(c) = &self.critics {
            for s in c.stores() {
                s.export_into(&mut ck);
            }
        }
        ck
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Top-1 accuracy in percent with eval-mode BN.
pub fn evaluate(net: &mut ConvNet<f32>, ds: &Dataset, norm: &Normalizer) -> Result<f64> {
    if ds.num_classes() != net.spec().num_classes {
        return Err(Error::Checkpoint(format!(
            "model predicts {} classes, dataset has {}",
            net.spec().num_classes,
            ds.num_classes()
        )));
    }
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    let k = net.spec().num_classes;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let b = ds.batch::<f32>(chunk, norm);
        let out = net.infer(&b.images)?;
        for (row, &label) in out.logits.data().chunks(k).zip(&b.labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0;
            correct += (pred == label) as usize;
        }
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Loads `model.<role>.*` from a checkpoint into a freshly built network.
pub fn load_model(ckpt: &Checkpoint, spec: &ConvNetSpec, taps: &TapSchedule, role: &str) -> Result<ConvNet<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = build_convnet::<f32, _>(spec, taps, role, &mut rng)?;
    net.store.import_from(ckpt)?;
    Ok(net)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, spec: &ConvNetSpec, role: &str, ds: &Dataset, norm: &Normalizer) -> Result<f64> {
    let mut net = load_model(ckpt, spec, &TapSchedule::default(), role)?;
    evaluate(&mut net, ds, norm)
}

fn check_finite(step: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, value: v })
    }
}

struct Distiller {
    teacher: ConvNet<f32>,
    critics: Critics<f32>,
    bank: MemoryBank<f32>,
    pairs: Vec<(usize, usize)>,
}

/// Trains the wide network with cross-entropy.
pub fn train_teacher(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<(RunRecord, Trained)> {
    if cfg.mode != Mode::Teacher {
        return Err(Error::InvalidArgument(format!("train_teacher needs mode teacher, got {}", cfg.mode)));
    }
    run(cfg, None, train, test)
}

/// Trains the narrow network against a frozen teacher loaded from `teacher_ckpt`.
pub fn distill(cfg: &TrainConfig, teacher_ckpt: &Checkpoint, train: &Dataset, test: &Dataset) -> Result<(RunRecord, Trained)> {
    if cfg.mode == Mode::Teacher {
        return Err(Error::InvalidArgument("distill needs mode mimkd, kd or ce".into()));
    }
    run(cfg, Some(teacher_ckpt), train, test)
}

fn run(cfg: &TrainConfig, teacher_ckpt: Option<&Checkpoint>, train: &Dataset, test: &Dataset) -> Result<(RunRecord, Trained)> {
    cfg.validate()?;
    let start = Instant::now();
    let (spec, taps, role) = match cfg.mode {
        Mode::Teacher => (&cfg.teacher, &cfg.teacher_taps, "teacher"),
        _ => (&cfg.student, &cfg.student_taps, "student"),
    };
    if train.num_classes() != spec.num_classes || test.num_classes() != spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "datasets have {}/{} classes, model expects {}",
            train.num_classes(),
            test.num_classes(),
            spec.num_classes
        )));
    }
    let norm = Normalizer::fit(train)?;
    let mut model = build_convnet::<f32, _>(spec, taps, role, &mut rng_stream(cfg.seed, STREAM_INIT_MODEL))?;

    let mut distiller = match (cfg.mode, teacher_ckpt) {
        (Mode::Teacher | Mode::Ce, _) => None,
        (_, None) => return Err(Error::InvalidArgument(format!("mode {} needs a teacher checkpoint", cfg.mode))),
        (mode, Some(ck)) => {
            let teacher = load_model(ck, &cfg.teacher, &cfg.teacher_taps, "teacher")?;
            let t_shapes = teacher.tap_shapes();
            let s_shapes = model.tap_shapes();
            let sizes = |v: &[(usize, usize)]| v.iter().map(|s| s.1).collect::<Vec<_>>();
            let pairs = build_pairing_set(&sizes(&t_shapes), &sizes(&s_shapes))?;
            let weights = if mode == Mode::Mimkd {
                cfg.weights
            } else {
                LossWeights::cross_entropy_only()
            };
            let dims = CriticDims {
                teacher_final: teacher.feature_dim(),
                student_final: model.feature_dim(),
                pairs: pairs.iter().map(|&(t, s)| (t_shapes[t].0, s_shapes[s].0)).collect(),
            };
            let critics = Critics::new(&dims, &weights, &cfg.critic, &mut rng_stream(cfg.seed, STREAM_INIT_CRITIC))?;
            let bank = MemoryBank::new(cfg.bank_capacity, dims.teacher_final);
            Some(Distiller {
                teacher,
                critics,
                bank,
                pairs,
            })
        }
    };

    let mut aug_rng = rng_stream(cfg.seed, STREAM_AUGMENT);
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut best = f64::NEG_INFINITY;
    let mut optimized_tensors = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let opt = Sgd::new(lr, cfg.momentum, cfg.weight_decay);
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let mut batch = train.batch::<f32>(chunk, &norm);
            if cfg.augment {
                batch = augment(&batch, &mut aug_rng);
            }
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(batch.images.clone());
            let out = model.forward_with_taps(&mut tape, x, true)?;
            let (root, losses) = match (&mut distiller, cfg.mode) {
                (Some(d), Mode::Kd) => {
                    let t = d.teacher.infer(&batch.images)?;
                    let (root, r) = kd_baseline_loss(
                        &mut tape,
                        out.logits,
                        &t.logits,
                        &batch.labels,
                        cfg.kd_alpha,
                        cfg.kd_temperature,
                    )?;
                    (root, StepLosses::Kd(r))
                }
                (Some(d), _) => {
                    let t = d.teacher.infer(&batch.images)?;
                    let bundle = RepresentationBundle {
                        teacher_final: tape.constant(t.pooled),
                        student_final: out.pooled,
                        student_logits: out.logits,
                        teacher_logits: tape.constant(t.logits),
                        pairs: d
                            .pairs
                            .iter()
                            .map(|&(ti, si)| (tape.constant(t.maps[ti].clone()), out.maps[si]))
                            .collect(),
                    };
                    let (root, r) = total_loss(&mut tape, &bundle, &cfg.weights, &batch.labels, &d.critics, &mut d.bank)?;
                    (root, StepLosses::Mimkd(r))
                }
                (None, _) => {
                    let root = tape.cross_entropy(out.logits, &batch.labels)?;
                    let total = tape.item(root).expect("scalar") as f64;
                    (root, StepLosses::Ce { total })
                }
            };
            check_finite(step, losses.total())?;
            tape.backward(root)?;
            model.store.collect_grads(&tape);
            let mut stores: Vec<&mut ParamStore<f32>> = vec![&mut model.store];
            if let Some(d) = &mut distiller {
                for s in d.critics.stores_mut() {
                    s.collect_grads(&tape);
                    stores.push(s);
                }
            }
            optimized_tensors = stores.iter().map(|s| s.len()).sum();
            opt.step(&mut stores)?;
            loss_sum += losses.total();
            loss_count += 1;
            steps.push(StepRow {
                epoch,
                step,
                lr,
                losses,
            });
            step += 1;
        }
        let test_acc = evaluate(&mut model, test, &norm)?;
        best = best.max(test_acc);
        let mean_loss = loss_sum / loss_count.max(1) as f64;
        log::info!(
            "{} epoch {}/{} lr {:.2e} loss {:.4} test_acc {:.2}",
            cfg.mode,
            epoch + 1,
            cfg.epochs,
            lr,
            mean_loss,
            test_acc
        );
        epochs.push(EpochRow {
            epoch,
            mean_loss,
            test_acc,
        });
    }
    let final_acc = epochs.last().map_or(0.0, |e| e.test_acc);
    let record = RunRecord {
        mode: cfg.mode,
        steps,
        epochs,
        final_acc,
        best_acc: best,
        wall_secs: start.elapsed().as_secs_f64(),
        optimized_tensors,
        checkpoint: None,
    };
    let trained = Trained {
        model,
        critics: distiller.map(|d| d.critics),
    };
    Ok((record, trained))
}

/// Writes the trained checkpoint and records its path.
pub fn save_trained(record: &mut RunRecord, trained: &Trained, path: &Path) -> Result<()> {
    trained.checkpoint().save(path)?;
    record.checkpoint = Some(path.to_path_buf());
    Ok(())
}

/// Convenience for tests and tools: the teacher logits of a batch.
pub fn teacher_logits(teacher: &mut ConvNet<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(teacher.infer(images)?.logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes_split;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::cifar(100);
        assert_eq!(lr_at(&cfg, 0), 0.05);
        assert!((lr_at(&cfg, 200) - 5e-4).abs() < 1e-15);
        assert!((lr_at(&cfg, 150) - 5e-3).abs() < 1e-15);
        assert!((lr_at(&cfg, 149) - 0.05).abs() < 1e-15);
        let flat = TrainConfig {
            decay_epochs: vec![],
            ..TrainConfig::desk(8)
        };
        assert!((0..30).all(|e| lr_at(&flat, e) == 0.05));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk(8).validate().is_ok());
        assert!(TrainConfig::cifar(100).validate().is_ok());
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::desk(8)
        };
        assert!(zero.validate().is_err());
        let late = TrainConfig {
            decay_epochs: vec![10, 30],
            ..TrainConfig::desk(8)
        };
        assert!(late.validate().is_err());
        let unordered = TrainConfig {
            decay_epochs: vec![20, 10],
            ..TrainConfig::desk(8)
        };
        assert!(unordered.validate().is_err());
    }

    fn tiny(mode: Mode) -> TrainConfig {
        let mut cfg = TrainConfig::desk(4);
        cfg.mode = mode;
        cfg.epochs = 1;
        cfg.decay_epochs = vec![];
        cfg.batch_size = 16;
        cfg.teacher.widths = [4, 4, 8, 8];
        cfg.student.widths = [2, 4, 4, 8];
        cfg.critic.hidden = 8;
        cfg.critic.proj_dim = 8;
        cfg.bank_capacity = 32;
        cfg
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let (_, test) = synth_shapes_split(8, 1, 100, 0).unwrap();
        let spec = ConvNetSpec::student(8);
        let mut net = build_convnet::<f32, _>(&spec, &TapSchedule::default(), "s", &mut rng_stream(0, 1)).unwrap();
        let norm = Normalizer::fit(&test).unwrap();
        let acc = evaluate(&mut net, &test, &norm).unwrap();
        assert!((acc - 12.5).abs() <= 12.5, "acc {}", acc);
        assert_eq!(acc, evaluate(&mut net, &test, &norm).unwrap());
        let (_, other) = synth_shapes_split(4, 1, 5, 0).unwrap();
        assert!(evaluate(&mut net, &other, &norm).is_err());
    }

    #[test]
    fn modes_run_and_report_expected_columns() {
        let (train, test) = synth_shapes_split(4, 12, 4, 1).unwrap();
        let (_, teacher) = train_teacher(&tiny(Mode::Teacher), &train, &test).unwrap();
        let ck = teacher.checkpoint();
        assert!(ck.names().all(|n| n.starts_with("model.teacher.")));

        let cfg = tiny(Mode::Mimkd);
        let (rec, trained) = distill(&cfg, &ck, &train, &test).unwrap();
        for s in &rec.steps {
            let StepLosses::Mimkd(r) = s.losses else { panic!("expected MI losses") };
            assert!(r.global_mi.is_some() && r.local_mi.is_some() && r.feature_mi.is_some());
            assert!((r.total - r.recompose(&cfg.weights)).abs() < 1e-4 * r.total.abs().max(1.0));
        }
        let critics = trained.critics.as_ref().unwrap();
        let expected = trained.model.store.len() + critics.stores().iter().map(|s| s.len()).sum::<usize>();
        assert_eq!(rec.optimized_tensors, expected);
        let student_ck = trained.checkpoint();
        let names: Vec<&str> = student_ck.names().collect();
        assert!(names.iter().any(|n| n.starts_with("critic.global.")));
        assert!(names.iter().any(|n| n.starts_with("critic.local.")));
        assert!(names.iter().any(|n| n.starts_with("critic.feat.k3.")));

        let (rec, _) = distill(&tiny(Mode::Kd), &ck, &train, &test).unwrap();
        assert!(rec.steps.iter().all(|s| matches!(s.losses, StepLosses::Kd(_))));
        let (rec, trained) = distill(&tiny(Mode::Ce), &ck, &train, &test).unwrap();
        assert!(rec.steps.iter().all(|s| matches!(s.losses, StepLosses::Ce { .. })));
        assert_eq!(rec.optimized_tensors, trained.model.store.len());
    }

    #[test]
    fn zero_epochs_is_an_error() {
        let (train, test) = synth_shapes_split(4, 2, 1, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny(Mode::Teacher)
        };
        assert!(train_teacher(&cfg, &train, &test).is_err());
    }
}
