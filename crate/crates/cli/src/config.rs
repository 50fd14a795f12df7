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

//! Run configuration files: `key = value` lines, `#` comments, and optional
//! `[section]` headers that prefix the keys below them with `section.`.
//! Every key must be known; the resolved snapshot lists all of them.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mimkd::critics::LocalStyle;
use mimkd::data::{load_cifar_binary, synth_shapes_split, CifarVariant, Dataset};
use mimkd::models::{BlockStyle, TapSchedule};
use mimkd::trainer::{Mode, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    },
    Cifar {
        variant: CifarVariant,
        train_file: PathBuf,
        test_file: PathBuf,
    },
}

impl DataSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synth { classes, .. } => *classes,
            DataSource::Cifar { variant, .. } => variant.num_classes(),
        }
    }

    /// `(train, test)` splits.
    pub fn load(&self) -> Result<(Dataset, Dataset), CliError> {
        match self {
            DataSource::Synth {
                classes,
                train_per_class,
                test_per_class,
                seed,
            } => synth_shapes_split(*classes, *train_per_class, *test_per_class, *seed).map_err(CliError::config),
            DataSource::Cifar {
                variant,
                train_file,
                test_file,
            } => {
                let load = |p: &Path| {
                    load_cifar_binary(p, *variant).map_err(|e| CliError::config(format!("{}: {}", p.display(), e)))
                };
                Ok((load(train_file)?, load(test_file)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Defaults to `<mode>-s<seed>`.
    pub run_id: Option<String>,
    pub data: DataSource,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            data: DataSource::Synth {
                classes: 8,
                train_per_class: 500,
                test_per_class: 125,
                seed: 0,
            },
            train: TrainConfig::desk(8),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::config(format!("key `{}`: cannot parse `{}`: {}", key, value, e)))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_widths(key: &str, value: &str) -> Result<[usize; 4], CliError> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into()
        .map_err(|v: Vec<usize>| CliError::config(format!("key `{}`: expected 4 widths, got {}", key, v.len())))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "run.id",
    "run.mode",
    "seed",
    "data.source",
    "data.classes",
    "data.train_per_class",
    "data.test_per_class",
    "data.seed",
    "data.train_file",
    "data.test_file",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "train.weight_decay",
    "train.decay_epochs",
    "train.decay_factor",
    "train.augment",
    "loss.alpha",
    "loss.lambda_g",
    "loss.lambda_l",
    "loss.lambda_f",
    "kd.alpha",
    "kd.temperature",
    "critic.hidden",
    "critic.proj_dim",
    "critic.local_style",
    "critic.bank_capacity",
    "teacher.style",
    "teacher.widths",
    "teacher.taps",
    "student.style",
    "student.widths",
    "student.taps",
];

/// Raw `(key, value, line)` entries after section expansion.
fn tokenize(text: &str) -> Result<Vec<(String, String, usize)>, CliError> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`, got `{}`", i + 1, line)))?;
        let k = k.trim();
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{}.{}", section, k)
        };
        out.push((key, v.trim().to_string(), i + 1));
    }
    Ok(out)
}

struct DataKeys {
    source: String,
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
    train_file: Option<PathBuf>,
    test_file: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut data = DataKeys {
            source: "synth".into(),
            classes: 8,
            train_per_class: 500,
            test_per_class: 125,
            seed: 0,
            train_file: None,
            test_file: None,
        };
        let mut seen = std::collections::HashSet::new();
        for (key, value, line) in tokenize(text)? {
            if !seen.insert(key.clone()) {
                return Err(CliError::config(format!("line {}: key `{}` given twice", line, key)));
            }
            cfg.set(&mut data, &key, &value)?;
        }
        cfg.data = match data.source.as_str() {
            "synth" => DataSource::Synth {
                classes: data.classes,
                train_per_class: data.train_per_class,
                test_per_class: data.test_per_class,
                seed: data.seed,
            },
            other => {
                let variant: CifarVariant = parse("data.source", other)?;
                let need = |p: Option<PathBuf>, key: &str| {
                    p.ok_or_else(|| CliError::config(format!("key `{}` is required for data.source = {}", key, other)))
                };
                DataSource::Cifar {
                    variant,
                    train_file: need(data.train_file, "data.train_file")?,
                    test_file: need(data.test_file, "data.test_file")?,
                }
            }
        };
        let nc = cfg.data.num_classes();
        cfg.train.teacher.num_classes = nc;
        cfg.train.student.num_classes = nc;
        cfg.train.validate().map_err(CliError::config)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::parse_str(&text)
    }

    fn set(&mut self, data: &mut DataKeys, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "run.id" => self.run_id = Some(value.to_string()).filter(|v| !v.is_empty()),
            "run.mode" => t.mode = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "data.source" => data.source = value.to_string(),
            "data.classes" => data.classes = parse(key, value)?,
            "data.train_per_class" => data.train_per_class = parse(key, value)?,
            "data.test_per_class" => data.test_per_class = parse(key, value)?,
            "data.seed" => data.seed = parse(key, value)?,
            "data.train_file" => data.train_file = Some(PathBuf::from(value)),
            "data.test_file" => data.test_file = Some(PathBuf::from(value)),
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.decay_epochs" => t.decay_epochs = parse_list(key, value)?,
            "train.decay_factor" => t.decay_factor = parse(key, value)?,
            "train.augment" => t.augment = parse(key, value)?,
            "loss.alpha" => t.weights.alpha = parse(key, value)?,
            "loss.lambda_g" => t.weights.lambda_g = parse(key, value)?,
            "loss.lambda_l" => t.weights.lambda_l = parse(key, value)?,
            "loss.lambda_f" => t.weights.lambda_f = parse(key, value)?,
            "kd.alpha" => t.kd_alpha = parse(key, value)?,
            "kd.temperature" => t.kd_temperature = parse(key, value)?,
            "critic.hidden" => t.critic.hidden = parse(key, value)?,
            "critic.proj_dim" => t.critic.proj_dim = parse(key, value)?,
            "critic.local_style" => t.critic.local_style = parse::<LocalStyle>(key, value)?,
            "critic.bank_capacity" => t.bank_capacity = parse(key, value)?,
            "teacher.style" => t.teacher.style = parse::<BlockStyle>(key, value)?,
            "teacher.widths" => t.teacher.widths = parse_widths(key, value)?,
            "teacher.taps" => t.teacher_taps = TapSchedule { blocks: parse_list(key, value)? },
            "student.style" => t.student.style = parse::<BlockStyle>(key, value)?,
            "student.widths" => t.student.widths = parse_widths(key, value)?,
            "student.taps" => t.student_taps = TapSchedule { blocks: parse_list(key, value)? },
            other => return Err(CliError::config(format!("unknown key `{}`", other))),
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-s{}", self.train.mode, self.train.seed))
    }

    /// Every key with its resolved value; parsing the output reproduces `self`.
    pub fn resolved(&self) -> String {
        let t = &self.train;
        let (source, classes, train_pc, test_pc, data_seed, train_file, test_file) = match &self.data {
            DataSource::Synth {
                classes,
                train_per_class,
                test_per_class,
                seed,
            } => (
                "synth".to_string(),
                classes.to_string(),
                train_per_class.to_string(),
                test_per_class.to_string(),
                seed.to_string(),
                String::new(),
                String::new(),
            ),
            DataSource::Cifar {
                variant,
                train_file,
                test_file,
            } => (
                variant.to_string(),
                variant.num_classes().to_string(),
                "500".into(),
                "125".into(),
                "0".into(),
                train_file.display().to_string(),
                test_file.display().to_string(),
            ),
        };
        let values: Vec<String> = vec![
            self.run_id(),
            t.mode.to_string(),
            t.seed.to_string(),
            source,
            classes,
            train_pc,
            test_pc,
            data_seed,
            train_file,
            test_file,
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
            join(&t.decay_epochs),
            t.decay_factor.to_string(),
            t.augment.to_string(),
            t.weights.alpha.to_string(),
            t.weights.lambda_g.to_string(),
            t.weights.lambda_l.to_string(),
            t.weights.lambda_f.to_string(),
            t.kd_alpha.to_string(),
            t.kd_temperature.to_string(),
            t.critic.hidden.to_string(),
            t.critic.proj_dim.to_string(),
            t.critic.local_style.to_string(),
            t.bank_capacity.to_string(),
            t.teacher.style.to_string(),
            join(&t.teacher.widths),
            join(&t.teacher_taps.blocks),
            t.student.style.to_string(),
            join(&t.student.widths),
            join(&t.student_taps.blocks),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

pub fn mode_arg(s: &str) -> Result<Mode, CliError> {
    s.parse().map_err(CliError::config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let cfg = RunConfig::parse_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let snap = cfg.resolved();
        let mut again = RunConfig::parse_str(&snap).unwrap();
        assert_eq!(again.run_id.take().unwrap(), "mimkd-s0");
        assert_eq!(again, cfg);
        assert_eq!(snap.lines().count(), KEYS.len());
    }

    #[test]
    fn sections_and_comments() {
        let cfg = RunConfig::parse_str("seed = 3 # trailing\n[train]\nepochs = 4\ndecay_epochs = 1,2\n[loss]\nlambda_l=0.5\n").unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.decay_epochs, vec![1, 2]);
        assert_eq!(cfg.train.weights.lambda_l, 0.5);
    }

    #[test]
    fn unknown_or_bad_keys_name_the_key() {
        for (text, key) in [
            ("train.epoch = 3", "train.epoch"),
            ("train.lr = fast", "train.lr"),
            ("[critic]\nwidth = 3", "critic.width"),
            ("teacher.widths = 1,2,3", "teacher.widths"),
            ("seed = 1\nseed = 2", "seed"),
        ] {
            let err = RunConfig::parse_str(text).unwrap_err();
            assert_eq!(err.code, 2);
            assert!(err.message.contains(key), "{} -> {}", text, err.message);
        }
        assert!(RunConfig::parse_str("train.epochs = 0").is_err());
        assert!(RunConfig::parse_str("data.source = cifar100").is_err());
    }

    #[test]
    fn cifar_source_sets_class_count() {
        let cfg = RunConfig::parse_str("data.source = cifar100\ndata.train_file = a\ndata.test_file = b").unwrap();
        assert_eq!(cfg.train.student.num_classes, 100);
        assert_eq!(RunConfig::parse_str(&cfg.resolved()).unwrap().data, cfg.data);
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let desk = RunConfig::load(&dir.join("desk.cfg")).unwrap();
        assert_eq!(desk, RunConfig::default());
        let cifar = RunConfig::load(&dir.join("cifar100.cfg")).unwrap();
        assert_eq!(cifar.train.student.num_classes, 100);
        assert_eq!(cifar.train.epochs, 240);
        assert_eq!(cifar.train.weights, mimkd::objectives::LossWeights::default());
    }
}
