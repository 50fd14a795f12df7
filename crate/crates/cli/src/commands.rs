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

//! One function per subcommand. Each writes into its `--out` directory and
//! returns what it printed on stdout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use mimkd::checkpoint::Checkpoint;
use mimkd::data::Dataset;
use mimkd::mi::{estimate_mi_synthetic, EstimatorKind, GaussianPairSpec, SyntheticConfig};
use mimkd::objectives::LossWeights;
use mimkd::trainer::{self, Mode, RunRecord};

use crate::config::RunConfig;
use crate::metrics::{self, AblationRow};
use crate::CliError;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const ABLATION_CSV: &str = "ablation.csv";

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("cannot create {}: {}", out.display(), e)))?;
    fs::write(out.join(RESOLVED_CONFIG), cfg.resolved())?;
    Ok(())
}

fn finish(out: &Path, cfg: &RunConfig, record: &mut RunRecord, trained: &trainer::Trained, ckpt: &str) -> Result<(), CliError> {
    trainer::save_trained(record, trained, &out.join(ckpt)).map_err(CliError::runtime)?;
    metrics::write_metrics_file(&out.join(METRICS_CSV), &cfg.run_id(), record)
}

/// Trains the teacher; the config's `run.mode` is ignored.
pub fn train_teacher(config: &Path, out: &Path) -> Result<RunRecord, CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.train.mode = Mode::Teacher;
    let data = cfg.data.load()?;
    train_teacher_with(&cfg, &data, out)
}

pub fn train_teacher_with(cfg: &RunConfig, data: &(Dataset, Dataset), out: &Path) -> Result<RunRecord, CliError> {
    prepare_out(out, cfg)?;
    let (mut record, trained) = trainer::train_teacher(&cfg.train, &data.0, &data.1)?;
    finish(out, cfg, &mut record, &trained, TEACHER_CKPT)?;
    Ok(record)
}

pub fn load_teacher(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::config(format!("teacher checkpoint {}: {}", path.display(), e)))
}

/// `mode` overrides `run.mode` from the config.
pub fn distill(config: &Path, teacher: &Path, mode: Option<Mode>, out: &Path) -> Result<RunRecord, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    if cfg.train.mode == Mode::Teacher {
        return Err(CliError::config("distill needs --mode mimkd, kd or ce"));
    }
    let teacher = load_teacher(teacher)?;
    let data = cfg.data.load()?;
    distill_with(&cfg, &teacher, &data, out)
}

pub fn distill_with(cfg: &RunConfig, teacher: &Checkpoint, data: &(Dataset, Dataset), out: &Path) -> Result<RunRecord, CliError> {
    prepare_out(out, cfg)?;
    let (mut record, trained) = trainer::distill(&cfg.train, teacher, &data.0, &data.1)?;
    finish(out, cfg, &mut record, &trained, STUDENT_CKPT)?;
    Ok(record)
}

#[derive(Clone, Debug)]
pub struct EstimateArgs {
    pub estimator: EstimatorKind,
    pub rho: f64,
    pub dim: usize,
    pub negatives: usize,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Returns `(centered estimate, analytic MI)`.
pub fn estimate_mi(args: &EstimateArgs) -> Result<(f64, f64), CliError> {
    let spec = GaussianPairSpec::new(args.dim, args.rho, args.seed).map_err(CliError::config)?;
    if args.negatives == 0 || args.steps == 0 {
        return Err(CliError::config("--negatives and --steps must be >= 1"));
    }
    let cfg = SyntheticConfig::new(args.estimator, args.negatives, args.steps);
    let trace = estimate_mi_synthetic(&spec, &cfg).map_err(CliError::runtime)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    metrics::write_mi_trace(
        fs::File::create(&args.out)?,
        args.estimator,
        args.dim,
        args.rho,
        args.negatives,
        &trace,
    )?;
    Ok((trace.estimate.centered, trace.analytic))
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::config(format!("--grid: cannot parse `{}`", v.trim())))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(CliError::config(format!("--grid values must be finite and >= 0, got `{}`", text)));
    }
    Ok(values)
}

#[derive(Clone, Debug)]
pub struct AblateArgs {
    pub config: PathBuf,
    pub grid: Vec<f64>,
    pub out: PathBuf,
    /// Trained into `<out>/teacher` when absent.
    pub teacher: Option<PathBuf>,
    pub jobs: usize,
    /// Binary to spawn for `jobs > 1`.
    pub exe: Option<PathBuf>,
}

fn grid_point_config(base: &RunConfig, g: f64, l: f64, f: f64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.train.mode = Mode::Mimkd;
    cfg.train.weights = LossWeights {
        alpha: 1.0,
        lambda_g: g,
        lambda_l: l,
        lambda_f: f,
    };
    cfg.run_id = Some(format!("ablate-g{}-l{}-f{}", g, l, f));
    cfg
}

fn parse_student_acc(stdout: &str) -> Option<f64> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("student_acc="))
        .and_then(|v| v.trim().parse().ok())
}

/// Full `(lambda_g, lambda_l, lambda_f)` grid with `alpha = 1`; failed points
/// are recorded with a blank accuracy and the grid continues.
pub fn ablate(args: &AblateArgs) -> Result<Vec<AblationRow>, CliError> {
    let base = RunConfig::load(&args.config)?;
    if args.jobs == 0 {
        return Err(CliError::config("--jobs must be >= 1"));
    }
    fs::create_dir_all(&args.out)?;
    let data = base.data.load()?;
    let teacher_path = match &args.teacher {
        Some(p) => p.clone(),
        None => {
            let dir = args.out.join("teacher");
            let mut tcfg = base.clone();
            tcfg.train.mode = Mode::Teacher;
            tcfg.run_id = None;
            train_teacher_with(&tcfg, &data, &dir)?;
            dir.join(TEACHER_CKPT)
        }
    };
    let teacher = load_teacher(&teacher_path)?;
    let mut points = Vec::new();
    for &g in &args.grid {
        for &l in &args.grid {
            for &f in &args.grid {
                points.push((g, l, f, args.out.join(format!("g{}_l{}_f{}", g, l, f))));
            }
        }
    }
    let mut rows: Vec<AblationRow> = points
        .iter()
        .map(|&(g, l, f, _)| AblationRow {
            lambda_g: g,
            lambda_l: l,
            lambda_f: f,
            final_acc: None,
            status: String::new(),
        })
        .collect();
    let record = |row: &mut AblationRow, res: Result<f64, String>| match res {
        Ok(acc) => {
            row.final_acc = Some(acc);
            row.status = "ok".into();
        }
        Err(e) => {
            log::warn!("grid point ({}, {}, {}) failed: {}", row.lambda_g, row.lambda_l, row.lambda_f, e);
            row.status = format!("error: {}", e.replace(['\n', '\r'], " "));
        }
    };
    match (&args.exe, args.jobs) {
        (Some(exe), jobs) if jobs > 1 => {
            let mut running: Vec<(usize, Child)> = Vec::new();
            let wait = |(i, child): (usize, Child)| -> (usize, Result<f64, String>) {
                let res = child.wait_with_output().map_err(|e| e.to_string()).and_then(|o| {
                    let stdout = String::from_utf8_lossy(&o.stdout);
                    match (o.status.success(), parse_student_acc(&stdout)) {
                        (true, Some(acc)) => Ok(acc),
                        _ => Err(format!(
                            "exit {:?}: {}",
                            o.status.code(),
                            String::from_utf8_lossy(&o.stderr).lines().last().unwrap_or("")
                        )),
                    }
                });
                (i, res)
            };
            for (i, (g, l, f, dir)) in points.iter().enumerate() {
                if running.len() == jobs {
                    let (j, res) = wait(running.remove(0));
                    record(&mut rows[j], res);
                }
                let cfg = grid_point_config(&base, *g, *l, *f);
                fs::create_dir_all(dir)?;
                let cfg_path = dir.join("grid_point.cfg");
                fs::write(&cfg_path, cfg.resolved())?;
                let child = Command::new(exe)
                    .arg("distill")
                    .arg("--config")
                    .arg(&cfg_path)
                    .arg("--teacher")
                    .arg(&teacher_path)
                    .arg("--out")
                    .arg(dir)
                    .stdout(Stdio::piped())
                    .stderr(Stdio::piped())
                    .spawn();
                match child {
                    Ok(c) => running.push((i, c)),
                    Err(e) => record(&mut rows[i], Err(e.to_string())),
                }
            }
            for c in running {
                let (j, res) = wait(c);
                record(&mut rows[j], res);
            }
        }
        _ => {
            for (i, (g, l, f, dir)) in points.iter().enumerate() {
                let cfg = grid_point_config(&base, *g, *l, *f);
                let res = distill_with(&cfg, &teacher, &data, dir)
                    .map(|r| r.final_acc)
                    .map_err(|e| e.message);
                record(&mut rows[i], res);
            }
        }
    }
    metrics::write_ablation(fs::File::create(args.out.join(ABLATION_CSV))?, &rows)?;
    Ok(rows)
}

/// Metrics files under each path: the path itself if it is a file, else
/// `<dir>/metrics.csv`, else `metrics.csv` in its immediate subdirectories.
pub fn find_metrics(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut found = Vec::new();
    for p in paths {
        if p.is_file() {
            found.push(p.clone());
            continue;
        }
        let direct = p.join(METRICS_CSV);
        if direct.is_file() {
            found.push(direct);
            continue;
        }
        if let Ok(entries) = fs::read_dir(p) {
            let mut subs: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path().join(METRICS_CSV)))
                .filter(|m| m.is_file())
                .collect();
            subs.sort();
            found.extend(subs);
        }
    }
    if found.is_empty() {
        return Err(CliError::config("no runs found"));
    }
    Ok(found)
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<Vec<metrics::RunSummary>, CliError> {
    let files = find_metrics(runs)?;
    let summaries = files
        .iter()
        .map(|f| metrics::read_run_summary(f))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(out)?;
    metrics::write_summary(&mut file, &summaries)?;
    file.flush()?;
    Ok(summaries)
}
