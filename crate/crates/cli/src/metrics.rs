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

//! CSV schemas. Floats use Rust's shortest round-trip formatting, absent
//! values are empty cells, and every file has exactly one header row.

use std::io::Write;
use std::path::Path;

use mimkd::mi::{EstimatorKind, MiTrace};
use mimkd::trainer::{RunRecord, StepLosses};

use crate::CliError;

pub const METRICS_HEADER: [&str; 13] = [
    "run",
    "mode",
    "phase",
    "epoch",
    "step",
    "lr",
    "loss_total",
    "loss_ce",
    "loss_kl",
    "mi_global",
    "mi_local",
    "mi_feature",
    "test_acc",
];

pub const MI_TRACE_HEADER: [&str; 8] = ["estimator", "dim", "rho", "M", "step", "raw_bound", "centered", "analytic_mi"];

pub const SUMMARY_HEADER: [&str; 4] = ["run", "mode", "student_acc", "delta_vs_ce"];

pub const ABLATION_HEADER: [&str; 5] = ["lambda_g", "lambda_l", "lambda_f", "final_acc", "status"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

/// One `train` row per step followed by one `eval` row per epoch, in time order.
pub fn write_metrics<W: Write>(out: W, run: &str, record: &RunRecord) -> Result<(), CliError> {
    let mut w = writer(out);
    w.write_record(METRICS_HEADER)?;
    let mode = record.mode.to_string();
    let mut steps = record.steps.iter().peekable();
    for e in &record.epochs {
        while let Some(s) = steps.next_if(|s| s.epoch == e.epoch) {
            let (ce, kl, g, l, f) = match s.losses {
                StepLosses::Ce { total } => (Some(total), None, None, None, None),
                StepLosses::Kd(r) => (Some(r.ce), Some(r.kl), None, None, None),
                StepLosses::Mimkd(r) => (Some(r.ce), None, r.global_mi, r.local_mi, r.feature_mi),
            };
            w.write_record([
                run.to_string(),
                mode.clone(),
                "train".into(),
                s.epoch.to_string(),
                s.step.to_string(),
                s.lr.to_string(),
                s.losses.total().to_string(),
                cell(ce),
                cell(kl),
                cell(g),
                cell(l),
                cell(f),
                String::new(),
            ])?;
        }
        w.write_record([
            run.to_string(),
            mode.clone(),
            "eval".into(),
            e.epoch.to_string(),
            String::new(),
            String::new(),
            e.mean_loss.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            e.test_acc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_file(path: &Path, run: &str, record: &RunRecord) -> Result<(), CliError> {
    write_metrics(std::fs::File::create(path)?, run, record)
}

pub fn write_mi_trace<W: Write>(out: W, kind: EstimatorKind, dim: usize, rho: f64, negatives: usize, trace: &MiTrace) -> Result<(), CliError> {
    let mut w = writer(out);
    w.write_record(MI_TRACE_HEADER)?;
    for r in &trace.rows {
        w.write_record([
            kind.to_string(),
            dim.to_string(),
            rho.to_string(),
            negatives.to_string(),
            r.step.to_string(),
            r.raw.to_string(),
            r.centered.to_string(),
            trace.analytic.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub mode: String,
    pub student_acc: f64,
}

/// Last `eval` row of a metrics file.
pub fn read_run_summary(path: &Path) -> Result<RunSummary, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::config(format!("{}: {}", path.display(), e)))?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(METRICS_HEADER) {
        return Err(CliError::config(format!("{}: not a metrics file", path.display())));
    }
    let mut last = None;
    for rec in r.records() {
        let rec = rec?;
        if &rec[2] == "eval" {
            last = Some(rec);
        }
    }
    let rec = last.ok_or_else(|| CliError::config(format!("{}: no eval rows", path.display())))?;
    let student_acc = rec[12]
        .parse()
        .map_err(|_| CliError::config(format!("{}: bad test_acc `{}`", path.display(), &rec[12])))?;
    Ok(RunSummary {
        run: rec[0].to_string(),
        mode: rec[1].to_string(),
        student_acc,
    })
}

/// Rows sorted by run id. `delta_vs_ce` is the accuracy minus the mean of the
/// `ce` runs, blank for `ce`/`teacher` rows or when no `ce` run is present.
pub fn write_summary<W: Write>(out: W, runs: &[RunSummary]) -> Result<(), CliError> {
    let mut sorted = runs.to_vec();
    sorted.sort_by(|a, b| a.run.cmp(&b.run));
    let ce: Vec<f64> = sorted.iter().filter(|r| r.mode == "ce").map(|r| r.student_acc).collect();
    let ce_mean = (!ce.is_empty()).then(|| ce.iter().sum::<f64>() / ce.len() as f64);
    let mut w = writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in &sorted {
        let delta = match (ce_mean, r.mode.as_str()) {
            (Some(m), mode) if mode != "ce" && mode != "teacher" => Some(r.student_acc - m),
            _ => None,
        };
        w.write_record([r.run.clone(), r.mode.clone(), r.student_acc.to_string(), cell(delta)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub lambda_f: f64,
    pub final_acc: Option<f64>,
    pub status: String,
}

pub fn write_ablation<W: Write>(out: W, rows: &[AblationRow]) -> Result<(), CliError> {
    let mut w = writer(out);
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.lambda_g.to_string(),
            r.lambda_l.to_string(),
            r.lambda_f.to_string(),
            cell(r.final_acc),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(run: &str, mode: &str, acc: f64) -> RunSummary {
        RunSummary {
            run: run.into(),
            mode: mode.into(),
            student_acc: acc,
        }
    }

    fn render(runs: &[RunSummary]) -> String {
        let mut buf = Vec::new();
        write_summary(&mut buf, runs).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn summary_delta_and_order() {
        let out = render(&[summary("b-mimkd", "mimkd", 91.5), summary("a-ce", "ce", 89.0)]);
        assert_eq!(out, "run,mode,student_acc,delta_vs_ce\na-ce,ce,89,\nb-mimkd,mimkd,91.5,2.5\n");
        assert_eq!(render(&[summary("x", "mimkd", 50.0)]), "run,mode,student_acc,delta_vs_ce\nx,mimkd,50,\n");
    }

    #[test]
    fn ablation_rows_render_blank_accuracy_on_failure() {
        let mut buf = Vec::new();
        let rows = [AblationRow {
            lambda_g: 0.5,
            lambda_l: 0.0,
            lambda_f: 1.0,
            final_acc: None,
            status: "error: diverged".into(),
        }];
        write_ablation(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "lambda_g,lambda_l,lambda_f,final_acc,status\n0.5,0,1,,error: diverged\n"
        );
    }
}
