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

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mimkd::mi::EstimatorKind;
use mimkd::trainer::Mode;
use mimkd_cli::commands::{self, AblateArgs, EstimateArgs};
use mimkd_cli::CliError;

#[derive(Parser)]
#[command(name = "mimkd", version, about = "Mutual-information knowledge distillation on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the wide teacher network.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the narrow student against a frozen teacher.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// mimkd, kd or ce; defaults to run.mode from the config.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate MI of a correlated Gaussian pair with a trained critic.
    EstimateMi {
        #[arg(long)]
        estimator: String,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        negatives: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill over the full (lambda_g, lambda_l, lambda_f) grid with alpha = 1.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0,0.5,1")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint; trained into OUT/teacher when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Grid points run concurrently as separate processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize finished runs with accuracy deltas against the ce baseline.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::TrainTeacher { config, out } => {
            let rec = commands::train_teacher(&config, &out)?;
            println!("teacher_acc={}", rec.final_acc);
        }
        Cmd::Distill {
            config,
            teacher,
            mode,
            out,
        } => {
            let mode = mode
                .map(|m| m.parse::<Mode>().map_err(CliError::config))
                .transpose()?;
            let rec = commands::distill(&config, &teacher, mode, &out)?;
            println!("student_acc={}", rec.final_acc);
        }
        Cmd::EstimateMi {
            estimator,
            rho,
            dim,
            negatives,
            steps,
            seed,
            out,
        } => {
            let estimator: EstimatorKind = estimator.parse().map_err(CliError::config)?;
            let (estimate, analytic) = commands::estimate_mi(&EstimateArgs {
                estimator,
                rho,
                dim,
                negatives,
                steps,
                seed,
                out,
            })?;
            println!("estimate={}", estimate);
            println!("analytic_mi={}", analytic);
        }
        Cmd::Ablate {
            config,
            grid,
            out,
            teacher,
            jobs,
        } => {
            let rows = commands::ablate(&AblateArgs {
                config,
                grid: commands::parse_grid(&grid)?,
                out: out.clone(),
                teacher,
                jobs,
                exe: std::env::current_exe().ok(),
            })?;
            let failed = rows.iter().filter(|r| r.final_acc.is_none()).count();
            println!("grid_points={} failed={}", rows.len(), failed);
            println!("ablation_csv={}", out.join(commands::ABLATION_CSV).display());
        }
        Cmd::Report { runs, out } => {
            let rows = commands::report(&runs, &out)?;
            println!("runs={}", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.code)
        }
    }
}
