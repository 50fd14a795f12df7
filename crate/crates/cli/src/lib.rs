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

//! Command implementations behind the `mimkd` binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
//! arguments, or an incompatible checkpoint.

pub mod commands;
pub mod config;
pub mod metrics;

use std::fmt;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl fmt::Display) -> Self {
        Self {
            code: 2,
            message: msg.to_string(),
        }
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: msg.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<mimkd::Error> for CliError {
    fn from(e: mimkd::Error) -> Self {
        match e {
            mimkd::Error::Checkpoint(_) | mimkd::Error::InvalidArgument(_) | mimkd::Error::NoPairs { .. } => {
                CliError::config(e)
            }
            other => CliError::runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::runtime(e)
    }
}
