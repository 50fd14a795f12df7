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

//! Mutual-information knowledge distillation at desk scale.
//!
//! A small reverse-mode autodiff engine ([`tensor`]), the JSD and InfoNCE
//! mutual-information lower bounds ([`mi`]), the score critics ([`critics`]),
//! the distillation objectives ([`objectives`]), Conv-4 style networks
//! ([`models`]), data ingestion ([`data`]) and the training harness
//! ([`trainer`]).

pub mod checkpoint;
pub mod critics;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mi;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
