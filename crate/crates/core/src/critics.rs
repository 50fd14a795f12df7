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

//! Score critics: a 1×1 convolution stack for spatial maps and a
//! project-and-dot network for vectors (plus its per-location variant).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear, ParamStore};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CriticConfig {
    pub hidden: usize,
    pub proj_dim: usize,
    pub local_style: LocalStyle,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            proj_dim: 128,
            local_style: LocalStyle::Convolve,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.proj_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "critic widths must be >= 1, got hidden={} proj_dim={}",
                self.hidden, self.proj_dim
            )));
        }
        Ok(())
    }
}

/// Architecture of the critics scoring spatial maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalStyle {
    Convolve,
    Project2d,
}

impl fmt::Display for LocalStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocalStyle::Convolve => "convolve",
            LocalStyle::Project2d => "project2d",
        })
    }
}

impl FromStr for LocalStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convolve" => Ok(LocalStyle::Convolve),
            "project2d" => Ok(LocalStyle::Project2d),
            other => Err(Error::InvalidArgument(format!(
                "unknown critic style `{}` (expected convolve or project2d)",
                other
            ))),
        }
    }
}

fn spatial_pair<F: Real>(tape: &Tape<F>, teacher: Var, student: Var) -> Result<(usize, usize, usize)> {
    let st = tape.shape(teacher);
    let ss = tape.shape(student);
    if st.len() != 4 || ss.len() != 4 || st[0] != ss[0] || st[2..] != ss[2..] {
        return Err(shape_err(
            "critic",
            format!("teacher map {:?} and student map {:?} must share N, H, W", st, ss),
        ));
    }
    Ok((st[0], st[2], st[3]))
}

fn zero_param<F: Real>(store: &mut ParamStore<F>, id: crate::nn::ParamId) {
    store.param_mut(id).value.data_mut().iter_mut().for_each(|v| *v = F::zero());
}

/// `[teacher, student]` channel concat, then 1×1 conv + ReLU, 1×1 conv + ReLU, 1×1 conv to one channel.
pub struct ConvolveCritic<F> {
    pub store: ParamStore<F>,
    layers: [Conv2d; 3],
    teacher_channels: usize,
    student_channels: usize,
}

impl<F: Real> ConvolveCritic<F> {
    pub fn new<R: Rng + ?Sized>(
        prefix: impl Into<String>,
        teacher_channels: usize,
        student_channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new(prefix);
        let inp = teacher_channels + student_channels;
        let layers = [
            Conv2d::new(&mut store, "conv1", inp, hidden, 1, 1, 0, true, rng),
            Conv2d::new(&mut store, "conv2", hidden, hidden, 1, 1, 0, true, rng),
            Conv2d::new(&mut store, "conv3", hidden, 1, 1, 1, 0, true, rng),
        ];
        Self {
            store,
            layers,
            teacher_channels,
            student_channels,
        }
    }

    /// Zeroes the output layer so every score is 0.
    pub fn zero_output(&mut self) {
        let last = &self.layers[2];
        zero_param(&mut self.store, last.weight);
        if let Some(b) = last.bias {
            zero_param(&mut self.store, b);
        }
    }

    /// One score per location: `[N, 1, m, m]`.
    pub fn scores(&self, tape: &mut Tape<F>, teacher: Var, student: Var) -> Result<Var> {
        spatial_pair(tape, teacher, student)?;
        let (ct, cs) = (tape.shape(teacher)[1], tape.shape(student)[1]);
        if ct != self.teacher_channels || cs != self.student_channels {
            return Err(shape_err(
                "convolve critic",
                format!(
                    "built for {}+{} channels, got {}+{}",
                    self.teacher_channels, self.student_channels, ct, cs
                ),
            ));
        }
        let x = tape.concat(&[teacher, student], 1)?;
        let h = self.layers[0].forward(tape, &self.store, x)?;
        let h = tape.relu(h);
        let h = self.layers[1].forward(tape, &self.store, h)?;
        let h = tape.relu(h);
        self.layers[2].forward(tape, &self.store, h)
    }
}

/// `LN(main(x) + shortcut(x))` with `main = LL, ReLU, LL` and `shortcut = LL, ReLU`.
struct Projection {
    main1: Linear,
    main2: Linear,
    shortcut: Linear,
    norm: LayerNorm,
}

impl Projection {
    fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        side: &str,
        input: usize,
        hidden: usize,
        proj: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            main1: Linear::new(store, &format!("{}.main1", side), input, hidden, true, rng),
            main2: Linear::new(store, &format!("{}.main2", side), hidden, proj, true, rng),
            shortcut: Linear::new(store, &format!("{}.shortcut", side), input, proj, true, rng),
            norm: LayerNorm::new(store, &format!("{}.norm", side), proj),
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.main1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let main = self.main2.forward(tape, store, h)?;
        let s = self.shortcut.forward(tape, store, x)?;
        let s = tape.relu(s);
        let sum = tape.add(main, s)?;
        self.norm.forward(tape, store, sum)
    }
}

/// Untied teacher and student projections to a shared width; score is their dot product.
pub struct ProjectDotCritic<F> {
    pub store: ParamStore<F>,
    teacher: Projection,
    student: Projection,
    proj_dim: usize,
}

impl<F: Real> ProjectDotCritic<F> {
    pub fn new<R: Rng + ?Sized>(
        prefix: impl Into<String>,
        teacher_dim: usize,
        student_dim: usize,
        hidden: usize,
        proj_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new(prefix);
        let teacher = Projection::new(&mut store, "teacher", teacher_dim, hidden, proj_dim, rng);
        let student = Projection::new(&mut store, "student", student_dim, hidden, proj_dim, rng);
        Self {
            store,
            teacher,
            student,
            proj_dim,
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    /// Zeroes both layer-norm gains so every projection, and every score, is 0.
    pub fn zero_output(&mut self) {
        for g in [self.teacher.norm.gamma, self.student.norm.gamma] {
            zero_param(&mut self.store, g);
        }
    }

    /// `[N, d_t] -> [N, proj_dim]`.
    pub fn project_teacher(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        self.teacher.forward(tape, &self.store, x)
    }

    /// `[B, d_s] -> [B, proj_dim]`.
    pub fn project_student(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        self.student.forward(tape, &self.store, x)
    }

    /// Full `[N, B]` score matrix between teacher rows and student rows.
    pub fn scores(&self, tape: &mut Tape<F>, teacher: Var, student: Var) -> Result<Var> {
        let t = self.project_teacher(tape, teacher)?;
        let s = self.project_student(tape, student)?;
        tape.matmul_nt(t, s)
    }
}

/// Row-wise dot products of two `[R, D]` matrices.
pub fn rowwise_dot<F: Real>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    tape.sum_last(p)
}

/// Per-location project-and-dot: both maps projected with 1×1 layers, score
/// is the channel dot product at each location.
pub struct Project2dCritic<F> {
    pub store: ParamStore<F>,
    teacher: Projection,
    student: Projection,
}

impl<F: Real> Project2dCritic<F> {
    pub fn new<R: Rng + ?Sized>(
        prefix: impl Into<String>,
        teacher_channels: usize,
        student_channels: usize,
        hidden: usize,
        proj_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new(prefix);
        let teacher = Projection::new(&mut store, "teacher", teacher_channels, hidden, proj_dim, rng);
        let student = Projection::new(&mut store, "student", student_channels, hidden, proj_dim, rng);
        Self {
            store,
            teacher,
            student,
        }
    }

    pub fn zero_output(&mut self) {
        for g in [self.teacher.norm.gamma, self.student.norm.gamma] {
            zero_param(&mut self.store, g);
        }
    }

    /// `[N, 1, m, m]` scores.
    pub fn scores(&self, tape: &mut Tape<F>, teacher: Var, student: Var) -> Result<Var> {
        let (n, h, w) = spatial_pair(tape, teacher, student)?;
        let t = tape.channels_last(teacher)?;
        let s = tape.channels_last(student)?;
        let t = self.teacher.forward(tape, &self.store, t)?;
        let s = self.student.forward(tape, &self.store, s)?;
        let d = rowwise_dot(tape, t, s)?;
        tape.reshape(d, [n, 1, h, w])
    }
}

/// Critic for a pair of same-sized maps.
pub enum MapCritic<F> {
    Convolve(ConvolveCritic<F>),
    Project2d(Project2dCritic<F>),
}

impl<F: Real> MapCritic<F> {
    pub fn new<R: Rng + ?Sized>(
        prefix: impl Into<String>,
        teacher_channels: usize,
        student_channels: usize,
        cfg: &CriticConfig,
        rng: &mut R,
    ) -> Self {
        match cfg.local_style {
            LocalStyle::Convolve => MapCritic::Convolve(ConvolveCritic::new(
                prefix,
                teacher_channels,
                student_channels,
                cfg.hidden,
                rng,
            )),
            LocalStyle::Project2d => MapCritic::Project2d(Project2dCritic::new(
                prefix,
                teacher_channels,
                student_channels,
                cfg.hidden,
                cfg.proj_dim,
                rng,
            )),
        }
    }

    pub fn scores(&self, tape: &mut Tape<F>, teacher: Var, student: Var) -> Result<Var> {
        match self {
            MapCritic::Convolve(c) => c.scores(tape, teacher, student),
            MapCritic::Project2d(c) => c.scores(tape, teacher, student),
        }
    }

    pub fn zero_output(&mut self) {
        match self {
            MapCritic::Convolve(c) => c.zero_output(),
            MapCritic::Project2d(c) => c.zero_output(),
        }
    }

    pub fn store(&self) -> &ParamStore<F> {
        match self {
            MapCritic::Convolve(c) => &c.store,
            MapCritic::Project2d(c) => &c.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        match self {
            MapCritic::Convolve(c) => &mut c.store,
            MapCritic::Project2d(c) => &mut c.store,
        }
    }
}

/// `[N, d] -> [N, d, m, m]`, every location a copy of the row.
pub fn replicate_spatial<F: Real>(tape: &mut Tape<F>, vec: Var, m: usize) -> Result<Var> {
    tape.replicate_spatial(vec, m)
}
