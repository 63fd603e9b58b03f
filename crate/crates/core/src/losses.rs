//! Training objectives.
//!
//! Every loss exists twice: a plain numeric function over already computed
//! quantities, and a `*_on` variant that records the same expression on a
//! [`Tape`] so the trainer can differentiate it.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::frame::ImageTensor;
use crate::model::{gram_on, DescriptorModel, GramTriplet};

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_LAMBDA1: f64 = 10.0;
pub const DEFAULT_LAMBDA2: f64 = 1.0;

/// `max(s_an - s_ap + margin, 0)`.
pub fn triplet_loss(s_ap: f64, s_an: f64, margin: f64) -> f64 {
    (s_an - s_ap + margin).max(0.0)
}

pub fn triplet_on(tape: &mut Tape, s_ap: Var, s_an: Var, margin: f64) -> Var {
    let diff = tape.sub(s_an, s_ap);
    let m = tape.scalar(margin);
    let shifted = tape.add(diff, m);
    tape.hinge(shifted)
}

/// Running mean of per-step squared gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    values: Vec<f64>,
    sample_count: u64,
}

impl ImportanceVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            sample_count: 0,
        }
    }

    pub fn from_values(values: Vec<f64>, sample_count: u64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "importance entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            values,
            sample_count,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Folds one step's squared gradient into the running mean.
    pub fn accumulate(&mut self, step: &[f64]) -> Result<()> {
        if step.len() != self.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "importance step has {} entries, accumulator {}",
                step.len(),
                self.values.len()
            )));
        }
        self.sample_count += 1;
        let k = self.sample_count as f64;
        for (m, &x) in self.values.iter_mut().zip(step) {
            *m += (x - *m) / k;
        }
        Ok(())
    }
}

/// `(d ||f(I)||_2 / d theta)^2` where `f` is the head output before
/// normalization (the normalized descriptor has constant norm).
pub fn mas_importance_step(model: &DescriptorModel, image: &ImageTensor) -> Result<Vec<f64>> {
    let (_, g) = model.loss_gradient(|tape, theta| {
        let vars = model.record(tape, theta, image)?;
        Ok(tape.norm(vars.raw))
    })?;
    Ok(g.into_iter().map(|v| v * v).collect())
}

/// MAS step over several images (their mean squared gradient).
pub fn mas_importance_images(model: &DescriptorModel, images: &[&ImageTensor]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.num_params()];
    for image in images {
        for (a, v) in acc.iter_mut().zip(mas_importance_step(model, image)?) {
            *a += v;
        }
    }
    let n = images.len().max(1) as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// `(d ||G||_F / d theta)^2` for the Gram matrix `G` of a triplet.
pub fn rmas_importance_step(
    model: &DescriptorModel,
    images: [&ImageTensor; 3],
) -> Result<Vec<f64>> {
    let (_, g) = model.loss_gradient(|tape, theta| {
        let mut d = [theta; 3];
        for (slot, image) in d.iter_mut().zip(images) {
            *slot = model.record(tape, theta, image)?.descriptor;
        }
        let gram = gram_on(tape, d);
        Ok(tape.norm(gram))
    })?;
    Ok(g.into_iter().map(|v| v * v).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyVariant {
    Mas,
    Rmas,
}

/// Importance of one variant: the finalized weights from previous
/// environments and the running mean over the current one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTrack {
    pub prior: Option<ImportanceVector>,
    pub running: ImportanceVector,
    /// Environments blended into `prior`.
    pub blended: u32,
}

impl ImportanceTrack {
    pub fn new(len: usize) -> Self {
        Self {
            prior: None,
            running: ImportanceVector::zeros(len),
            blended: 0,
        }
    }

    /// Closes the current environment. With `cumulative`, every finished
    /// environment carries equal weight in the result; otherwise the latest
    /// environment replaces the prior. Returns `false` (and leaves the prior
    /// untouched) when nothing was accumulated.
    pub fn finalize(&mut self, cumulative: bool) -> bool {
        if self.running.sample_count == 0 {
            return false;
        }
        let len = self.running.len();
        let latest = std::mem::replace(&mut self.running, ImportanceVector::zeros(len));
        let merged = match (&self.prior, cumulative) {
            (Some(prior), true) => {
                let w = self.blended as f64;
                let values = prior
                    .values
                    .iter()
                    .zip(&latest.values)
                    .map(|(p, l)| (w * p + l) / (w + 1.0))
                    .collect();
                self.blended += 1;
                ImportanceVector {
                    values,
                    sample_count: prior.sample_count + latest.sample_count,
                }
            }
            _ => {
                self.blended = 1;
                latest
            }
        };
        self.prior = Some(merged);
        true
    }
}

/// Everything carried across environment boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifelongState {
    /// Parameters after the previous environment; `None` in the first one.
    pub teacher: Option<Vec<f64>>,
    pub rmas: ImportanceTrack,
    pub mas: Option<ImportanceTrack>,
    /// 1-based index of the current environment.
    pub env: u32,
    /// Importance samples accumulated in the current environment.
    pub steps: u64,
}

impl LifelongState {
    pub fn new(num_params: usize, track_mas: bool) -> Self {
        Self {
            teacher: None,
            rmas: ImportanceTrack::new(num_params),
            mas: track_mas.then(|| ImportanceTrack::new(num_params)),
            env: 1,
            steps: 0,
        }
    }

    pub fn importance(&self, variant: PenaltyVariant) -> Option<&ImportanceVector> {
        match variant {
            PenaltyVariant::Rmas => self.rmas.prior.as_ref(),
            PenaltyVariant::Mas => self.mas.as_ref().and_then(|m| m.prior.as_ref()),
        }
    }

    /// Finalizes importance, snapshots `params` as the next teacher and
    /// advances to the next environment.
    pub fn finish_environment(&mut self, params: &[f64], cumulative: bool) {
        if !self.rmas.finalize(cumulative) {
            warn!(
                "environment {} finished without completed steps; importance unchanged",
                self.env
            );
        }
        if let Some(mas) = self.mas.as_mut() {
            mas.finalize(cumulative);
        }
        self.teacher = Some(params.to_vec());
        self.env += 1;
        self.steps = 0;
    }
}

/// `sum_i omega_i (theta_i - anchor_i)^2`.
pub fn quadratic_penalty(theta: &[f64], anchor: &[f64], omega: &[f64]) -> Result<f64> {
    if theta.len() != anchor.len() || theta.len() != omega.len() {
        return Err(Error::DimensionMismatch(format!(
            "penalty operands have lengths {}, {}, {}",
            theta.len(),
            anchor.len(),
            omega.len()
        )));
    }
    Ok(theta
        .iter()
        .zip(anchor)
        .zip(omega)
        .map(|((t, a), w)| w * (t - a) * (t - a))
        .sum())
}

/// Penalty against the state's teacher with the selected importance. Zero in
/// the first environment.
pub fn state_penalty(theta: &[f64], state: &LifelongState, variant: PenaltyVariant) -> Result<f64> {
    match (&state.teacher, state.importance(variant)) {
        (Some(teacher), Some(omega)) if state.env >= 2 => {
            quadratic_penalty(theta, teacher, omega.values())
        }
        _ => Ok(0.0),
    }
}

pub fn penalty_on(tape: &mut Tape, theta: Var, anchor: &[f64], omega: &[f64]) -> Var {
    let a = tape.constant(anchor.to_vec());
    let w = tape.constant(omega.to_vec());
    let d = tape.sub(theta, a);
    let sq = tape.square(d);
    let weighted = tape.mul(sq, w);
    tape.sum(weighted)
}

/// `||G_student - G_teacher||_F`.
pub fn rkd_loss(student: &GramTriplet, teacher: &GramTriplet) -> f64 {
    student
        .entries()
        .iter()
        .zip(teacher.entries())
        .map(|(s, t)| (s - t) * (s - t))
        .sum::<f64>()
        .sqrt()
}

pub fn rkd_on(tape: &mut Tape, student_gram: Var, teacher_gram: &[f64]) -> Var {
    let t = tape.constant(teacher_gram.to_vec());
    let d = tape.sub(student_gram, t);
    tape.norm(d)
}

/// Frobenius norm of the stacked descriptor differences.
pub fn kd_loss(student: [&[f64]; 3], teacher: [&[f64]; 3]) -> Result<f64> {
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        if s.len() != t.len() {
            return Err(Error::DimensionMismatch(format!(
                "student descriptor has {} entries, teacher {}",
                s.len(),
                t.len()
            )));
        }
        total += s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total.sqrt())
}

pub fn kd_on(tape: &mut Tape, student: [Var; 3], teacher: [&[f64]; 3]) -> Var {
    let s = tape.concat(&student);
    let t = tape.constant(teacher.concat());
    let d = tape.sub(s, t);
    tape.norm(d)
}

/// `triplet + lambda1 * reg + lambda2 * distill`; in the first environment the
/// regularization and distillation terms do not exist.
pub fn combined_loss(
    triplet: f64,
    reg: f64,
    distill: f64,
    lambda1: f64,
    lambda2: f64,
    env: u32,
) -> f64 {
    if env <= 1 {
        triplet
    } else {
        triplet + lambda1 * reg + lambda2 * distill
    }
}
