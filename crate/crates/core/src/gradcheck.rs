//! Central finite-difference verification of every training loss gradient
//! on a small smooth model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::frame::ImageTensor;
use crate::losses::{kd_on, penalty_on, rkd_on, triplet_on};
use crate::model::{forward_with, gram_on, ConvLayer, DescriptorModel, ModelConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub value: f64,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub params: usize,
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Architecture used by the suite: smooth activations so central
/// differences are well defined everywhere.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        input: [3, 8, 8],
        conv: vec![
            ConvLayer {
                channels: 6,
                kernel: 3,
                stride: 1,
            },
            ConvLayer {
                channels: 8,
                kernel: 3,
                stride: 2,
            },
            ConvLayer {
                channels: 8,
                kernel: 3,
                stride: 2,
            },
        ],
        activation: Activation::Tanh,
        input_offset: 0.5,
        gem_p: 1.0,
        hidden: 16,
        dim: 16,
    }
}

/// Compares the tape gradient of `f` with central differences over every
/// parameter.
pub fn check_case<F>(name: &str, params: &[f64], f: F) -> Result<CaseResult>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let theta = tape.variable(params.to_vec());
    let root = f(&mut tape, theta)?;
    tape.check_finite()?;
    let value = tape.scalar_value(root);
    let analytic = tape.backward(root)?.wrt(&tape, theta);

    let eval = |p: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let theta = tape.constant(p);
        let root = f(&mut tape, theta)?;
        Ok(tape.scalar_value(root))
    };
    let mut worst = (0.0, 0);
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + STEP;
        let up = eval(probe.clone())?;
        probe[i] = params[i] - STEP;
        let down = eval(probe.clone())?;
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * STEP);
        let err = relative_error(analytic[i], numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite {
                layer: format!("{name} coordinate {i}"),
            });
        }
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(CaseResult {
        name: name.to_string(),
        value,
        max_rel_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 <= TOLERANCE,
    })
}

fn random_image(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Result<ImageTensor> {
    let [c, h, w] = shape;
    let data = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    ImageTensor::new(c, h, w, data)
}

fn descriptors(
    model: &DescriptorModel,
    tape: &mut Tape,
    theta: Var,
    images: &[ImageTensor; 3],
) -> Result<[Var; 3]> {
    let mut d = [theta; 3];
    for (slot, image) in d.iter_mut().zip(images) {
        *slot = model.record(tape, theta, image)?.descriptor;
    }
    Ok(d)
}

/// Runs the full suite: triplet, importance inputs, penalty, both
/// distillation losses and their weighted combination.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DescriptorModel::new(check_model_config(), seed)?;
    let theta0 = model.params().to_vec();
    let n = theta0.len();
    let shape = model.config().input;
    let images = [
        random_image(&mut rng, shape)?,
        random_image(&mut rng, shape)?,
        random_image(&mut rng, shape)?,
    ];
    // margin keeps the hinge on its linear side for any similarities
    let margin = 2.5;

    let anchor: Vec<f64> = theta0
        .iter()
        .map(|t| t + 0.05 * rng.random_range(-1.0..1.0))
        .collect();
    let omega: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let teacher: Vec<f64> = theta0
        .iter()
        .map(|t| t + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    let teacher_desc = images
        .iter()
        .map(|im| forward_with(&model, &teacher, im))
        .collect::<Result<Vec<_>>>()?;
    let teacher_refs = [
        teacher_desc[0].as_slice(),
        teacher_desc[1].as_slice(),
        teacher_desc[2].as_slice(),
    ];
    let teacher_gram = {
        let mut tape = Tape::new();
        let t = tape.constant(teacher.clone());
        let d = descriptors(&model, &mut tape, t, &images)?;
        let g = gram_on(&mut tape, d);
        tape.value(g).to_vec()
    };
    let (lambda1, lambda2) = (0.7, 1.3);

    let mut cases = Vec::new();
    cases.push(check_case("triplet", &theta0, |tape, theta| {
        let d = descriptors(&model, tape, theta, &images)?;
        let g = gram_on(tape, d);
        let ap = tape.slice(g, 1, 1);
        let an = tape.slice(g, 2, 1);
        Ok(triplet_on(tape, ap, an, margin))
    })?);
    cases.push(check_case("gram_norm", &theta0, |tape, theta| {
        let d = descriptors(&model, tape, theta, &images)?;
        let g = gram_on(tape, d);
        Ok(tape.norm(g))
    })?);
    cases.push(check_case("output_norm", &theta0, |tape, theta| {
        let raw = model.record(tape, theta, &images[0])?.raw;
        Ok(tape.norm(raw))
    })?);
    cases.push(check_case("penalty", &theta0, |tape, theta| {
        Ok(penalty_on(tape, theta, &anchor, &omega))
    })?);
    cases.push(check_case("rkd", &theta0, |tape, theta| {
        let d = descriptors(&model, tape, theta, &images)?;
        let g = gram_on(tape, d);
        Ok(rkd_on(tape, g, &teacher_gram))
    })?);
    cases.push(check_case("kd", &theta0, |tape, theta| {
        let d = descriptors(&model, tape, theta, &images)?;
        Ok(kd_on(tape, d, teacher_refs))
    })?);
    cases.push(check_case("combined", &theta0, |tape, theta| {
        let d = descriptors(&model, tape, theta, &images)?;
        let g = gram_on(tape, d);
        let ap = tape.slice(g, 1, 1);
        let an = tape.slice(g, 2, 1);
        let trip = triplet_on(tape, ap, an, margin);
        let reg = penalty_on(tape, theta, &anchor, &omega);
        let reg = tape.scale(reg, lambda1);
        let rkd = rkd_on(tape, g, &teacher_gram);
        let rkd = tape.scale(rkd, lambda2);
        let sum = tape.add(trip, reg);
        Ok(tape.add(sum, rkd))
    })?);

    Ok(GradcheckReport {
        params: n,
        step: STEP,
        tolerance: TOLERANCE,
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn detects_wrong_gradient() {
        // value x^2 with a gradient path of 3x: analytic 6x vs numeric 2x
        let r = check_case("wrong", &[1.5], |tape, theta| {
            let sq = tape.square(theta);
            let v = tape.sum(sq);
            let fake = tape.scale(theta, 4.0);
            let fake = tape.sum(fake);
            let frozen = tape.constant(vec![tape.scalar_value(fake)]);
            let frozen = tape.sum(frozen);
            let diff = tape.sub(fake, frozen);
            Ok(tape.add(v, diff))
        })
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn model_is_small() {
        let m = DescriptorModel::new(check_model_config(), 0).unwrap();
        assert!(m.num_params() <= 5000, "{}", m.num_params());
    }
}
