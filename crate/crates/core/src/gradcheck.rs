//! Central finite-difference check of the analytic objective gradient.

use alloc::format;

use crate::error::{Error, Result};
use crate::losses::ClassWeights;
use crate::matrix::Matrix;
use crate::network::{MlpClassifier, StudentTeacherModel};
use crate::rng::Rng;
use crate::objective::{self, Batch, LossPlan, Term};

/// Largest network the check accepts; each parameter costs two objective
/// evaluations.
pub const MAX_PARAMS: usize = 500;
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index of the worst disagreement.
    pub worst_param: usize,
    pub num_params: usize,
}

/// Compares the analytic student gradient of `term` with central differences
/// of step `step`. Returns the max of `|g_a − g_n| / max(1e-8, |g_a| + |g_n|)`.
///
/// Teacher outputs and consistency weights are frozen at the unperturbed
/// parameters, matching how they are treated in training.
pub fn grad_check(
    model: &StudentTeacherModel,
    batch: &Batch,
    plan: &LossPlan,
    class_weights: &ClassWeights,
    term: Term,
    step: f64,
) -> Result<GradCheckReport> {
    let student = &model.student;
    let n = student.num_params();
    if n > MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradient check needs <= {MAX_PARAMS} parameters, network has {n}"
        )));
    }
    let frozen = objective::freeze(student, &model.teacher, batch, plan)?;
    let (_, analytic) = objective::value_and_grad(student, batch, &frozen, plan, class_weights, term)?;
    let analytic = analytic.to_vec();

    let base = student.param_vec();
    let mut probe = student.clone();
    let mut params = base.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        num_params: n,
    };
    for i in 0..n {
        if !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of parameter {i}")));
        }
        params[i] = base[i] + step;
        probe.set_params(&params)?;
        let up = term.value(&objective::evaluate(&probe, batch, &frozen, plan, class_weights)?);
        params[i] = base[i] - step;
        probe.set_params(&params)?;
        let down = term.value(&objective::evaluate(&probe, batch, &frozen, plan, class_weights)?);
        params[i] = base[i];

        let numeric = (up - down) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("numeric gradient of parameter {i}")));
        }
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = i;
        }
    }
    Ok(report)
}

/// A seeded random problem for [`grad_check`]: independent student and
/// teacher of the given layer sizes, and a batch of `2C` known rows with
/// random labels, four source-unknown rows and eight target rows.
///
/// Every parameter, biases included, gets `N(0, 0.1²)` jitter on top of the
/// usual initialization, so no pre-activation is exactly zero.
pub fn random_case(seed: u64, sizes: &[usize]) -> Result<(StudentTeacherModel, Batch)> {
    let mut rng = Rng::fork(seed, 0);
    let net = |rng: &mut Rng| -> Result<MlpClassifier> {
        let mut net = MlpClassifier::new(sizes, rng)?;
        let jittered: alloc::vec::Vec<f64> = net.param_vec().iter().map(|p| p + 0.1 * rng.normal()).collect();
        net.set_params(&jittered)?;
        Ok(net)
    };
    let student = net(&mut rng)?;
    let teacher = net(&mut rng)?;
    let model = StudentTeacherModel::from_parts(student, teacher, 0.99)?;
    let (d, c) = (sizes[0], sizes[sizes.len() - 1]);
    let mut rows = |r: usize| Matrix::from_vec(r, d, (0..r * d).map(|_| 2.0 * rng.normal()).collect());
    let known_x = rows(2 * c)?;
    let unknown_x = rows(4)?;
    let target_student_x = rows(8)?;
    let target_teacher_x = rows(8)?;
    let known_y = (0..2 * c).map(|_| rng.below(c)).collect();
    Ok((
        model,
        Batch {
            known_x,
            known_y,
            unknown_x,
            target_student_x,
            target_teacher_x,
        },
    ))
}
