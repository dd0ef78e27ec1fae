//! The combined training objective on one minibatch and its gradient with
//! respect to the student's parameters.
//!
//! The teacher's predictions and the per-sample consistency weights are
//! computed once per step ([`freeze`]) and enter the gradient as constants.

use alloc::vec::Vec;

use crate::error::Result;
use crate::losses::{self, ClassWeights, LossBreakdown, WeightFormula};
use crate::matrix::Matrix;
use crate::network::{Gradients, MlpClassifier};
use crate::prob::{softmax_backward, softmax_rows};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsistencyMode {
    Off,
    /// Entropy-derived continuous weights from the student prediction.
    Weighted(WeightFormula),
    /// Binary weights: teacher top probability must exceed the threshold.
    Gated { threshold: f64 },
}

/// Which terms are active and how they are scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPlan {
    pub entropy_max: bool,
    pub consistency: ConsistencyMode,
    pub class_balance: bool,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossPlan {
    /// Cross-entropy only.
    pub fn supervised() -> Self {
        Self {
            entropy_max: false,
            consistency: ConsistencyMode::Off,
            class_balance: false,
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }

    pub fn kase(lambda1: f64, lambda2: f64, formula: WeightFormula) -> Self {
        Self {
            entropy_max: true,
            consistency: ConsistencyMode::Weighted(formula),
            class_balance: true,
            lambda1,
            lambda2,
        }
    }

    fn uses_target(&self) -> bool {
        self.consistency != ConsistencyMode::Off || self.class_balance
    }
}

/// One minibatch: labeled known-class source rows, source rows from private
/// classes, and two independently augmented views of the same target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub known_x: Matrix,
    pub known_y: Vec<usize>,
    pub unknown_x: Matrix,
    pub target_student_x: Matrix,
    pub target_teacher_x: Matrix,
}

/// Selects which part of the objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    /// `ce_known − entropy_unknown`
    Source,
    Consistency,
    ClassBalance,
    Total,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Source, Term::Consistency, Term::ClassBalance, Term::Total];

    pub fn value(self, b: &LossBreakdown) -> f64 {
        match self {
            Term::Source => b.source_loss(),
            Term::Consistency => b.consistency,
            Term::ClassBalance => b.class_balance,
            Term::Total => b.total,
        }
    }

    /// Coefficients on (ce, entropy, consistency, class balance).
    fn coefficients(self, plan: &LossPlan) -> [f64; 4] {
        match self {
            Term::Source => [1.0, -1.0, 0.0, 0.0],
            Term::Consistency => [0.0, 0.0, 1.0, 0.0],
            Term::ClassBalance => [0.0, 0.0, 0.0, 1.0],
            Term::Total => [1.0, -1.0, plan.lambda1, plan.lambda2],
        }
    }
}

/// Per-step constants: teacher probabilities on the teacher view and the
/// per-sample consistency weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub teacher_probs: Matrix,
    pub weights: Vec<f64>,
}

pub fn freeze(
    student: &MlpClassifier,
    teacher: &MlpClassifier,
    batch: &Batch,
    plan: &LossPlan,
) -> Result<Frozen> {
    let n = batch.target_student_x.rows();
    match plan.consistency {
        ConsistencyMode::Off => Ok(Frozen {
            teacher_probs: Matrix::zeros(0, 0),
            weights: Vec::new(),
        }),
        ConsistencyMode::Weighted(formula) => {
            let teacher_probs = softmax_rows(&teacher.forward(&batch.target_teacher_x)?);
            let student_probs = softmax_rows(&student.forward(&batch.target_student_x)?);
            Ok(Frozen {
                teacher_probs,
                weights: losses::consistency_weights(&student_probs, formula),
            })
        }
        ConsistencyMode::Gated { threshold } => {
            let teacher_probs = softmax_rows(&teacher.forward(&batch.target_teacher_x)?);
            let weights = losses::confidence_mask(&teacher_probs, threshold);
            debug_assert_eq!(weights.len(), n);
            Ok(Frozen {
                teacher_probs,
                weights,
            })
        }
    }
}

/// Evaluates every active term; no gradient.
pub fn evaluate(
    student: &MlpClassifier,
    batch: &Batch,
    frozen: &Frozen,
    plan: &LossPlan,
    class_weights: &ClassWeights,
) -> Result<LossBreakdown> {
    let known = softmax_rows(&student.forward(&batch.known_x)?);
    let ce = losses::ce_known_loss(&known, &batch.known_y, class_weights)?;
    let ent = if plan.entropy_max {
        losses::entropy_max_loss(&softmax_rows(&student.forward(&batch.unknown_x)?))
    } else {
        0.0
    };
    let (mut cons, mut cb) = (0.0, 0.0);
    if plan.uses_target() {
        let target = softmax_rows(&student.forward(&batch.target_student_x)?);
        if plan.consistency != ConsistencyMode::Off {
            cons = losses::consistency_loss(&target, &frozen.teacher_probs, &frozen.weights)?;
        }
        if plan.class_balance {
            cb = losses::class_balance_batch(&target).0;
        }
    }
    Ok(LossBreakdown::new(ce, ent, cons, cb, plan.lambda1, plan.lambda2))
}

fn backprop_probs(
    net: &MlpClassifier,
    x: &Matrix,
    probs: &Matrix,
    dprobs: &Matrix,
    grads: &mut Gradients,
    cache: &crate::network::ForwardCache,
) -> Result<()> {
    if x.rows() == 0 {
        return Ok(());
    }
    let mut dz = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        softmax_backward(probs.row(i), dprobs.row(i), dz.row_mut(i));
    }
    grads.add_assign(&net.backward(cache, &dz)?);
    Ok(())
}

fn scale(m: &mut Matrix, s: f64) {
    m.map_inplace(|v| v * s);
}

/// All active term values plus the gradient of the selected `term`.
pub fn value_and_grad(
    student: &MlpClassifier,
    batch: &Batch,
    frozen: &Frozen,
    plan: &LossPlan,
    class_weights: &ClassWeights,
    term: Term,
) -> Result<(LossBreakdown, Gradients)> {
    let [k_ce, k_ent, k_cons, k_cb] = term.coefficients(plan);
    let mut grads = Gradients::zeros_like(student);

    let cache = student.forward_cached(&batch.known_x)?;
    let known = softmax_rows(&cache.logits);
    let ce = losses::ce_known_loss(&known, &batch.known_y, class_weights)?;
    if k_ce != 0.0 {
        let mut d = losses::ce_known_grad(&known, &batch.known_y, class_weights)?;
        scale(&mut d, k_ce);
        backprop_probs(student, &batch.known_x, &known, &d, &mut grads, &cache)?;
    }

    let mut ent = 0.0;
    if plan.entropy_max {
        let cache = student.forward_cached(&batch.unknown_x)?;
        let probs = softmax_rows(&cache.logits);
        ent = losses::entropy_max_loss(&probs);
        if k_ent != 0.0 {
            let mut d = losses::entropy_max_grad(&probs);
            scale(&mut d, k_ent);
            backprop_probs(student, &batch.unknown_x, &probs, &d, &mut grads, &cache)?;
        }
    }

    let (mut cons, mut cb) = (0.0, 0.0);
    if plan.uses_target() {
        let x = &batch.target_student_x;
        let cache = student.forward_cached(x)?;
        let probs = softmax_rows(&cache.logits);
        let mut d = Matrix::zeros(probs.rows(), probs.cols());
        let mut any = false;
        if plan.consistency != ConsistencyMode::Off {
            cons = losses::consistency_loss(&probs, &frozen.teacher_probs, &frozen.weights)?;
            if k_cons != 0.0 {
                let mut g = losses::consistency_grad(&probs, &frozen.teacher_probs, &frozen.weights)?;
                scale(&mut g, k_cons);
                add(&mut d, &g);
                any = true;
            }
        }
        if plan.class_balance {
            let (v, mut g) = losses::class_balance_batch(&probs);
            cb = v;
            if k_cb != 0.0 {
                scale(&mut g, k_cb);
                add(&mut d, &g);
                any = true;
            }
        }
        if any {
            backprop_probs(student, x, &probs, &d, &mut grads, &cache)?;
        }
    }

    Ok((
        LossBreakdown::new(ce, ent, cons, cb, plan.lambda1, plan.lambda2),
        grads,
    ))
}

fn add(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
}
