//! Minibatch training for KASE, its two ablations and the baselines, plus the
//! post-hoc fit of the unknown detector.
//!
//! Every method draws the same random numbers in the same order each step
//! (known, unknown and target indices, then student views, then teacher
//! views), so switching a loss term off never shifts the random stream.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{augment_rows, class_ratios, OpenSetDataset};
use crate::error::{Error, Result};
use crate::eval::{known_probs, target_entropy_split};
use crate::losses::{ClassWeights, LossBreakdown, WeightFormula};
use crate::matrix::Matrix;
use crate::network::{sigmoid, Gradients, MlpClassifier, StudentTeacherModel, UnknownDetector};
use crate::objective::{self, Batch, ConsistencyMode, LossPlan, Term};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Kase,
    KaseNoKaa,
    /// Plain self-ensembling with a confidence-gated consistency term.
    KaseNoKar,
    SourceOnly,
    ClosedSetCPlus1,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SourceOnly,
        Method::ClosedSetCPlus1,
        Method::KaseNoKar,
        Method::KaseNoKaa,
        Method::Kase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Kase => "kase",
            Method::KaseNoKaa => "kase_no_kaa",
            Method::KaseNoKar => "kase_no_kar",
            Method::SourceOnly => "source_only",
            Method::ClosedSetCPlus1 => "closed_set_c_plus_1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether inference goes through a fitted [`UnknownDetector`].
    pub fn uses_detector(self) -> bool {
        self != Method::ClosedSetCPlus1
    }

    /// Whether the teacher is an EMA of the student. Single-network methods
    /// copy the student into the teacher after each step.
    pub fn uses_teacher(self) -> bool {
        matches!(self, Method::Kase | Method::KaseNoKaa | Method::KaseNoKar)
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_known: usize,
    pub batch_unknown: usize,
    pub batch_target: usize,
    pub adam: AdamConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ema_decay: f64,
    pub weight_formula: WeightFormula,
    /// Teacher confidence needed to enter the consistency term (plain SE).
    pub conf_threshold: f64,
    pub reweight: bool,
    /// Source-unknown entropy maximization (KASE variants only).
    pub entropy_terms: bool,
    pub hidden: Vec<usize>,
    pub augment_std: f64,
    pub detector_hidden: usize,
    pub detector_epochs: usize,
    pub detector_lr: f64,
    pub detector_batch: usize,
    pub detector_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Kase,
            epochs: 200,
            batch_known: 32,
            batch_unknown: 32,
            batch_target: 64,
            adam: AdamConfig::default(),
            lambda1: 10.0,
            lambda2: 0.1,
            ema_decay: 0.99,
            weight_formula: WeightFormula::Corrected,
            conf_threshold: 0.9,
            reweight: true,
            entropy_terms: true,
            hidden: alloc::vec![32, 32],
            augment_std: 0.1,
            detector_hidden: 16,
            detector_epochs: 100,
            detector_lr: 1e-2,
            detector_batch: 64,
            detector_threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(String::from(msg)));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_known == 0 || self.batch_unknown == 0 || self.batch_target == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) || !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad("lambda1 and lambda2 must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.augment_std.is_nan() || self.augment_std < 0.0 {
            return bad("augment_std must be >= 0");
        }
        if !(self.adam.lr >= 0.0 && self.detector_lr >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if self.hidden.contains(&0) || self.detector_hidden == 0 || self.detector_batch == 0 {
            return bad("layer widths and detector batch must be >= 1");
        }
        Ok(())
    }

    /// The loss terms this configuration trains with. Terms whose
    /// coefficient is zero are switched off, so `lambda1 = 0` gives exactly
    /// the plan of a method without a consistency term.
    pub fn loss_plan(&self) -> LossPlan {
        let mut plan = match self.method {
            Method::SourceOnly | Method::ClosedSetCPlus1 => LossPlan::supervised(),
            Method::Kase => LossPlan::kase(self.lambda1, self.lambda2, self.weight_formula),
            Method::KaseNoKaa => LossPlan {
                consistency: ConsistencyMode::Off,
                ..LossPlan::kase(self.lambda1, self.lambda2, self.weight_formula)
            },
            Method::KaseNoKar => LossPlan {
                entropy_max: false,
                consistency: ConsistencyMode::Gated {
                    threshold: self.conf_threshold,
                },
                ..LossPlan::kase(self.lambda1, self.lambda2, self.weight_formula)
            },
        };
        if matches!(self.method, Method::Kase | Method::KaseNoKaa) && !self.entropy_terms {
            plan.entropy_max = false;
        }
        if plan.lambda1 == 0.0 {
            plan.consistency = ConsistencyMode::Off;
        }
        if plan.consistency == ConsistencyMode::Off {
            plan.lambda1 = 0.0;
        }
        if plan.lambda2 == 0.0 {
            plan.class_balance = false;
        }
        if !plan.class_balance {
            plan.lambda2 = 0.0;
        }
        plan
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step-averaged loss terms.
    pub losses: LossBreakdown,
    /// Mean known-class entropy of the teacher on target-known rows.
    pub target_known_entropy: Option<f64>,
    pub target_unknown_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// Cycles through a fixed set of row indices, reshuffling on every pass.
struct Stream {
    rows: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new(rows: Vec<usize>) -> Self {
        let pos = rows.len();
        Self { rows, pos }
    }

    fn draw(&mut self, rng: &mut Rng, n: usize) -> Vec<usize> {
        if self.rows.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                if self.pos == self.rows.len() {
                    rng.shuffle(&mut self.rows);
                    self.pos = 0;
                }
                self.pos += 1;
                self.rows[self.pos - 1]
            })
            .collect()
    }
}

/// Trains `config.method`.
pub fn train(dataset: &OpenSetDataset, config: &TrainConfig) -> Result<(StudentTeacherModel, TrainTrace)> {
    config.validate()?;
    let c = dataset.num_known();
    let closed = config.method == Method::ClosedSetCPlus1;
    let out_dim = if closed { c + 1 } else { c };
    let plan = config.loss_plan();

    let mut init_rng = Rng::fork(config.seed, 1);
    let mut sample_rng = Rng::fork(config.seed, 2);
    let mut aug_rng = Rng::fork(config.seed, 3);

    let mut sizes = alloc::vec![dataset.input_dim()];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(out_dim);
    let student = MlpClassifier::new(&sizes, &mut init_rng)?;
    let alpha = if config.method.uses_teacher() { config.ema_decay } else { 0.0 };
    let mut model = StudentTeacherModel::new(student, alpha)?;
    let mut adam = Adam::new(config.adam, model.student.num_params());

    let mut trace = TrainTrace::default();
    let class_weights = if config.reweight {
        let (w, warnings) = class_ratios(dataset)?;
        trace.warnings.extend(warnings);
        w
    } else {
        ClassWeights::uniform(c + 1)
    };

    let (mut known, mut unknown) = if closed {
        (Stream::new((0..dataset.n_source()).collect()), Stream::new(Vec::new()))
    } else {
        (Stream::new(dataset.source_known_rows()), Stream::new(dataset.source_unknown_rows()))
    };
    let known_batch = if closed {
        config.batch_known + config.batch_unknown
    } else {
        config.batch_known
    };
    let mut target = Stream::new((0..dataset.n_target()).collect());
    let steps = if dataset.n_target() > 0 {
        dataset.n_target().div_ceil(config.batch_target)
    } else {
        dataset.n_source().div_ceil(known_batch).max(1)
    };

    let sx = dataset.source_x();
    let tx = dataset.target_x();
    for epoch in 0..config.epochs {
        let mut sum = [0.0f64; 5];
        for step in 0..steps {
            let ki = known.draw(&mut sample_rng, known_batch);
            let ui = unknown.draw(&mut sample_rng, config.batch_unknown);
            let ti = target.draw(&mut sample_rng, config.batch_target);
            let known_x = augment_rows(&sx.select_rows(&ki), &mut aug_rng, config.augment_std);
            let unknown_x = augment_rows(&sx.select_rows(&ui), &mut aug_rng, config.augment_std);
            let target_rows = tx.select_rows(&ti);
            let target_student_x = augment_rows(&target_rows, &mut aug_rng, config.augment_std);
            let target_teacher_x = augment_rows(&target_rows, &mut aug_rng, config.augment_std);
            let batch = Batch {
                known_y: ki.iter().map(|&i| dataset.source_bucket(i)).collect(),
                known_x,
                unknown_x,
                target_student_x,
                target_teacher_x,
            };
            let frozen = objective::freeze(&model.student, &model.teacher, &batch, &plan)?;
            let (losses, grads) =
                objective::value_and_grad(&model.student, &batch, &frozen, &plan, &class_weights, Term::Total)?;
            if !losses.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step });
            }
            adam.step(&mut model.student, &grads);
            model.ema_update()?;
            for (s, v) in sum.iter_mut().zip([
                losses.ce_known,
                losses.entropy_unknown,
                losses.consistency,
                losses.class_balance,
                losses.total,
            ]) {
                *s += v;
            }
        }
        let n = steps as f64;
        let losses = LossBreakdown {
            ce_known: sum[0] / n,
            entropy_unknown: sum[1] / n,
            consistency: sum[2] / n,
            class_balance: sum[3] / n,
            total: sum[4] / n,
            lambda1: plan.lambda1,
            lambda2: plan.lambda2,
        };
        let (known_h, unknown_h) = target_entropy_split(&model.teacher, dataset)?;
        trace.epochs.push(EpochRecord {
            epoch,
            losses,
            target_known_entropy: known_h,
            target_unknown_entropy: unknown_h,
        });
    }
    Ok((model, trace))
}

fn require(config: &TrainConfig, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&config.method) {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!(
            "method {} is not handled here",
            config.method
        )))
    }
}

/// KASE and its no-consistency ablation.
pub fn train_kase(dataset: &OpenSetDataset, config: &TrainConfig) -> Result<(StudentTeacherModel, TrainTrace)> {
    require(config, &[Method::Kase, Method::KaseNoKaa])?;
    train(dataset, config)
}

pub fn train_se_baseline(
    dataset: &OpenSetDataset,
    config: &TrainConfig,
) -> Result<(StudentTeacherModel, TrainTrace)> {
    require(config, &[Method::KaseNoKar])?;
    train(dataset, config)
}

pub fn train_baseline(dataset: &OpenSetDataset, config: &TrainConfig) -> Result<(StudentTeacherModel, TrainTrace)> {
    require(config, &[Method::SourceOnly, Method::ClosedSetCPlus1])?;
    train(dataset, config)
}

/// Fits the detector on the teacher's known-class probabilities of every
/// source row (known = 0, source-private = 1). The model is not modified.
pub fn fit_unknown_detector(
    model: &StudentTeacherModel,
    dataset: &OpenSetDataset,
    config: &TrainConfig,
) -> Result<UnknownDetector> {
    let c = dataset.num_known();
    let probs = known_probs(&model.teacher, dataset.source_x(), c)?;
    let labels: Vec<bool> = (0..dataset.n_source()).map(|i| dataset.source_bucket(i) == c).collect();
    fit_detector_on(&probs, &labels, config)
}

/// Trains a detector on explicit `(probability vector, is_unknown)` pairs
/// with class-balanced binary cross-entropy and Adam.
pub fn fit_detector_on(probs: &Matrix, is_unknown: &[bool], config: &TrainConfig) -> Result<UnknownDetector> {
    if probs.rows() != is_unknown.len() {
        return Err(Error::Shape {
            what: "detector labels",
            expected: (probs.rows(), 1),
            actual: (is_unknown.len(), 1),
        });
    }
    let n1 = is_unknown.iter().filter(|&&u| u).count();
    let n0 = is_unknown.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::SingleClass);
    }
    let class_w = [is_unknown.len() as f64 / (2.0 * n0 as f64), is_unknown.len() as f64 / (2.0 * n1 as f64)];

    let mut rng = Rng::fork(config.seed, 4);
    let mut det = UnknownDetector::new(probs.cols(), config.detector_hidden, config.detector_threshold, &mut rng)?;
    let adam_cfg = AdamConfig {
        lr: config.detector_lr,
        ..config.adam
    };
    let mut adam = Adam::new(adam_cfg, det.net().num_params());
    let mut order: Vec<usize> = (0..probs.rows()).collect();
    for _ in 0..config.detector_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.detector_batch) {
            let x = probs.select_rows(chunk);
            let cache = det.net().forward_cached(&x)?;
            let wsum: f64 = chunk.iter().map(|&i| class_w[usize::from(is_unknown[i])]).sum();
            let mut dz = Matrix::zeros(chunk.len(), 1);
            for (r, &i) in chunk.iter().enumerate() {
                let y = if is_unknown[i] { 1.0 } else { 0.0 };
                let w = class_w[usize::from(is_unknown[i])];
                dz.row_mut(r)[0] = w * (sigmoid(cache.logits.row(r)[0]) - y) / wsum;
            }
            let grads: Gradients = det.net().backward(&cache, &dz)?;
            adam.step(det.net_mut(), &grads);
        }
    }
    det.mark_fitted();
    Ok(det)
}
