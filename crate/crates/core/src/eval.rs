//! Open-set evaluation: inference rule, per-class accuracy, mAcc over the
//! known classes plus "unknown", confusion counts, entropy statistics and
//! feature export rows.
//!
//! Target ground truth lives in [`HiddenLabels`], whose contents can only be
//! read from inside this module. Training code can hold a dataset but has no
//! path to the hidden labels:
//!
//! ```compile_fail
//! let d = kase_core::data::generate_synthetic(&Default::default()).unwrap();
//! let leaked = d.target_truth().get(0);
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{ClassRole, Domain, OpenSetDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{Decision, MlpClassifier, StudentTeacherModel, UnknownDetector};
use crate::prob::{argmax, entropy, softmax_prefix, ProbVector};

/// Target ground-truth class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenLabels(Vec<u32>);

impl HiddenLabels {
    pub fn new(labels: Vec<u32>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn get(&self, i: usize) -> u32 {
        self.0[i]
    }

    #[cfg(test)]
    pub(crate) fn as_slice_for_tests(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Prediction {
    Known(usize),
    Unknown,
}

impl Prediction {
    /// Known index, or `C` for unknown.
    pub fn bucket(self, num_known: usize) -> usize {
        match self {
            Prediction::Known(k) => k,
            Prediction::Unknown => num_known,
        }
    }
}

/// Inference with the teacher network.
///
/// A `C`-way head needs a fitted detector: a sample is "unknown" if the
/// detector says so, otherwise the argmax over the `C` known classes. A
/// `(C+1)`-way head predicts by plain argmax, index `C` meaning "unknown".
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    net: &'a MlpClassifier,
    detector: Option<&'a UnknownDetector>,
    num_known: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(
        model: &'a StudentTeacherModel,
        detector: Option<&'a UnknownDetector>,
        num_known: usize,
    ) -> Result<Self> {
        let net = &model.teacher;
        let out = net.output_dim();
        if out == num_known {
            let det = detector.ok_or(Error::MissingDetector)?;
            if det.num_known() != num_known {
                return Err(Error::Config(alloc::format!(
                    "detector expects {} classes, model has {num_known}",
                    det.num_known()
                )));
            }
        } else if out != num_known + 1 {
            return Err(Error::Config(alloc::format!(
                "model outputs {out} classes; expected {num_known} or {}",
                num_known + 1
            )));
        }
        Ok(Self {
            net,
            detector: if out == num_known { detector } else { None },
            num_known,
        })
    }

    /// Known-class distribution per row (`n × C`).
    pub fn known_probs(&self, x: &Matrix) -> Result<Matrix> {
        known_probs(self.net, x, self.num_known)
    }

    pub fn predict_probs(&self, logits_row: &[f64]) -> Result<(Prediction, ProbVector)> {
        let c = self.num_known;
        let known = softmax_prefix(logits_row, c);
        let pred = match self.detector {
            Some(det) => match det.detect_unknown(&known)? {
                Decision::Unknown => Prediction::Unknown,
                Decision::Known => Prediction::Known(known.argmax()),
            },
            None => {
                let k = argmax(logits_row);
                if k == c {
                    Prediction::Unknown
                } else {
                    Prediction::Known(k)
                }
            }
        };
        Ok((pred, known))
    }

    pub fn predict_rows(&self, x: &Matrix) -> Result<Vec<(Prediction, ProbVector)>> {
        let logits = self.net.forward(x)?;
        logits.row_iter().map(|r| self.predict_probs(r)).collect()
    }
}

/// Single-sample inference; see [`Predictor`].
pub fn predict(
    model: &StudentTeacherModel,
    detector: Option<&UnknownDetector>,
    num_known: usize,
    x: &[f64],
) -> Result<Prediction> {
    let p = Predictor::new(model, detector, num_known)?;
    let row = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(p.predict_rows(&row)?[0].0)
}

/// Softmax over the first `num_known` logits of every row.
pub fn known_probs(net: &MlpClassifier, x: &Matrix, num_known: usize) -> Result<Matrix> {
    let logits = net.forward(x)?;
    let mut out = Matrix::zeros(x.rows(), num_known);
    for i in 0..x.rows() {
        out.row_mut(i)
            .copy_from_slice(softmax_prefix(logits.row(i), num_known).as_slice());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    /// Accuracy per known class; `None` for a class with no target samples.
    pub per_class_acc: Vec<Option<f64>>,
    pub per_class_count: Vec<usize>,
    pub unknown_acc: Option<f64>,
    pub unknown_count: usize,
    /// Unweighted mean over the non-empty buckets among `C` known + unknown.
    pub macc: f64,
    /// `(C+1) × (C+1)` counts, rows = true bucket, columns = prediction.
    pub confusion: Vec<Vec<u64>>,
    pub entropy_known_mean: Option<f64>,
    pub entropy_unknown_mean: Option<f64>,
    pub n_evaluated: usize,
    pub warnings: Vec<String>,
}

/// One evaluated sample: true bucket, predicted bucket, entropy of the
/// known-class distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub truth: usize,
    pub predicted: usize,
    pub entropy: f64,
}

impl EvalReport {
    pub fn from_outcomes(num_known: usize, outcomes: &[Outcome]) -> Self {
        let c = num_known;
        let mut confusion = alloc::vec![alloc::vec![0u64; c + 1]; c + 1];
        let (mut ent_sum, mut ent_n) = ([0.0; 2], [0usize; 2]);
        for o in outcomes {
            confusion[o.truth][o.predicted] += 1;
            let side = usize::from(o.truth == c);
            ent_sum[side] += o.entropy;
            ent_n[side] += 1;
        }
        let mut warnings = Vec::new();
        let acc: Vec<Option<f64>> = (0..=c)
            .map(|b| {
                let total: u64 = confusion[b].iter().sum();
                if total == 0 {
                    let name = if b == c {
                        String::from("unknown")
                    } else {
                        alloc::format!("known class {b}")
                    };
                    warnings.push(alloc::format!("{name} has no target samples; excluded from mAcc"));
                    None
                } else {
                    Some(confusion[b][b] as f64 / total as f64)
                }
            })
            .collect();
        let present: Vec<f64> = acc.iter().flatten().copied().collect();
        let macc = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let mean = |side: usize| (ent_n[side] > 0).then(|| ent_sum[side] / ent_n[side] as f64);
        Self {
            per_class_count: (0..c).map(|b| confusion[b].iter().sum::<u64>() as usize).collect(),
            unknown_count: confusion[c].iter().sum::<u64>() as usize,
            per_class_acc: acc[..c].to_vec(),
            unknown_acc: acc[c],
            macc,
            confusion,
            entropy_known_mean: mean(0),
            entropy_unknown_mean: mean(1),
            n_evaluated: outcomes.len(),
            warnings,
        }
    }
}

/// True bucket of target row `i`: known index, or `C` for every
/// target-private class.
fn target_bucket(dataset: &OpenSetDataset, i: usize) -> usize {
    let c = dataset.num_known();
    match dataset.protocol().role(dataset.target_truth().get(i)) {
        Some(ClassRole::Known(k)) => k,
        _ => c,
    }
}

/// Scores the model on the target domain.
pub fn evaluate(
    model: &StudentTeacherModel,
    detector: Option<&UnknownDetector>,
    dataset: &OpenSetDataset,
) -> Result<EvalReport> {
    let c = dataset.num_known();
    let predictor = Predictor::new(model, detector, c)?;
    let preds = predictor.predict_rows(dataset.target_x())?;
    let outcomes: Vec<Outcome> = preds
        .iter()
        .enumerate()
        .map(|(i, (pred, probs))| Outcome {
            truth: target_bucket(dataset, i),
            predicted: pred.bucket(c),
            entropy: entropy(probs.as_slice()),
        })
        .collect();
    Ok(EvalReport::from_outcomes(c, &outcomes))
}

/// Mean known-class entropy of `net` on target-known and target-unknown
/// rows. Used for training traces.
pub fn target_entropy_split(
    net: &MlpClassifier,
    dataset: &OpenSetDataset,
) -> Result<(Option<f64>, Option<f64>)> {
    let c = dataset.num_known();
    let probs = known_probs(net, dataset.target_x(), c)?;
    let (mut sum, mut n) = ([0.0; 2], [0usize; 2]);
    for i in 0..probs.rows() {
        let side = usize::from(target_bucket(dataset, i) == c);
        sum[side] += entropy(probs.row(i));
        n[side] += 1;
    }
    let mean = |s: usize| (n[s] > 0).then(|| sum[s] / n[s] as f64);
    Ok((mean(0), mean(1)))
}

/// Counts of target entropies in `bins` uniform bins over `[0, ln C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyHistogram {
    pub edges: Vec<f64>,
    pub known: Vec<u64>,
    pub unknown: Vec<u64>,
}

impl EntropyHistogram {
    pub fn from_values(num_known: usize, bins: usize, values: &[(f64, bool)]) -> Self {
        let hi = libm::log(num_known as f64);
        let edges = (0..=bins).map(|b| hi * b as f64 / bins as f64).collect();
        let mut known = alloc::vec![0u64; bins];
        let mut unknown = alloc::vec![0u64; bins];
        for &(h, is_unknown) in values {
            let b = if hi > 0.0 {
                let idx = libm::floor(h / hi * bins as f64);
                (idx.max(0.0) as usize).min(bins - 1)
            } else {
                0
            };
            if is_unknown {
                unknown[b] += 1;
            } else {
                known[b] += 1;
            }
        }
        Self {
            edges,
            known,
            unknown,
        }
    }

    /// Count-weighted mean bin centre of one side.
    pub fn mass_center(&self, unknown: bool) -> Option<f64> {
        let counts = if unknown { &self.unknown } else { &self.known };
        let total: u64 = counts.iter().sum();
        (total > 0).then(|| {
            counts
                .iter()
                .enumerate()
                .map(|(b, &n)| n as f64 * 0.5 * (self.edges[b] + self.edges[b + 1]))
                .sum::<f64>()
                / total as f64
        })
    }
}

pub fn entropy_histogram(
    model: &StudentTeacherModel,
    dataset: &OpenSetDataset,
    bins: usize,
) -> Result<EntropyHistogram> {
    let c = dataset.num_known();
    let probs = known_probs(&model.teacher, dataset.target_x(), c)?;
    let values: Vec<(f64, bool)> = (0..probs.rows())
        .map(|i| (entropy(probs.row(i)), target_bucket(dataset, i) == c))
        .collect();
    Ok(EntropyHistogram::from_values(c, bins, &values))
}

/// One row of the feature export.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub domain: Domain,
    pub true_label: u32,
    /// Predicted class id, `None` for "unknown".
    pub pred_label: Option<u32>,
    pub entropy: f64,
    /// Last hidden layer of the inference network.
    pub features: Vec<f64>,
    pub input: Vec<f64>,
}

/// Source rows followed by target rows.
pub fn feature_rows(
    model: &StudentTeacherModel,
    detector: Option<&UnknownDetector>,
    dataset: &OpenSetDataset,
) -> Result<Vec<FeatureRow>> {
    let c = dataset.num_known();
    let predictor = Predictor::new(model, detector, c)?;
    let known_ids = dataset.protocol().known();
    let mut rows = Vec::with_capacity(dataset.n_source() + dataset.n_target());
    for (domain, x) in [(Domain::Source, dataset.source_x()), (Domain::Target, dataset.target_x())] {
        let preds = predictor.predict_rows(x)?;
        let feats = model.teacher.hidden_features(x)?;
        for (i, (pred, probs)) in preds.into_iter().enumerate() {
            let true_label = match domain {
                Domain::Source => dataset.source_labels()[i],
                Domain::Target => dataset.target_truth().get(i),
            };
            rows.push(FeatureRow {
                domain,
                true_label,
                pred_label: match pred {
                    Prediction::Known(k) => Some(known_ids[k]),
                    Prediction::Unknown => None,
                },
                entropy: entropy(probs.as_slice()),
                features: feats.row(i).to_vec(),
                input: x.row(i).to_vec(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Layer;
    use alloc::vec;

    fn outcome(truth: usize, predicted: usize) -> Outcome {
        Outcome {
            truth,
            predicted,
            entropy: 0.0,
        }
    }

    #[test]
    fn perfect_predictor() {
        let o: Vec<Outcome> = (0..3).flat_map(|b| [outcome(b, b), outcome(b, b)]).collect();
        let r = EvalReport::from_outcomes(2, &o);
        assert_eq!(r.macc, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r.confusion[i][j], if i == j { 2 } else { 0 });
            }
        }
    }

    #[test]
    fn macc_arithmetic() {
        // class 0: 1.0, class 1: 0.5, unknown: 0.0
        let o = [outcome(0, 0), outcome(1, 1), outcome(1, 0), outcome(2, 0)];
        let r = EvalReport::from_outcomes(2, &o);
        assert_eq!(r.per_class_acc, vec![Some(1.0), Some(0.5)]);
        assert_eq!(r.unknown_acc, Some(0.0));
        assert_eq!(r.macc, 0.5);
        assert_eq!(r.per_class_count, vec![1, 2]);
        assert_eq!(r.unknown_count, 1);
    }

    #[test]
    fn everything_unknown() {
        let c = 3;
        let o: Vec<Outcome> = (0..=c).map(|b| outcome(b, c)).collect();
        let r = EvalReport::from_outcomes(c, &o);
        assert_eq!(r.unknown_acc, Some(1.0));
        assert!(r.per_class_acc.iter().all(|a| *a == Some(0.0)));
        assert!((r.macc - 1.0 / (c as f64 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_bucket_excluded_with_warning() {
        let o = [outcome(0, 0), outcome(2, 0)];
        let r = EvalReport::from_outcomes(2, &o);
        assert_eq!(r.per_class_acc[1], None);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.macc, 0.5);
    }

    #[test]
    fn duplicating_a_class_keeps_macc() {
        let base = [outcome(0, 0), outcome(0, 1), outcome(1, 1), outcome(2, 2), outcome(2, 0)];
        let mut dup = base.to_vec();
        dup.extend([outcome(0, 0), outcome(0, 1)]);
        dup.extend([outcome(0, 0), outcome(0, 1)]);
        let a = EvalReport::from_outcomes(2, &base);
        let b = EvalReport::from_outcomes(2, &dup);
        assert_eq!(a.macc, b.macc);
    }

    /// Linear net whose logits are the input itself.
    fn identity_model(dim: usize) -> StudentTeacherModel {
        let net = MlpClassifier::from_layers(vec![Layer {
            weights: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }])
        .unwrap();
        StudentTeacherModel::new(net, 0.99).unwrap()
    }

    fn constant_detector(unknown: bool) -> UnknownDetector {
        let mut out = Layer::zeros(4, 1);
        out.bias[0] = if unknown { 10.0 } else { -10.0 };
        UnknownDetector::from_layers(Layer::zeros(4, 4), out, 0.5).unwrap()
    }

    #[test]
    fn detector_precedence() {
        let model = identity_model(4);
        let x = [0.0, 0.0, 0.0, 20.0];
        let known = constant_detector(false);
        assert_eq!(predict(&model, Some(&known), 4, &x).unwrap(), Prediction::Known(3));
        let unknown = constant_detector(true);
        assert_eq!(predict(&model, Some(&unknown), 4, &x).unwrap(), Prediction::Unknown);
        assert_eq!(predict(&model, None, 4, &x).unwrap_err(), Error::MissingDetector);
    }

    #[test]
    fn c_plus_one_argmax() {
        let model = identity_model(4);
        // C = 3, the 4th logit is the unknown bucket
        assert_eq!(predict(&model, None, 3, &[0.0, 1.0, 0.0, 5.0]).unwrap(), Prediction::Unknown);
        assert_eq!(predict(&model, None, 3, &[0.0, 6.0, 0.0, 5.0]).unwrap(), Prediction::Known(1));
    }

    #[test]
    fn histogram_bins() {
        let c = 4;
        let ln_c = libm::log(4.0);
        let h = EntropyHistogram::from_values(c, 20, &[(0.0, false), (ln_c, true), (ln_c * 0.5, true)]);
        assert_eq!(h.edges.len(), 21);
        assert_eq!(h.known[0], 1);
        assert_eq!(h.unknown[19], 1);
        assert_eq!(h.unknown[10], 1);
        assert_eq!(h.known.iter().chain(&h.unknown).sum::<u64>(), 3);
        assert!(h.mass_center(true).unwrap() > h.mass_center(false).unwrap());
    }
}
